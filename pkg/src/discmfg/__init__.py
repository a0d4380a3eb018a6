"""Discrete-time mean field games: single-period fixed points, pasting and BSΔE iteration."""

__version__ = "0.1.0"
