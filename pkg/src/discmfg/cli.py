"""Command-line entry point: ``discmfg <subcommand> [options]``.

Exit codes: 0 converged (or all checks passed), 2 non-converged (or a check
failed), 1 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analytic import LqParams, lq_g_recursion, lq_policy_coeffs, lq_single_period, lq_two_period, tanh_uniqueness_margin
from .bsde import BsdeOptions, solve_mfg_bsde
from .config import ConfigError, RunConfig, parse_value
from .families import build_problem, lq_problem
from .measures import EmpiricalMeasure, MeasureFlow, wasserstein
from .model import FeedbackPolicy, sample_paths
from .single_period import SolverOptions, solve_single_period

log = logging.getLogger("discmfg")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 1, 2


# ---------------------------------------------------------------- output helpers

def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else None


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_bytes(buf.getvalue().encode("utf-8"))


def flow_rows(flow: MeasureFlow):
    for i, (t, m) in enumerate(zip(flow.times, flow.measures)):
        for row, wt in zip(m.points, m.weights):
            yield [i, repr(float(t))] + [repr(float(v)) for v in row] + [repr(float(wt))]


def write_flow(out: Path, flow: MeasureFlow) -> None:
    d = flow[0].dim
    write_csv(out / "flow.csv", ["step", "time"] + [f"x{j}" for j in range(d)] + ["weight"], flow_rows(flow))
    qs = [0.05, 0.25, 0.5, 0.75, 0.95]
    rows = []
    for i, (t, m) in enumerate(zip(flow.times, flow.measures)):
        v = m.points[:, 0]
        q = np.quantile(v, qs) if m.is_uniform else [float("nan")] * len(qs)
        rows.append([i, repr(float(t)), repr(float(np.sum(m.weights * v))),
                     repr(float(np.sum(m.weights * (v - np.sum(m.weights * v)) ** 2))), *[repr(float(x)) for x in q]])
    write_csv(out / "flow_summary.csv", ["step", "time", "mean", "var"] + [f"q{int(100 * q):02d}" for q in qs], rows)


def write_policy(out: Path, policy: FeedbackPolicy) -> None:
    write_csv(out / "policy.csv", ["period", "knot", "action"],
              ([i, repr(x), repr(a)] for i, x, a in policy.knot_rows()))


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    manifest = {"command": command, "config": cfg.to_dict(), "version": __version__, "seed": cfg.solver["seed"]}
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------- option mapping

def solver_options(cfg: RunConfig) -> SolverOptions:
    s = cfg.solver
    return SolverOptions(damping=s["damping"], max_iters=s["max_iters"], tol_fp=s["tol"], quadrature=s["quadrature"],
                         n_knots=s["n_knots"], seed=s["seed"])


def bsde_options(cfg: RunConfig) -> BsdeOptions:
    s = cfg.solver
    return BsdeOptions(basis=s["basis"], basis_degree=s["basis_degree"], damping=s["damping"],
                       max_iters=s["max_iters"], tol_fp=s["tol"], n_knots=s["n_knots"], n_paths=s["paths"],
                       seed=s["seed"])


def _problem(cfg: RunConfig, k: Optional[int] = None):
    try:
        return build_problem(cfg.problem_spec(k))
    except (TypeError, ValueError) as exc:
        raise ConfigError([("/problem", str(exc))]) from exc


def _global_exploitability(problem, policy, flow, paths, opts) -> dict:
    if problem.dim != 1:
        return {"exploitability": None, "exploitability_stderr": None}
    from .control import multi_period_exploitability

    val, se = multi_period_exploitability(problem, policy, flow, paths, opts)
    return {"exploitability": _num(val), "exploitability_stderr": _num(se)}


# ---------------------------------------------------------------- subcommands

def cmd_solve_single(cfg: RunConfig, out: Path) -> int:
    problem = _problem(cfg, k=1)
    opts = solver_options(cfg)
    paths = sample_paths(problem, cfg.solver["paths"], cfg.solver["seed"])
    policy, m, report = solve_single_period(problem, None, opts, paths)
    flow = MeasureFlow.uniform(problem.horizon_T, [EmpiricalMeasure(paths.initial_states), m])
    write_flow(out, flow)
    write_policy(out, policy)
    write_json(out / "report.json", {"method": "single_period", "report": report.to_dict()})
    return EXIT_OK if report.converged else EXIT_NONCONVERGED


def cmd_solve_multi(cfg: RunConfig, out: Path) -> int:
    problem = _problem(cfg)
    method = cfg.solver["method"]
    paths = sample_paths(problem, cfg.solver["paths"], cfg.solver["seed"])
    opts = solver_options(cfg)
    body = {"method": method, "k": problem.periods_k}
    if method == "pasting":
        from .pasting import StageSolveError, paste_equilibrium

        try:
            policy, flow, reports = paste_equilibrium(problem, opts, paths=paths)
        except StageSolveError as exc:
            write_json(out / "report.json", body | {"converged": False, "failed_stage": exc.stage, "error": str(exc)})
            log.error("%s", exc)
            return EXIT_NONCONVERGED
        converged = all(r.converged for r in reports)
        body["stages"] = [r.to_dict() for r in reports]
    else:
        policy, flow, report = solve_mfg_bsde(problem, bsde_options(cfg), paths=paths)
        converged = report.converged
        body["report"] = report.to_dict()
    body["converged"] = converged
    body.update(_global_exploitability(problem, policy, flow, paths, opts))
    write_flow(out, flow)
    write_policy(out, policy)
    write_json(out / "report.json", body)
    return EXIT_OK if converged else EXIT_NONCONVERGED


def cmd_sweep(cfg: RunConfig, out: Path, csv_path: Optional[Path]) -> int:
    from .harness import donsker_sweep

    problem = _problem(cfg, k=1)
    sw = cfg.sweep
    try:
        result = donsker_sweep(problem, sw["ks"], sw["k_ref"], bsde_options(cfg), workers=sw["workers"])
    except ValueError as exc:
        raise ConfigError([("/sweep", str(exc))]) from exc
    csv_path = out / "sweep.csv" if csv_path is None else csv_path
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_bytes(result.to_csv().encode("utf-8"))
    write_json(csv_path.with_suffix(".json"), result.to_dict())
    return EXIT_OK if bool(np.all(result.converged)) else EXIT_NONCONVERGED


def _check(name, value, expected, tol, relative=False):
    value, expected = float(value), float(expected)
    err = abs(value - expected) / (abs(expected) if relative else 1.0)
    return {"name": name, "value": value, "expected": expected, "tolerance": tol, "relative": relative,
            "passed": bool(err <= tol)}


def validate_lq_checks(cfg: RunConfig) -> list:
    """Analytic identities and numeric solves against the closed forms (unit period length)."""
    p = cfg.problem
    if p["family"] != "lq":
        raise ConfigError([("/problem/family", "validate-lq needs the lq family")])
    c, c_L, sigma = float(p["c"]), float(p["c_L"]), float(p["sigma"])
    xi = p.get("xi") or {}
    n, seed = cfg.solver["paths"], cfg.solver["seed"]
    checks = []
    base = lq_problem(c=c, c_L=c_L, sigma=sigma, T=1.0, k=1, xi=xi)
    prm = LqParams(c=c, c_L=c_L, noise_var=sigma**2, xi_mean=base.initial.expected, xi_var=base.initial.variance)

    two, rec = lq_two_period(prm), lq_g_recursion(prm, 2)
    checks.append(_check("recursion_k2_curvature", rec[1, 0], two["g1_curvature"], 0.0))
    checks.append(_check("recursion_k2_offset", rec[1, 1], two["g1_offset"], 0.0))
    checks.append(_check("recursion_k1_coeff", lq_policy_coeffs(prm, 1)[0], lq_single_period(prm)["policy_coeff"], 0.0))
    checks.append(_check("tanh_margin_c3_k1", tanh_uniqueness_margin(3.0, 1.0), 1.0, 0.0))

    opts = solver_options(cfg)
    paths = sample_paths(base, n, seed)
    policy, m, report = solve_single_period(base, None, opts, paths)
    sp = lq_single_period(prm)
    xi_s = paths.xi()
    exact = EmpiricalMeasure((1 - sp["policy_coeff"]) * xi_s + sp["policy_coeff"] * np.mean(xi_s)
                             + base.apply_sigma(paths.increment(0)))
    checks.append({"name": "single_period_converged", "passed": bool(report.converged)})
    checks.append(_check("single_period_w2", wasserstein(m, exact, p=2.0), 0.0, 0.02))
    checks.append(_check("single_period_exploitability", max(report.exploitability, 0.0), 0.0, 1e-3))
    checks.append(_check("single_period_coeff", -policy.maps[0].slope(), sp["policy_coeff"], 0.02, relative=True))

    from .pasting import paste_equilibrium

    for k in (2, 5):
        pk = lq_problem(c=c, c_L=c_L, sigma=sigma, T=float(k), k=k, xi=xi)
        pol, flow, reps = paste_equilibrium(pk, opts, paths=sample_paths(pk, n, seed))
        want = lq_policy_coeffs(prm, k)
        for i, fn in enumerate(pol.maps):
            checks.append(_check(f"pasting_k{k}_coeff_{i}", -fn.slope(), want[i], 0.02, relative=True))
        m1 = flow[1].values
        se = float(np.std(m1, ddof=1) / np.sqrt(m1.size))
        checks.append(_check(f"pasting_k{k}_mean_t1", np.mean(m1), prm.xi_mean, 3.0 * se))
    return checks


def cmd_validate_lq(cfg: RunConfig, out: Path) -> int:
    checks = validate_lq_checks(cfg)
    ok = all(c["passed"] for c in checks)
    write_json(out / "validate_lq.json", {"passed": ok, "checks": checks})
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    """Time the solvers; timings go to stdout only so written files stay byte-stable."""
    from .pasting import paste_equilibrium

    opts = solver_options(cfg)
    n, seed = cfg.solver["paths"], cfg.solver["seed"]
    k = cfg.solver["k"]
    results, ok = {}, True
    p1 = _problem(cfg, k=1)
    t0 = time.perf_counter()
    _, _, rep = solve_single_period(p1, None, opts, sample_paths(p1, n, seed))
    print(f"solve_single_period n={n}: {time.perf_counter() - t0:.3f} s")
    results["single_period"] = rep.to_dict()
    ok &= rep.converged

    pk = _problem(cfg)
    if pk.family == "lq" or pk.periods_k <= 3:
        t0 = time.perf_counter()
        _, _, reps = paste_equilibrium(pk, opts, paths=sample_paths(pk, n, seed))
        print(f"paste_equilibrium k={k} n={n}: {time.perf_counter() - t0:.3f} s")
        results["pasting"] = [r.to_dict() for r in reps]
        ok &= all(r.converged for r in reps)
    if pk.separated:
        t0 = time.perf_counter()
        _, _, rep = solve_mfg_bsde(pk, bsde_options(cfg), paths=sample_paths(pk, n, seed))
        print(f"solve_mfg_bsde k={k} n={n}: {time.perf_counter() - t0:.3f} s")
        results["bsde"] = rep.to_dict()
        ok &= rep.converged
    write_json(out / "bench.json", results)
    return EXIT_OK if ok else EXIT_NONCONVERGED


# ---------------------------------------------------------------- argument parsing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int, help="number of simulated paths")
    p.add_argument("--k", type=int, help="number of periods")
    p.add_argument("--tol", type=float, help="fixed-point W1 tolerance")
    p.add_argument("--damping", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--basis-degree", dest="basis_degree", type=int)
    p.add_argument("--family", help="problem family (lq, tanh, custom-polynomial)")
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="problem parameter override, value parsed as JSON; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="discmfg", description="Discrete-time mean field game solvers")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("solve-single", "single-period equilibrium"),
                           ("solve-multi", "multi-period equilibrium"),
                           ("sweep", "convergence sweep over the number of periods"),
                           ("validate-lq", "linear-quadratic oracle checks"),
                           ("bench", "solver timings")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "solve-multi":
            p.add_argument("--method", choices=["pasting", "bsde"])
        if name == "sweep":
            p.add_argument("--ks", help="comma-separated period counts, e.g. 2,4,8")
            p.add_argument("--kref", type=int, help="reference number of periods")
            p.add_argument("--workers", type=int)
            p.add_argument("--out", type=Path, help="sweep CSV path (JSON written alongside)")
    return parser


def overrides_from_args(args) -> dict:
    over: dict = {"problem": {}, "solver": {}, "sweep": {}, "output": {}}
    for key in ("seed", "k", "tol", "damping", "max_iters", "basis_degree", "method"):
        val = getattr(args, key, None)
        if val is not None:
            over["solver"][key] = val
    if args.paths is not None:
        over["solver"]["paths"] = args.paths
    if args.family is not None:
        over["problem"]["family"] = args.family
    for item in args.param:
        if "=" not in item:
            raise ConfigError([("/problem", f"--param expects NAME=VALUE, got {item!r}")])
        name, text = item.split("=", 1)
        over["problem"][name.strip()] = parse_value(text)
    if getattr(args, "ks", None):
        try:
            over["sweep"]["ks"] = [int(v) for v in args.ks.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError([("/sweep/ks", f"cannot parse {args.ks!r}")]) from exc
    if getattr(args, "kref", None) is not None:
        over["sweep"]["k_ref"] = args.kref
    if getattr(args, "workers", None) is not None:
        over["sweep"]["workers"] = args.workers
    if args.out_dir is not None:
        over["output"]["dir"] = args.out_dir
    return {k: v for k, v in over.items() if v}


def load_config(args) -> RunConfig:
    file_cfg = None
    if args.config is not None:
        try:
            file_cfg = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([("", f"cannot read {args.config}: {exc}")]) from exc
    over = overrides_from_args(args)
    # a family switch on the command line drops parameters of the file's family
    if "family" in over.get("problem", {}) and file_cfg and isinstance(file_cfg.get("problem"), dict):
        if file_cfg["problem"].get("family") != over["problem"]["family"]:
            file_cfg = dict(file_cfg)
            file_cfg["problem"] = {}
    if "family" in over.get("problem", {}) and not (file_cfg or {}).get("problem"):
        file_cfg = dict(file_cfg or {})
        file_cfg["problem"] = {"family": over["problem"]["family"]}
    return RunConfig.build(file_cfg, over)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        out = Path(cfg.output["dir"])
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, cfg)
        if args.command == "solve-single":
            return cmd_solve_single(cfg, out)
        if args.command == "solve-multi":
            return cmd_solve_multi(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, getattr(args, "out", None))
        if args.command == "validate-lq":
            return cmd_validate_lq(cfg, out)
        return cmd_bench(cfg, out)
    except ConfigError as exc:
        for ptr, msg in exc.errors:
            print(f"config error at {ptr or '/'}: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
