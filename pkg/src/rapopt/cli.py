"""Command-line benchmark harness.

Subcommands: ``gen``, ``run``, ``tune``, ``validate``, ``plot`` and
``certify``.  Exit codes: 0 success, 1 solver or I/O failure, 2 usage error.
The default output directory comes from ``RAPOPT_OUTPUT_DIR`` (else
``./rapopt-out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig, run_admm, run_ag, run_svrg, tune_inner_iterations
from .generators import GenSpec, generate, load_instance, save_instance
from .metrics import (
    SolverDivergence,
    eps_delta_certificate,
    mean_trajectory,
    read_csv_trajectory,
)
from .problems import MultiBlockProblem, SingularBlockError, read_dense, write_dense
from .rapdual import (
    RapDualConfig,
    compute_radual_schedule,
    rapdual_run,
    validate_radual_schedule,
)
from .rapgrad import (
    InvariantError,
    RapGradConfig,
    compute_ragrad_schedule,
    rapgrad_run,
    validate_ragrad_schedule,
)
from .scad import ProxError, ScadParams

log = logging.getLogger("rapopt")

FINITE_SUM_METHODS = ("rapgrad", "batch-rapgrad", "svrg", "ag")
MULTI_BLOCK_METHODS = ("rapdual", "batch-rapdual", "admm")
SOLVER_ERRORS = (InvariantError, SolverDivergence, ProxError, SingularBlockError,
                 np.linalg.LinAlgError, FloatingPointError)


class UsageError(Exception):
    """Bad flags or inconsistent configuration (exit code 2)."""


def default_output_dir() -> Path:
    return Path(os.environ.get("RAPOPT_OUTPUT_DIR", "rapopt-out"))


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    try:
        scad = ScadParams(lam=args.lam, gamma=args.gamma, eps=args.eps,
                          rho=args.rho if args.rho is not None else
                          (0.01 if args.family == "scad-ls" else 2.0))
        spec = GenSpec(family=args.family, m=args.m, n=args.n, d=args.d, sparsity=args.sparsity,
                       nnz_signal=args.nnz, seed=args.seed, scad=scad)
    except ValueError as e:
        raise UsageError(str(e)) from e
    problem, truth = generate(spec)
    out = Path(args.out) if args.out else default_output_dir() / f"{spec.family}-m{spec.m}-n{spec.n}-s{spec.seed}"
    path, digest = save_instance(out, spec, problem, truth)
    print(f"instance {path}")
    print(f"digest {digest}")
    return 0


# ---------------------------------------------------------------------------
# run


RUN_KEYS = ("instance", "method", "seeds", "k", "s_factor", "s_override", "output_rule",
            "inner_constant", "max_passes", "stop_tol", "record_every", "rho", "certify", "out",
            "jobs", "step", "epoch_length", "lambda_rule")


def _merge_config(args) -> dict:
    """Flags override the JSON config file, which overrides the defaults."""
    opts = {"seeds": [0], "k": None, "s_factor": 1.0, "s_override": None, "output_rule": "uniform",
            "inner_constant": "theorem", "max_passes": 3e4, "stop_tol": 1e-10, "record_every": 1.0,
            "rho": None, "certify": False, "out": None, "jobs": 1, "step": None,
            "epoch_length": None, "lambda_rule": None, "instance": None, "method": None}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        unknown = set(cfg) - set(RUN_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opts.update(cfg)
    for key in RUN_KEYS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            opts[key] = val
    if opts["instance"] is None or opts["method"] is None:
        raise UsageError("run needs --instance and --method (flags or config)")
    if not opts["seeds"]:
        raise UsageError("at least one seed is required")
    if opts["method"] not in FINITE_SUM_METHODS + MULTI_BLOCK_METHODS:
        raise UsageError(f"unknown method {opts['method']!r}")
    return opts


def run_method(problem, method: str, opts: dict, seed: int):
    """Run one method on one problem; returns ``(point, record)`` where
    ``point`` is an array (finite sum) or ``(blocks, xm)`` (multi-block)."""
    k = opts["k"] if opts["k"] is not None else 10 ** 9
    common = dict(seed=seed, max_passes=opts["max_passes"], stop_tol=opts["stop_tol"],
                  record_every=opts["record_every"])
    if method in ("rapgrad", "batch-rapgrad"):
        cfg = RapGradConfig(k=k, s_override=opts["s_override"], s_factor=opts["s_factor"],
                            output_rule=opts["output_rule"], inner_constant=opts["inner_constant"],
                            batch=method == "batch-rapgrad", **common)
        return rapgrad_run(problem, cfg)
    if method in ("rapdual", "batch-rapdual"):
        inner = opts["inner_constant"] if opts["inner_constant"] != "experiments" else "theorem"
        cfg = RapDualConfig(k=k, s_override=opts["s_override"], s_factor=opts["s_factor"],
                            output_rule=opts["output_rule"], inner_constant=inner,
                            batch=method == "batch-rapdual", **common)
        xs, xm, rec = rapdual_run(problem, cfg)
        return (xs, xm), rec
    steps = {key: opts[key] for key in ("step", "epoch_length", "lambda_rule") if opts[key] is not None}
    bcfg = BaselineConfig(method=method, step_params=steps, **common)
    if method == "svrg":
        return run_svrg(problem, bcfg)
    if method == "ag":
        return run_ag(problem, bcfg)
    rho = opts["rho"] if opts["rho"] is not None else problem.L ** 2
    xs, xm, rec = run_admm(problem, rho, bcfg, k=opts["k"])
    return (xs, xm), rec


def _run_seed(instance: str, method: str, opts: dict, seed: int, out: str) -> dict:
    problem, _, spec = load_instance(instance)
    point, rec = run_method(problem, method, opts, seed)
    out = Path(out)
    csv_path = out / f"{method}_seed{seed}.csv"
    rec.write_csv(csv_path)
    summary = rec.summary()
    summary["csv"] = csv_path.name
    summary["instance_digest"] = json.loads(Path(instance).read_text()).get("digest")
    if isinstance(problem, MultiBlockProblem):
        xs, xm = point
        flat = np.concatenate(list(xs) + [xm])
    else:
        flat = point
        if opts["certify"] and method in ("rapgrad", "batch-rapgrad"):
            summary["certificate"] = _certificate(problem, rec, flat)
    x_path = out / f"{method}_seed{seed}_x.txt"
    write_dense(x_path, flat)
    summary["point"] = x_path.name
    return summary


def _certificate(problem, rec, x) -> dict:
    idx = rec.metadata.get("output_index")
    if idx is None:
        # stopped early: the point came from the subproblem centred at the last outer iterate
        idx = len(rec.iterates)
    center = rec.iterates[idx - 1]
    eps_hat, delta_hat, _ = eps_delta_certificate(problem, x, center)
    g = problem.gradient(x)
    return {"center_index": idx - 1, "eps_hat": eps_hat, "delta_hat": delta_hat,
            "delta_within_eps_over_L2": bool(delta_hat <= eps_hat / problem.L ** 2),
            "grad_norm_sq": float(g @ g)}


def cmd_run(args) -> int:
    opts = _merge_config(args)
    instance = str(opts["instance"])
    method = opts["method"]
    try:
        problem, _, spec = load_instance(instance)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        log.error("cannot load instance %s: %s", instance, e)
        return 1
    is_multi = isinstance(problem, MultiBlockProblem)
    if is_multi != (method in MULTI_BLOCK_METHODS):
        raise UsageError(f"method {method} does not apply to a {spec.family} instance")
    out = Path(opts["out"]) if opts["out"] else default_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in opts["seeds"]]
    if opts["jobs"] > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=opts["jobs"]) as pool:
            futures = [pool.submit(_run_seed, instance, method, opts, s, str(out)) for s in seeds]
            summaries = [f.result() for f in futures]
    else:
        summaries = [_run_seed(instance, method, opts, s, str(out)) for s in seeds]
    if len(seeds) > 1:
        _write_mean(out, method, summaries)
    summary = {"method": method, "instance": instance, "options": opts, "runs": summaries}
    path = out / f"{method}_summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    for s in summaries:
        fin = s["final"]
        print(f"{method} seed={s['seed']} stop={s['stop_reason']} passes={fin['pass']:.6g} "
              f"objective={fin['objective']:.10g} grad_norm_sq={fin['grad_norm_sq']:.3e}")
    print(f"summary {path}")
    return 0


def _write_mean(out: Path, method: str, summaries: list):
    trajs = [read_csv_trajectory(out / s["csv"]) for s in summaries]
    grid, obj = mean_trajectory(trajs, "objective")
    _, gn = mean_trajectory(trajs, "grad_norm_sq", grid)
    cols = ["pass", "objective", "grad_norm_sq"]
    rows = [grid, obj, gn]
    if not all(np.isnan(t["feasibility_sq"]).all() for t in trajs):
        _, feas = mean_trajectory(trajs, "feasibility_sq", grid)
        cols.append("feasibility_sq")
        rows.append(feas)
    lines = [",".join(cols)]
    lines.extend(",".join(repr(float(v)) for v in r) for r in zip(*rows))
    (out / f"{method}_mean.csv").write_text("\n".join(lines) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# tune, validate, certify


def cmd_tune(args) -> int:
    problem, _, spec = load_instance(args.instance)
    if isinstance(problem, MultiBlockProblem):
        raise UsageError("tune applies to finite-sum instances")
    res = tune_inner_iterations(problem, args.factors, args.budget, seed=args.seed)
    print(json.dumps({"best_factor": res.best_factor,
                      "final_grad_norm_sq": {repr(k): v for k, v in res.final_grad_norm_sq.items()},
                      "budget_passes": args.budget}, indent=2))
    return 0


def cmd_validate(args) -> int:
    try:
        if args.kind == "ragrad":
            sch = compute_ragrad_schedule(args.m, args.L, args.mu, args.inner_constant or "theorem")
            rep = validate_ragrad_schedule(sch, args.m, args.mu)
        else:
            if args.abar is None:
                raise UsageError("--abar is required for --kind radual")
            sch = compute_radual_schedule(args.m, args.L, args.mu, args.abar,
                                          args.inner_constant or "theorem")
            rep = validate_radual_schedule(sch, args.m, args.mu)
    except ValueError as e:
        raise UsageError(str(e)) from e
    for key, val in asdict(sch).items():
        print(f"{key} = {val:.12g}" if isinstance(val, float) else f"{key} = {val}")
    for line in rep.lines():
        print(line)
    print("PASS" if rep.passed else "FAIL " + ",".join(rep.violations))
    return 0 if rep.passed else 1


def cmd_certify(args) -> int:
    problem, _, spec = load_instance(args.instance)
    if isinstance(problem, MultiBlockProblem):
        raise UsageError("certify applies to finite-sum instances")
    x = read_dense(args.point)[:, 0]
    center = read_dense(args.center)[:, 0]
    eps_hat, delta_hat, _ = eps_delta_certificate(problem, x, center, tol=args.tol)
    g = problem.gradient(x)
    out = {"eps_hat": eps_hat, "delta_hat": delta_hat,
           "delta_within_eps_over_L2": bool(delta_hat <= eps_hat / problem.L ** 2),
           "grad_norm_sq": float(g @ g), "four_eps": 4.0 * eps_hat}
    print(json.dumps(out, indent=2))
    return 0


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "rapopt"
    trajs = []
    for path in args.csv:
        try:
            trajs.append(read_csv_trajectory(path))
        except (OSError, ValueError) as e:
            log.error("%s", e)
            return 1
    labels = args.labels or [Path(p).stem for p in args.csv]
    if len(labels) != len(trajs):
        raise UsageError("--labels needs one label per CSV")
    fig, ax = plt.subplots(figsize=(6, 4))
    for t, label in zip(trajs, labels):
        ax.plot(t["pass"], t[args.y], label=label)
    if args.logy:
        ax.set_yscale("log")
    ax.set_xlabel("passes")
    ax.set_ylabel(args.y)
    ax.legend()
    fig.tight_layout()
    out = Path(args.out) if args.out else default_output_dir() / f"{args.y}.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"plot {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rapopt", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a random instance")
    g.add_argument("--family", choices=("scad-ls", "compressed-sensing"), required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, default=1)
    g.add_argument("--sparsity", type=float, default=0.1)
    g.add_argument("--nnz", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--lam", type=float, default=2.0)
    g.add_argument("--gamma", type=float, default=4.0)
    g.add_argument("--eps", type=float, default=1e-3)
    g.add_argument("--rho", type=float, default=None)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run a solver or baseline")
    r.add_argument("--instance")
    r.add_argument("--method", choices=FINITE_SUM_METHODS + MULTI_BLOCK_METHODS)
    r.add_argument("--config")
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--k", type=int)
    r.add_argument("--s-factor", dest="s_factor", type=float)
    r.add_argument("--s-override", dest="s_override", type=int)
    r.add_argument("--output-rule", dest="output_rule", choices=("uniform", "best"))
    r.add_argument("--inner-constant", dest="inner_constant",
                   choices=("theorem", "lemma", "experiments"))
    r.add_argument("--max-passes", dest="max_passes", type=float)
    r.add_argument("--stop-tol", dest="stop_tol", type=float)
    r.add_argument("--record-every", dest="record_every", type=float)
    r.add_argument("--rho", type=float, help="ADMM penalty (default L^2)")
    r.add_argument("--step", type=float, help="SVRG step size")
    r.add_argument("--epoch-length", dest="epoch_length", type=int)
    r.add_argument("--lambda-rule", dest="lambda_rule", choices=("nonconvex", "convex"))
    r.add_argument("--certify", action="store_true")
    r.add_argument("--jobs", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("tune", help="pick the inner-iteration factor for RapGrad")
    t.add_argument("--instance", required=True)
    t.add_argument("--factors", type=float, nargs="+", default=[1.0, 0.1, 0.01])
    t.add_argument("--budget", type=float, default=100.0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_tune)

    v = sub.add_parser("validate", help="compute and check a step-parameter schedule")
    v.add_argument("--kind", choices=("ragrad", "radual"), required=True)
    v.add_argument("--m", type=int, required=True)
    v.add_argument("--L", type=float, required=True)
    v.add_argument("--mu", type=float, required=True)
    v.add_argument("--abar", type=float)
    v.add_argument("--inner-constant", dest="inner_constant")
    v.set_defaults(func=cmd_validate)

    p = sub.add_parser("plot", help="plot run CSVs against passes as SVG")
    p.add_argument("csv", nargs="+")
    p.add_argument("--y", default="objective", choices=("objective", "grad_norm_sq", "feasibility_sq"))
    p.add_argument("--logy", action="store_true")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    c = sub.add_parser("certify", help="(eps, delta) certificate of a point against a subproblem")
    c.add_argument("--instance", required=True)
    c.add_argument("--point", required=True)
    c.add_argument("--center", required=True)
    c.add_argument("--tol", type=float, default=1e-12)
    c.set_defaults(func=cmd_certify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"rapopt: error: {e}", file=sys.stderr)
        return 2
    except SOLVER_ERRORS as e:
        print(f"rapopt: solver failure: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"rapopt: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
