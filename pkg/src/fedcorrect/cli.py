"""Command line entry point: ``run``, ``fixed-point``, ``landscape`` and ``validate``.

Every subcommand takes an experiment config JSON. Failures exit nonzero and
print one JSON object ``{"error", "message"[, "round"]}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from fedcorrect.analysis import (
    BoundInputs,
    error_bound,
    estimate_h,
    estimate_q,
    gradient_variance,
    horizon_server_lr,
    residual_landscape,
    sgd_h,
    sgd_q,
)
from fedcorrect.problems import (
    NotContractiveError,
    QuadraticFamily,
    fixed_point_closed_form,
    global_min,
    limiting_fixed_point,
)
from fedcorrect.sim import (
    ConfigError,
    Experiment,
    RoundError,
    atomic_open,
    dump_metrics,
    expected_fixed_point,
    load_config,
    make_round_operator,
    prepare,
    run_experiment,
    write_metrics,
)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind: str, message: str, code: int = 1, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    raise SystemExit(code)


def _vec(x) -> list[float] | None:
    return None if x is None else [float(v) for v in np.asarray(x).ravel()]


# ---------------------------------------------------------------- fixed-point


def _fixed_preconds(exp: Experiment) -> list:
    if not isinstance(exp.problem, QuadraticFamily):
        raise CliError("closed-form fixed points need a quadratic problem")
    if any(k.name not in ("sgd", "precond_gd") for k in exp.kinds):
        raise CliError("closed-form fixed points need sgd or precond_gd clients")
    return [k.preconditioner for k in exp.kinds]


def fixed_point_report(exp: Experiment) -> dict:
    """Global minimizer, uncorrected and corrected fixed points, the small-lr limit, and their gaps."""
    preconds = _fixed_preconds(exp)
    fam = exp.problem
    lrs = [k.lr for k in exp.kinds]
    steps = [k.local_steps for k in exp.kinds]
    x_star = global_min(fam)
    report = {"type": "fixed_point", "x_star": _vec(x_star)}
    try:
        fp = fixed_point_closed_form(fam, lrs, steps, preconds)
        report["fixed_point"] = _vec(fp)
        report["gap_fixed_point"] = float(np.linalg.norm(fp - x_star))
    except NotContractiveError as err:
        report["fixed_point"] = None
        report["gap_fixed_point"] = None
        report["spectral_norm"] = err.norm
    corrected = fixed_point_closed_form(fam, lrs, steps, preconds, corrected=True)
    report["corrected_fixed_point"] = _vec(corrected)
    report["gap_corrected"] = float(np.linalg.norm(corrected - x_star))
    # lr_i plays the role of the per-client lr ratio; the limit is scale free
    limit = limiting_fixed_point(fam, lrs, steps, preconds)
    report["limiting_fixed_point"] = _vec(limit)
    report["gap_limit"] = float(np.linalg.norm(limit - x_star))
    return report


# ---------------------------------------------------------------- landscape


def parse_grid(spec: str, dim: int) -> list[np.ndarray]:
    """``"lo:hi:n[,lo:hi:n...]"`` with one axis per dimension, as a row-major point list."""
    axes = []
    for part in spec.split(","):
        try:
            lo, hi, n = part.split(":")
            axis = np.linspace(float(lo), float(hi), int(n))
        except ValueError as err:
            raise CliError(f"bad grid axis {part!r}; expected lo:hi:n") from err
        if axis.size < 1:
            raise CliError(f"grid axis {part!r} has no points")
        axes.append(axis)
    if len(axes) != dim:
        raise CliError(f"grid has {len(axes)} axes but the problem has dimension {dim}")
    mesh = np.meshgrid(*axes, indexing="ij")
    return list(np.stack([m.ravel() for m in mesh], axis=1))


def landscape(exp: Experiment, grid, trials: int = 1, seed: int = 0):
    return residual_landscape(make_round_operator(exp), grid, trials=trials, rng=np.random.default_rng(seed))


# ---------------------------------------------------------------- validate


def _probe_points(exp: Experiment, offset: float):
    x = exp.x0
    y = x + offset * np.ones_like(x) / np.sqrt(x.size)
    return x, y


def _isotropic_curvature(fam, i) -> float | None:
    h = fam.H[i]
    mu = float(h[0, 0])
    return mu if np.array_equal(h, mu * np.eye(fam.dim)) else None


def contraction_reports(exp: Experiment, trials: int, seed: int, offset: float = 1.0) -> list[dict]:
    x, y = _probe_points(exp, offset)
    rng = np.random.default_rng(seed)
    out = []
    for i, kind in enumerate(exp.kinds):
        closed = None
        if kind.name == "sgd" and isinstance(exp.problem, QuadraticFamily):
            mu = _isotropic_curvature(exp.problem, i)
            if mu is not None and 0 < kind.lr * mu < 1:
                closed = sgd_h(kind.lr, mu, kind.local_steps)
        rep = estimate_h(kind, exp.problem, i, kind.local_steps, x, y, trials, rng, exp.noise, closed_form=closed)
        out.append({"client": i, **rep.to_dict()})
    return out


def variance_reports(exp: Experiment, trials: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    return [
        {"client": i, **estimate_q(kind, exp.problem, i, kind.local_steps, exp.x0, exp.noise, trials, rng).to_dict()}
        for i, kind in enumerate(exp.kinds)
    ]


def bound_report(exp: Experiment, trials: int, seed: int, offset: float = 1.0) -> dict:
    """Evaluate the explicit error bound and compare it with the simulated final error.

    Contraction constants are estimated at the config's ``x0``, variance
    factors use the SGD closed form, and the measured error averages
    ``||x_T - x_fixed||^2`` over ``trials`` seeds starting at the config seed.
    """
    fixed = expected_fixed_point(exp, [k.lr for k in exp.kinds])
    if fixed is None:
        raise CliError("the bound needs a closed-form fixed point (quadratic, sgd/precond_gd clients)")
    h = [r["h_hat"] for r in contraction_reports(exp, 1 if exp.noise.deterministic else trials, seed, offset)]
    q = [sgd_q(k.lr, k.local_steps) for k in exp.kinds]
    var = gradient_variance(exp.problem, 0, exp.x0, exp.noise, trials, np.random.default_rng(seed))
    inputs = BoundInputs(
        h=h, q=q, w=[float(w) for w in exp.problem.w], sigma=float(np.sqrt(var)),
        x0_err=float(np.sum((exp.x0 - fixed) ** 2)), T=exp.config.rounds,
    )
    bound = error_bound(inputs)
    runs = 1 if exp.noise.deterministic else trials
    base = exp.config.model_copy(update={"compute_metrics": False})
    errs = [
        float(np.sum((run_experiment(base.model_copy(update={"seed": base.seed + r})).x_final - fixed) ** 2))
        for r in range(runs)
    ]
    measured = float(np.mean(errs))
    # squared float64 resolution at the fixed point; the bound decays below it
    floor = (16 * np.finfo(float).eps * (1.0 + float(np.linalg.norm(fixed)))) ** 2
    return {"type": "bound", "inputs": inputs.to_dict(), "bound": bound, "measured_error": measured,
            "roundoff_floor": floor, "server_lr_for_guarantee": horizon_server_lr(inputs),
            "satisfied": bool(measured <= bound + floor)}


# ---------------------------------------------------------------- commands


def _cmd_run(args) -> None:
    result = run_experiment(load_config(args.config))
    if args.out is None:
        dump_metrics(result.records, sys.stdout, args.format)
        return
    write_metrics(result.records, args.out, args.format)
    print(json.dumps({"rounds": len(result.records), "x_final": _vec(result.x_final), "metrics": args.out}))


def _cmd_fixed_point(args) -> None:
    print(json.dumps(fixed_point_report(prepare(load_config(args.config)))))


def _cmd_landscape(args) -> None:
    exp = prepare(load_config(args.config))
    points = landscape(exp, parse_grid(args.grid, exp.problem.dim), trials=args.trials, seed=args.seed)
    dim = exp.problem.dim
    with atomic_open(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(dim)] + ["residual"])
        for x, r in points:
            writer.writerow([format(float(v), ".17g") for v in x] + [format(r, ".17g")])


def _cmd_validate(args) -> None:
    exp = prepare(load_config(args.config))
    if args.what == "h":
        reports = contraction_reports(exp, args.trials, args.seed, args.offset)
    elif args.what == "q":
        reports = variance_reports(exp, args.trials, args.seed)
    else:
        reports = [bound_report(exp, args.trials, args.seed, args.offset)]
    for rep in reports:
        print(json.dumps(rep))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedcorrect", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run an experiment and write per-round metrics")
    p.add_argument("config")
    p.add_argument("--out", help="metrics file (default: stdout)")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("fixed-point", help="print x*, the fixed points and their gaps as JSON")
    p.add_argument("config")
    p.set_defaults(func=_cmd_fixed_point)

    p = sub.add_parser("landscape", help="residual norm of the round operator over a grid")
    p.add_argument("config")
    p.add_argument("--grid", required=True, help='one "lo:hi:n" axis per dimension, comma separated; write --grid=-1:1:5 when lo is negative')
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_landscape)

    p = sub.add_parser("validate", help="contraction, variance or bound reports as JSON lines")
    p.add_argument("config")
    p.add_argument("--what", choices=["h", "q", "bound"], required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--offset", type=float, default=1.0, help="distance between the two probe points for h")
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as err:
        _fail("ConfigError", str(err), code=2)
    except RoundError as err:
        _fail("RoundError", str(err), round=err.round_index)
    except (CliError, ValueError, ArithmeticError, OSError, np.linalg.LinAlgError) as err:
        _fail(type(err).__name__, str(err))
    return 0


if __name__ == "__main__":
    sys.exit(main())
