"""Command-line entry point ``pam``."""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import limits
from .errors import PamError
from .experiments import ExperimentConfig, run_experiment
from .field import PotentialField, sample_field, save_field
from .poisson import ageing_survival_mc, default_y_min, sample_limit_process
from .scales import (
    DEFAULT_EPSILON, ageing_time_certified, default_radius, locate_certified, rescale_points, smallest_radius,
    window_coverage_defect,
)
from .solver import feynman_kac_mc, principal_eigen, solve_pde


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _csv_out(path):
    return open(path, "w", newline="") if path and path != "-" else sys.stdout


def cmd_field(args):
    fld = sample_field(args.d, args.radius, args.gamma, args.seed)
    save_field(fld, args.out)
    _print_json({"out": args.out, "d": args.d, "radius": args.radius, "gamma": args.gamma, "seed": args.seed,
                 "max": fld.max_value()})


def cmd_locate(args):
    best, _ = locate_certified(args.d, args.gamma, args.seed, args.t, args.c, args.epsilon, radius=args.radius)
    _print_json(best.to_dict())


def cmd_points(args):
    r = smallest_radius(lambda r: window_coverage_defect(args.d, args.gamma, r, args.t, args.tau, args.alpha),
                        default_radius(args.d, args.gamma, args.t), args.epsilon)
    x, y = rescale_points(PotentialField.lazy(args.d, r, args.gamma, args.seed), args.t, args.tau, args.alpha)
    fh = _csv_out(args.out)
    writer = csv.writer(fh)
    writer.writerow([f"x_{k + 1}" for k in range(args.d)] + ["y"])
    for xi, yi in zip(x, y):
        writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
    if fh is not sys.stdout:
        fh.close()
        _print_json({"points": int(len(y)), "radius": r, "out": args.out})


def cmd_ageing_time(args):
    T, r = ageing_time_certified(args.d, args.gamma, args.seed, args.t, args.horizon, args.c, args.epsilon)
    censored = not np.isfinite(T)
    _print_json({"T": None if censored else T, "T_over_t": None if censored else T / args.t,
                 "censored": censored, "radius": r})


def cmd_solve(args):
    fld = PotentialField.lazy(args.d, args.radius, args.gamma, args.seed)
    t_grid = _floats(args.t_grid)
    res = solve_pde(fld, args.radius, t_grid, rel_tol=args.rel_tol, method=args.method, far_tol=args.far_tol)
    writer = csv.writer(sys.stdout)
    writer.writerow(["t", "logU", "argmax"])
    for t, lu, z in zip(res.times, res.log_total_mass, res.argmax_site):
        writer.writerow([repr(float(t)), repr(float(lu)), " ".join(map(str, z))])
    if args.emit_profile:
        coords = np.indices(res.profile.shape[1:]).reshape(args.d, -1).T - args.radius
        with open(args.emit_profile, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"z_{k + 1}" for k in range(args.d)] + ["mass"])
            for k, t in enumerate(res.times):
                for z, m in zip(coords, res.profile[k].reshape(-1)):
                    w.writerow([repr(float(t))] + [int(c) for c in z] + [repr(float(m))])


def cmd_fk(args):
    fld = PotentialField.lazy(args.d, args.radius, args.gamma, args.seed)
    res = feynman_kac_mc(fld, args.radius, args.t, args.paths, args.mc_seed)
    _print_json({"total": res.total, "total_se": res.total_se, "n_paths": res.n_paths})


def cmd_eigen(args):
    res = principal_eigen(PotentialField.lazy(args.d, args.radius, args.gamma, args.seed), args.radius, args.tol)
    _print_json({"lambda1": res.lambda1, "lambda2": res.lambda2, "gap": res.gap,
                 "potential_gap": res.potential_gap, "residual": res.residual, "z1": list(res.z1)})


def _limit_value(args, params, vals):
    q, d = args.quantity, params.d
    if q == "p1":
        return limits.density_p1(np.array(vals[:d]), params)
    if q == "joint":
        return limits.density_joint(np.array(vals[:d]), vals[d], np.array(vals[d + 1:2 * d + 1]),
                                    vals[2 * d + 1], params)
    if q == "nu-tail":
        return limits.intensity_tail(vals[0], params)
    if q == "nu-dw":
        return limits.nu_Dw(vals[0], vals[1], vals[2], params)
    return limits.ageing_cdf(vals[0], params, quad_tol=args.tol)


ARITY = {"p1": lambda d: d, "joint": lambda d: 2 * d + 2, "nu-tail": lambda d: 1,
         "nu-dw": lambda d: 3, "ageing-cdf": lambda d: 1}


def cmd_limits(args):
    params = limits.LimitParams(args.gamma, args.d)
    if args.grid:
        if ARITY[args.quantity](args.d) != 1:
            raise PamError("--grid needs a one-argument quantity (nu-tail or ageing-cdf)")
        lo, hi, n = args.grid
        fh = _csv_out(args.out)
        writer = csv.writer(fh)
        writer.writerow(["arg", args.quantity])
        for v in np.linspace(lo, hi, int(n)):
            writer.writerow([repr(float(v)), repr(float(_limit_value(args, params, [v])))])
        if fh is not sys.stdout:
            fh.close()
        return
    need = ARITY[args.quantity](args.d)
    if len(args.values) != need:
        raise PamError(f"{args.quantity} takes {need} numbers for d={args.d}, got {len(args.values)}")
    print(repr(float(_limit_value(args, params, args.values))))


def cmd_limit_sim(args):
    params = limits.LimitParams(args.gamma, args.d)
    est, se, rate = ageing_survival_mc(params, args.w, args.samples, args.seed)
    _print_json({"estimate": est, "stderr": se, "certified_rate": rate,
                 "limit_survival": 1.0 - limits.ageing_cdf(args.w, params)})
    if args.points_csv:
        pts = sample_limit_process(params, default_y_min(params), seed=args.seed)
        with open(args.points_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{k + 1}" for k in range(args.d)] + ["y"])
            for xi, yi in zip(pts.x, pts.y):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    result = run_experiment(cfg, args.out)
    for c in result.checks:
        print(f"{'PASS' if c.verdict else 'FAIL'} {c.test} statistic={c.statistic:.6g}"
              + (f" p={c.p_value:.4g}" if c.p_value is not None else ""))
    return 0 if result.passed else 2


def _field_args(p, radius=True):
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    if radius:
        p.add_argument("--radius", type=int, required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pam", description="Quenched parabolic Anderson model toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("field", help="sample a seeded field and write a binary snapshot")
    _field_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("locate", help="certified top two maximisers of the concentration functional")
    _field_args(p, radius=False)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--radius", type=int, default=None, help="starting box radius")
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("points", help="rescaled points in the window y >= alpha|x| + tau, as CSV")
    _field_args(p, radius=False)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--tau", type=float, default=-1.0)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_points)

    p = sub.add_parser("ageing-time", help="time until the maximiser changes")
    _field_args(p, radius=False)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.set_defaults(func=cmd_ageing_time)

    p = sub.add_parser("solve", help="integrate the PDE on a box; CSV of t, logU")
    _field_args(p)
    p.add_argument("--t-grid", required=True, help="comma-separated output times")
    p.add_argument("--rel-tol", type=float, default=1e-8)
    p.add_argument("--method", choices=("rk", "etd"), default="rk")
    p.add_argument("--far-tol", type=float, default=None, help="relative tolerance on gauged far sites")
    p.add_argument("--emit-profile", default=None, help="CSV path for normalised profiles")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("fk", help="Feynman-Kac Monte Carlo estimate of U(t)")
    _field_args(p)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--mc-seed", type=int, default=0)
    p.set_defaults(func=cmd_fk)

    p = sub.add_parser("eigen", help="principal eigenpair of the Anderson operator on a box")
    _field_args(p)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_eigen)

    p = sub.add_parser("limits", help="evaluate limit-law quantities")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--grid", type=float, nargs=3, metavar=("LO", "HI", "N"), default=None)
    p.add_argument("--out", default="-")
    p.add_argument("quantity", choices=sorted(ARITY))
    p.add_argument("values", type=float, nargs="*")
    p.set_defaults(func=cmd_limits)

    p = sub.add_parser("limit-sim", help="Monte Carlo survival of the limit maximiser under stretching")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--w", type=float, required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points-csv", default=None)
    p.set_defaults(func=cmd_limit_sim)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except (PamError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
