"""Command-line experiment runner.

Exit codes: 0 pass, 1 assertion failure, 2 config error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .bounds import coming_down_sweep, mc_tails, small_time_check
from .checks import BudgetExceeded, corrupt_first_pair, run_algebra_checks
from .config import config_hash, load_config, resolved
from .differentials import truncation_level
from .driver import BranchedLift, driver_csv_text, order_norms, sample_fbm
from .solver import NumericalAbort, SolveConfig, exact_ode, remainder_norm, solve

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------- output helpers


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(path: Path, payload: dict, cfg_data: dict, digest: str) -> None:
    body = {"config_hash": digest, "config": cfg_data, "version": __version__, **payload}
    write_atomic(path, json.dumps(body, indent=2, sort_keys=True, allow_nan=True) + "\n")


def csv_text(header: list[str], rows, digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash: {digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


# --------------------------------------------------------------------------- commands


def cmd_algebra_check(cfg, out: Path, digest: str, data: dict, args) -> int:
    hook = corrupt_first_pair if args.inject_fault else None
    results = run_algebra_checks(cfg.d, cfg.max_order, hook)
    for r in results:
        print(r.line())
    dump_json(out / "algebra_check.json",
              {"results": [asdict(r) for r in results], "passed": all(r.passed for r in results)}, data, digest)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_lift(cfg, out: Path, digest: str, data: dict, args) -> int:
    path = cfg.driver.build()
    N = truncation_level(cfg.alpha)
    lift = BranchedLift(path, N)
    grid = np.linspace(0, 1, 2 ** cfg.norm_level + 1)
    norms = order_norms(lift, cfg.alpha, grid)
    payload = {
        "increments": lift.diagnostics(cfg.intervals),
        "order_norms": {f.encode(): asdict(e) for f, e in norms.items()},
    }
    dump_json(out / "lift.json", payload, data, digest)
    write_atomic(out / "driver.csv", driver_csv_text(path, f"config_hash: {digest}"))
    for f, e in norms.items():
        print(f"[X:{f.encode()}] = {e.value:.6g} at ({e.s:.4g}, {e.t:.4g})")
    return EXIT_OK


def cmd_solve(cfg, out: Path, digest: str, data: dict, args) -> int:
    path = cfg.driver.build()
    sc = SolveConfig(alpha=cfg.alpha, m=cfg.m, y0=cfg.y0, steps=cfg.steps, drift=cfg.drift, splitting=cfg.splitting)
    N = sc.N
    model = cfg.sigma.build(N)
    lift = BranchedLift(path, N)
    P = solve(sc, lift, model)
    times = P.times
    ode = np.stack([exact_ode(np.asarray(cfg.y0, dtype=float), float(t), cfg.m) for t in times])
    k = model.k
    header = ["t"] + [f"y{j + 1}" for j in range(k)] + [f"ode{j + 1}" for j in range(k)]
    rows = [[t, *P.Y[i], *ode[i]] for i, t in enumerate(times)]
    write_atomic(out / "solution.csv", csv_text(header, rows, digest))
    snap_idx = np.unique(np.linspace(0, len(times) - 1, cfg.snapshots).round().astype(int))
    snapshots = {repr(float(times[i])): {f.encode(): [float(x) for x in v[i]] for f, v in P.coeffs.items()}
                 for i in snap_idx}
    stride = max(1, cfg.steps // 2 ** cfg.norm_level)
    idx = np.arange(0, cfg.steps + 1, stride)
    table = lift.pair_table(times[idx])
    rem = {}
    for f in P.coeffs:
        r = remainder_norm(P, f, idx, cfg.alpha, lift, table)
        rem[f.encode()] = asdict(r)
    dump_json(out / "solution.json", {"snapshots": snapshots, "remainder_norms": rem, "N": N}, data, digest)
    print(f"Y(1) = {P.Y[-1].tolist()}  (N = {N}, steps = {cfg.steps})")
    for name, r in rem.items():
        print(f"[Y:{name}] = {r['norm']:.6g} (exponent {r['exponent']:.3g})")
    return EXIT_OK


def cmd_bounds(cfg, out: Path, digest: str, data: dict, args) -> int:
    N = truncation_level(cfg.alpha)
    model = cfg.sigma.build(N)
    lift = BranchedLift(cfg.driver.build(), N)
    rep = coming_down_sweep(cfg.y0s, cfg.ts, lift, model, cfg.m, cfg.alpha, cfg.steps, cfg.mode,
                            cfg.gamma, cfg.spread_limit, probe_t=cfg.probe_t)
    probe = rep.ratio_at[str(cfg.probe_t)]
    passed = rep.passed and probe < cfg.probe_limit
    payload = rep.to_dict()
    payload["passed"] = passed
    dump_json(out / "bounds.json", payload, data, digest)
    rows = [[r.y0, r.t, r.value, r.rhs, r.fitted] for r in rep.runs]
    write_atomic(out / "bounds.csv", csv_text(["y0", "t", "abs_Y", "rhs", "fitted_C"], rows, digest))
    print(f"fitted C spread = {rep.spread:.4g} (limit {cfg.spread_limit}); "
          f"corollary spread = {rep.corollary_spread:.4g}; "
          f"|Y({cfg.probe_t})| max/min over y0 = {probe:.6g} (limit {cfg.probe_limit})")
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_small_time(cfg, out: Path, digest: str, data: dict, args) -> int:
    N = truncation_level(cfg.alpha)
    seeds = [args.seed + i for i in range(cfg.drivers)] if args.seed is not None else list(range(cfg.drivers))
    lifts = [BranchedLift(sample_fbm(cfg.H, cfg.n, s), N) for s in seeds]
    specs = {"bounded": cfg.bounded_sigma, "polynomial": cfg.polynomial_sigma}
    models = {mode: specs[mode].build(N) for mode in cfg.modes}

    def one(lift):
        return small_time_check(cfg.y0s, [lift], models, cfg.m, cfg.alpha, cfg.eps1, cfg.eps2, cfg.gamma, cfg.steps)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as ex:
        parts = list(ex.map(one, lifts))
    runs = []
    for di, part in enumerate(parts):
        for r in part:
            r.driver = di
            runs.append(r)
    violations = sum(r.violated for r in runs)
    dump_json(out / "small_time.json", {"runs": [asdict(r) for r in runs], "violations": violations,
                                        "seeds": seeds}, data, digest)
    rows = [[r.driver, r.mode, r.y0, r.T1, r.T2, r.max_bracket, r.bound, int(r.violated)] for r in runs]
    write_atomic(out / "small_time.csv",
                 csv_text(["driver", "mode", "y0", "T1", "T2", "max_bracket_Y", "bound", "violated"], rows, digest))
    print(f"{len(runs)} runs, {violations} violations, min relative margin "
          f"{min(r.margin / r.bound for r in runs):.4g}")
    return EXIT_OK if violations == 0 else EXIT_FAIL


def cmd_mc(cfg, out: Path, digest: str, data: dict, args) -> int:
    N = truncation_level(cfg.alpha)
    model = cfg.sigma.build(N)
    base = args.seed if args.seed is not None else 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = mc_tails(cfg.H, cfg.m, model, range(base, base + cfg.seeds), cfg.alpha, cfg.n, cfg.steps,
                       cfg.y0, tuple(cfg.window))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    payload = asdict(rep)
    payload.pop("x")
    payload.pop("survival")
    payload["warnings"] = [str(w.message) for w in caught]
    dump_json(out / "tails.json", payload, data, digest)
    write_atomic(out / "survival.csv", csv_text(["x", "survival"], zip(rep.x, rep.survival), digest))
    print(f"{rep.seeds} seeds, {rep.failures} failures; 99.9% quantile {rep.quantiles['0.999']:.4g}; "
          f"theta {rep.theta:.3g}; survival monotone: {rep.monotone}")
    return EXIT_OK


COMMANDS = {
    "algebra-check": cmd_algebra_check,
    "lift": cmd_lift,
    "solve": cmd_solve,
    "bounds": cmd_bounds,
    "small-time": cmd_small_time,
    "mc-tails": cmd_mc,
}


def u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (schema_version 1)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=u64, default=None, help="seed override for random drivers")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent runs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override a config entry, e.g. --set m=2 or --set sigma.kind='\"zero\"'")

    parser = argparse.ArgumentParser(prog="branched-rde", description="Branched rough-path RDE toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    alg = sub.add_parser("algebra-check", parents=[common], help="exhaustive forest-algebra identities")
    alg.add_argument("--max-order", type=int, default=None)
    alg.add_argument("--d", type=int, default=None)
    alg.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    sub.add_parser("lift", parents=[common], help="build a branched lift and its order norms")
    sub.add_parser("solve", parents=[common], help="solve the damped RDE")
    sub.add_parser("bounds", parents=[common], help="coming-down-from-infinity sweep")
    sub.add_parser("small-time", parents=[common], help="small-time growth check")
    sub.add_parser("mc-tails", parents=[common], help="Monte Carlo tail experiment")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    if args.command == "algebra-check":
        if args.max_order is not None:
            out["max_order"] = args.max_order
        if args.d is not None:
            out["d"] = args.d
    if args.seed is not None and args.command in ("lift", "solve", "bounds"):
        out["driver.seed"] = args.seed
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, _overrides(args))
    except (ValidationError, ValueError, FileNotFoundError, ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    data = resolved(cfg)
    digest = config_hash(data)
    out = Path(args.out)
    try:
        return COMMANDS[args.command](cfg, out, digest, data, args)
    except BudgetExceeded as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
