"""A priori bounds for the damped RDE, evaluated against solved paths.

Every inequality is one-sided with an unknown constant, so each check reports a
fitted constant ``measured / right-hand side`` and judges its spread across the
axis the bound claims uniformity over.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .differentials import SigmaModel, bracket, truncation_level, upsilon_all
from .driver import BranchedLift, order_norms, sample_fbm
from .forests import Forest, Tree, as_forest, boundary_set, enumerate_trees, forests_from_trees
from .solver import (
    NumericalAbort,
    SolveConfig,
    TreePath,
    e_table,
    exact_ode,
    march,
    rough_integral_path,
    solve,
    solve_batch,
    u_quantities,
)

MODES = ("bounded", "polynomial")


def eps1_default(m: float) -> float:
    return 0.5 * 3.0 ** (-m)


def check_gamma(gamma: float, m: float, alpha: float) -> None:
    if not 1 <= gamma < (m - 1) * alpha + 1:
        raise ValueError(f"gamma = {gamma} violates 1 <= gamma < (m - 1) alpha + 1 = {(m - 1) * alpha + 1}")


def _orders_values(norms) -> list[tuple[int, float]]:
    out = []
    for h, v in dict(norms).items():
        order = h.order if isinstance(h, (Tree, Forest)) else int(h)
        out.append((order, float(getattr(v, "value", v))))
    return out


def _norm_term(norms, exponent_unit: float) -> float:
    """``max_h [X:h]^{1 / (exponent_unit |h|)}``, zero norms contribute nothing."""
    best = 0.0
    for order, v in _orders_values(norms):
        if v > 0:
            best = max(best, v ** (1.0 / (exponent_unit * order)))
    return best


def _unit(m: float, alpha: float, gamma: float | None, mode: str, corollary: bool) -> float:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "polynomial":
        if gamma is None:
            raise ValueError("polynomial mode needs gamma")
        check_gamma(gamma, m, alpha)
        return (m - 1) * alpha - gamma + 1
    return (m - 1) * alpha if corollary else m * alpha


def theorem_rhs(t: float, norms, m: float, alpha: float, gamma: float | None = None, mode: str = "bounded") -> float:
    """``max{t^{-1/(m-1)}, max_h [X:h]^{1/(e |h|)}}`` with ``e = m alpha`` (bounded) or ``(m-1) alpha - gamma + 1``."""
    if not 0 < t <= 1:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    return max(t ** (-1.0 / (m - 1)), _norm_term(norms, _unit(m, alpha, gamma, mode, False)))


def corollary_rhs(t: float, y0_norm: float, norms, m: float, alpha: float,
                  gamma: float | None = None, mode: str = "bounded") -> float:
    """``max{min{t^{-1/(m-1)}, |y0|}, max_h [X:h]^{1/(e |h|)}, 1}``, valid at ``t = 0`` too."""
    first = y0_norm if t == 0 else min(t ** (-1.0 / (m - 1)), y0_norm)
    return max(first, _norm_term(norms, _unit(m, alpha, gamma, mode, True)), 1.0)


def small_time_horizons(y0, norms, m: float, alpha: float, gamma: float | None = None,
                        eps1: float | None = None, eps2: float = 0.1, mode: str = "bounded") -> tuple[float, float]:
    """``T1 = eps1 / <y0>^{m-1}`` and ``T2 = eps2 min_h [X:h]^{-1/(|h| alpha)}`` (times ``<y0>^{-(gamma-1)/alpha}`` if polynomial).

    Zero norms make ``T2`` infinite; both horizons are capped at 1.
    """
    eps1 = eps1_default(m) if eps1 is None else eps1
    if eps1 <= 0 or eps2 <= 0:
        raise ValueError("eps1 and eps2 must be positive")
    jb = float(bracket(np.atleast_1d(np.asarray(y0, dtype=float))))
    T1 = eps1 / jb ** (m - 1)
    inv = [v ** (-1.0 / (order * alpha)) for order, v in _orders_values(norms) if v > 0]
    T2 = eps2 * min(inv) if inv else math.inf
    if mode == "polynomial":
        if gamma is None:
            raise ValueError("polynomial mode needs gamma")
        check_gamma(gamma, m, alpha)
        T2 *= (1.0 / jb) ** ((gamma - 1) / alpha)
    elif mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return min(T1, 1.0), min(T2, 1.0)


def ode_window_constant(m: float) -> float:
    """Smallest ``C`` with ``C^{-1} <= |ODE(t)| / min{|y0|, t^{-1/(m-1)}} <= C`` for all ``y0, t``."""
    return max(m ** (1 / (m - 1)), (1 / min(1.0, m - 1)) ** (1 / (m - 1)))


def ode_window_ratios(m: float, y0s, ts) -> np.ndarray:
    y0s = np.asarray(y0s, dtype=float)
    out = np.empty((len(y0s), len(ts)))
    for i, y0 in enumerate(y0s):
        for j, t in enumerate(ts):
            val = abs(float(exact_ode(np.array([y0]), t, m)[0]))
            out[i, j] = val / min(abs(y0), t ** (-1 / (m - 1)))
    return out


# --------------------------------------------------------------------------- Hoelder seminorms


def windowed_holder(V: np.ndarray, times: np.ndarray, alpha: float, width: float, hi: int, lo: int = 0) -> float:
    """``sup |V(s2) - V(s1)| / |s2 - s1|^alpha`` over grid pairs in ``[t_lo, t_hi]`` with ``s2 - s1 <= width``."""
    best = 0.0
    tol = 1e-12 * max(1.0, width)
    for k in range(1, hi - lo + 1):
        i = np.arange(lo, hi - k + 1)
        gap = times[i + k] - times[i]
        ok = gap <= width + tol
        if not ok.any():
            break
        r = np.linalg.norm(V[i + k] - V[i], axis=-1)[ok] / gap[ok] ** alpha
        best = max(best, float(r.max()))
    return best


def holder(V: np.ndarray, times: np.ndarray, alpha: float, lo: int, hi: int) -> float:
    return windowed_holder(V, times, alpha, times[hi] - times[lo], hi, lo)


@dataclass
class MWReport:
    value: float
    terms: list[float]
    dominant: int


def mw_rhs(Y: np.ndarray, Z: np.ndarray, times: np.ndarray, j: int, L: float, m: float, alpha: float) -> MWReport:
    """Four-term maximum bounding ``|Y(t_j)|`` through windowed Hoelder seminorms of width ``L``."""
    t = float(times[j])
    if not 0 < L < t:
        raise ValueError(f"need 0 < L < t, got L = {L}, t = {t}")
    Y = np.asarray(Y, dtype=float).reshape(len(times), -1)
    Z = np.asarray(Z, dtype=float).reshape(len(times), -1)
    supZ = windowed_holder(Z, times, alpha, L, j)
    supY = windowed_holder(Y, times, alpha, L, j)
    lo = int(np.searchsorted(times, t - L - 1e-12))
    lastY = holder(Y, times, alpha, lo, j)
    ynorm = float(np.max(np.linalg.norm(Y[: j + 1], axis=-1)))
    terms = [
        (t - L) ** (-1 / (m - 1)),
        (supZ * L ** (alpha - 1)) ** (1 / m),
        (L ** alpha * ynorm ** (m - 1) * supY) ** (1 / m),
        L ** alpha * lastY,
    ]
    k = int(np.argmax(terms))
    return MWReport(float(terms[k]), [float(x) for x in terms], k)


# --------------------------------------------------------------------------- interior regularity


@dataclass
class InteriorReport:
    lhs: float
    rhs: float
    condition: bool
    condition_max: float
    interval: tuple[float, float]
    blocks: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else math.inf


def interior_rhs(Y: TreePath, lo: int, hi: int, lift: BranchedLift, model: SigmaModel, m: float, alpha: float,
                 Z: np.ndarray | None = None, norms: dict | None = None, norm_grid=None,
                 eps: float = 1.0, stride: int = 1) -> InteriorReport:
    """Both sides of the truncated interior estimate on ``I = [t_lo, t_hi]``.

    ``norms`` maps forests to ``[X:f]`` (computed on ``norm_grid`` when absent).
    The smallness condition uses ``eps`` as the threshold.
    """
    N = Y.N
    times = Y.times
    Lg = float(times[hi] - times[lo])
    if Z is None:
        Z = rough_integral_path(Y, model, lift)
    lhs = Lg ** alpha * holder(Z, times, alpha, lo, hi)
    lower = enumerate_trees(model.d, N - 1) if N > 1 else ()
    F = forests_from_trees(lower, N - 1)
    bars = {f: boundary_set(forests_from_trees(lower, N - f.order - 1), lower) for f in F}
    needed = set(Forest((h,)) for h in enumerate_trees(model.d, N))
    for s in bars.values():
        needed |= s
    if norms is None:
        grid = np.linspace(0, 1, 257) if norm_grid is None else norm_grid
        norms = {f: e.value for f, e in order_norms(lift, alpha, grid, sorted(needed)).items()}
    nv = {as_forest(f): float(getattr(v, "value", v)) for f, v in norms.items()}
    idx = np.arange(lo, hi + 1, stride)
    if idx[-1] != hi:
        idx = np.append(idx, hi)
    table = lift.pair_table(times[idx])
    etab = e_table(Y, idx, lift, model, table)
    ynorm = float(np.max(np.linalg.norm(Y.Y[lo:hi + 1], axis=-1)))
    first = second = third = 0.0
    cond = 0.0
    for f in F:
        for mu in range(1, model.d + 1):
            xf = nv[Forest((Tree(mu, f.trees),))]
            U = u_quantities(f, None, mu, Y, idx, lift, model, table, etab)
            cond = max(cond, Lg ** ((f.order + 1) * alpha) * xf * U)
            first += xf * Lg ** ((f.order + 1) * alpha + 1) * U * ynorm ** m
            best = 0.0
            for fb in bars[f]:
                Ub = u_quantities(f, fb, mu, Y, idx, lift, model, table, etab)
                best = max(best, Lg ** ((fb.order + f.order + 1) * alpha) * Ub * nv[fb])
            second += xf * best
    trees = enumerate_trees(model.d, N)
    ups = upsilon_all(model, trees, Y.Y[lo:hi + 1])
    for h in trees:
        third += Lg ** (h.order * alpha) * nv[Forest((h,))] * float(np.max(np.linalg.norm(ups[h], axis=-1)))
    rhs = first + second + third
    return InteriorReport(lhs, rhs, cond <= eps, cond, (float(times[lo]), float(times[hi])),
                          {"drift_block": first, "boundary_block": second, "tree_block": third})


# --------------------------------------------------------------------------- sweeps


@dataclass
class BoundRun:
    y0: float
    t: float
    value: float
    rhs: float
    fitted: float


@dataclass
class BoundReport:
    experiment: str
    mode: str
    m: float
    alpha: float
    N: int
    norms: dict
    runs: list[BoundRun]
    spread: float
    ratio_at: dict
    passed: bool
    spread_limit: float
    corollary_runs: list[BoundRun] = field(default_factory=list)
    corollary_spread: float = math.nan
    corollary_ratio: float = math.nan
    monotone_in_y0: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def tree_norms(lift: BranchedLift, alpha: float, N: int, grid) -> dict:
    """``[X:h]`` for trees of order ``<= N`` with attaining pairs."""
    return order_norms(lift, alpha, grid, [Forest((h,)) for h in enumerate_trees(lift.d, N)])


def coming_down_sweep(y0s, ts, lift: BranchedLift, model: SigmaModel, m: float, alpha: float,
                      steps: int = 1024, mode: str = "bounded", gamma: float | None = None,
                      spread_limit: float = 4.0, norm_grid=None, probe_t: float = 0.5) -> BoundReport:
    """Solve from each ``y0`` and fit ``|Y(t)| / theorem_rhs(t)`` over the ``(y0, t)`` grid."""
    y0s = [float(v) for v in y0s]
    if max(y0s) / min(y0s) < 1e4:
        raise ValueError("the y0 list should span at least four decades")
    cfg = SolveConfig(alpha=alpha, m=m, y0=0.0, steps=steps)
    N = cfg.N
    grid = np.linspace(0, 1, 257) if norm_grid is None else norm_grid
    norms = tree_norms(lift, alpha, N, grid)
    direction = np.ones(model.k) / math.sqrt(model.k)
    Ys = solve_batch(cfg, lift, model, [y * direction for y in y0s])
    times = cfg.times
    runs = []
    for b, y0 in enumerate(y0s):
        for t in ts:
            j = int(round(t * steps))
            val = float(np.linalg.norm(Ys[b, j]))
            rhs = theorem_rhs(float(times[j]), norms, m, alpha, gamma, mode)
            runs.append(BoundRun(y0, float(times[j]), val, rhs, val / rhs))
    fitted = [r.fitted for r in runs]
    spread = max(fitted) / min(fitted)
    # corollary shape, including t = 0
    cor = []
    for b, y0 in enumerate(y0s):
        for t in [0.0] + list(ts):
            j = int(round(t * steps))
            val = float(np.linalg.norm(Ys[b, j]))
            rhs = corollary_rhs(float(times[j]), y0, norms, m, alpha, gamma, mode)
            cor.append(BoundRun(y0, float(times[j]), val, rhs, val / rhs))
    cfit = [r.fitted for r in cor]
    order = np.argsort(y0s)
    monotone = all(
        bool(np.all(np.diff(np.linalg.norm(Ys[order, int(round(t * steps))], axis=-1)) >= -1e-12))
        for t in ts)
    jp = int(round(probe_t * steps))
    probe = [float(np.linalg.norm(Ys[b, jp])) for b in range(len(y0s))]
    ratio = max(probe) / min(probe)
    return BoundReport("coming_down", mode, m, alpha, N,
                       {f.encode(): {"value": e.value, "s": e.s, "t": e.t} for f, e in norms.items()},
                       runs, spread, {str(probe_t): ratio}, spread < spread_limit, spread_limit,
                       cor, max(cfit) / min(cfit), max(cfit) / max(fitted), monotone)


@dataclass
class SmallTimeRun:
    y0: float
    mode: str
    driver: int
    T1: float
    T2: float
    horizon: float
    max_bracket: float
    bound: float
    margin: float
    violated: bool


def small_time_check(y0s, lifts, models: dict, m: float, alpha: float, eps1: float | None = None,
                     eps2: float = 0.1, gamma: float | None = None, steps: int = 256, norm_grid=None) -> list[SmallTimeRun]:
    """For each driver, mode and ``y0``: solve on ``[0, min(T1, T2)]`` and test ``<Y(t)> <= 2 <y0>``."""
    out = []
    N = truncation_level(alpha)
    grid = np.linspace(0, 1, 257) if norm_grid is None else norm_grid
    for di, lift in enumerate(lifts):
        norms = tree_norms(lift, alpha, N, grid)
        for mode, model in models.items():
            direction = np.ones(model.k) / math.sqrt(model.k)
            for y0 in y0s:
                T1, T2 = small_time_horizons(y0 * direction, norms, m, alpha, gamma, eps1, eps2, mode)
                T = min(T1, T2)
                cfg = SolveConfig(alpha=alpha, m=m, y0=list(y0 * direction), steps=steps, horizon=T)
                P = solve(cfg, lift, model)
                jb = float(np.max(bracket(P.Y)))
                bound = 2 * float(bracket(y0 * direction))
                out.append(SmallTimeRun(float(y0), mode, di, T1, T2, T, jb, bound, bound - jb, jb > bound))
    return out


# --------------------------------------------------------------------------- Monte Carlo tails


@dataclass
class TailReport:
    seeds: int
    failures: int
    failed_seeds: list[int]
    samples: list[float]
    x: list[float]
    survival: list[float]
    quantiles: dict
    theta: float
    concave_fraction: float
    monotone: bool


def _survival(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.sort(samples)
    n = len(x)
    return x, 1.0 - np.arange(1, n + 1) / n + 0.0


def mc_tails(H: float, m: float, model: SigmaModel, seeds, alpha: float, n: int = 256, steps: int = 256,
             y0=0.0, window=(0.5, 1.0), batch: int = 100) -> TailReport:
    """Empirical survival function of ``sup_{t in window} |Y(t)|`` over fBM drivers.

    Per-seed aborts are logged and excluded. The diagnostic fits
    ``log(-log S(x)) ~ theta log x`` on the upper half of the sample.
    """
    seeds = list(seeds)
    if len(seeds) < 1000:
        warnings.warn(f"{len(seeds)} seeds is statistically meaningless for tail estimates (use >= 1000)")
    if H <= 0.25:
        raise ValueError("H must exceed 1/4")
    cfg = SolveConfig(alpha=alpha, m=m, y0=0.0, steps=steps)
    N = cfg.N
    times = cfg.times
    lo, hi = int(np.searchsorted(times, window[0] - 1e-12)), int(np.searchsorted(times, window[1] + 1e-12)) - 1
    y0v = np.broadcast_to(np.asarray(y0, dtype=float), (model.k,))
    values: dict[int, float] = {}
    failed: list[int] = []
    for start in range(0, len(seeds), batch):
        chunk = seeds[start:start + batch]
        incs = []
        for sd in chunk:
            lift = BranchedLift(sample_fbm(H, n, sd, d=model.d), N)
            incs.append(lift.consecutive(times))
        inc = np.stack(incs)
        try:
            Ys = march(model, np.tile(y0v, (len(chunk), 1)), inc, np.diff(times), m, N)
            for sd, Yb in zip(chunk, Ys):
                values[sd] = float(np.max(np.linalg.norm(Yb[lo:hi + 1], axis=-1)))
        except NumericalAbort:
            for sd, one in zip(chunk, inc):
                try:
                    Yb = march(model, y0v[None], one[None], np.diff(times), m, N)[0]
                    values[sd] = float(np.max(np.linalg.norm(Yb[lo:hi + 1], axis=-1)))
                except NumericalAbort:
                    failed.append(sd)
    samples = np.array([values[s] for s in seeds if s in values])
    x, surv = _survival(samples)
    q = {str(p): float(np.quantile(samples, p)) for p in (0.5, 0.9, 0.99, 0.999)}
    keep = (surv > 0) & (surv < 1) & (x > np.median(x)) & (x > 0)
    theta = float("nan")
    if keep.sum() >= 3:
        theta = float(np.polyfit(np.log(x[keep]), np.log(-np.log(surv[keep])), 1)[0])
    # concavity of log S against log x on the tail
    conc = float("nan")
    if keep.sum() >= 5:
        lx, ls = np.log(x[keep]), np.log(surv[keep])
        slopes = np.diff(ls) / np.where(np.diff(lx) > 0, np.diff(lx), np.nan)
        slopes = slopes[np.isfinite(slopes)]
        if len(slopes) > 1:
            conc = float(np.mean(np.diff(slopes) <= 1e-12))
    monotone = bool(np.all(np.diff(surv) <= 0))
    return TailReport(len(seeds), len(failed), failed, [float(v) for v in samples], [float(v) for v in x],
                      [float(v) for v in surv], q, theta, conc, monotone)
