"""Controlled paths, rough integration, and the coherent solver for
``dY = -|Y|^{m-1} Y dt + sigma(Y) dX``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .differentials import (
    SigmaModel,
    contract,
    truncation_level,
    upsilon_all,
    upsilon_derivative,
)
from .driver import BranchedLift
from .forests import (
    ONE,
    Forest,
    Tree,
    as_forest,
    coproduct,
    enumerate_trees,
    forests_from_trees,
    symmetry_factor,
)

OVERFLOW = 1e12
DEFAULT_MAX_N = 4


class NumericalAbort(RuntimeError):
    pass


@dataclass
class SolveConfig:
    alpha: float
    m: float
    y0: list[float] | float
    steps: int = 1024
    horizon: float = 1.0
    splitting: str = "strang"
    drift: bool = True
    max_N: int = DEFAULT_MAX_N

    def __post_init__(self):
        if not self.m > 1:
            raise ValueError(f"m must be > 1, got {self.m}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.splitting not in ("strang", "lie"):
            raise ValueError(f"unknown splitting {self.splitting!r}")
        if self.N > self.max_N:
            raise ValueError(f"alpha = {self.alpha} gives N = {self.N} > max_N = {self.max_N}")

    @property
    def N(self) -> int:
        return truncation_level(self.alpha)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


def drift_flow(y, tau: float, m: float) -> np.ndarray:
    """Exact flow of ``y' = -|y|^{m-1} y`` over time ``tau`` (batched over leading axes)."""
    if m <= 1:
        raise ValueError("m must be > 1")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    y = np.asarray(y, dtype=float)
    if tau == 0:
        return y.copy()
    r = np.linalg.norm(y, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", over="ignore"):
        new = ((m - 1) * tau + r ** (1 - m)) ** (-1 / (m - 1))
        scale = np.where(r > 0, new / np.where(r > 0, r, 1.0), 0.0)
    # the flow contracts; clip round-off above 1
    return y * np.minimum(scale, 1.0)


def exact_ode(y0, t, m: float) -> np.ndarray:
    """Closed-form solution with ``sigma = 0``."""
    return drift_flow(y0, t, m)


# --------------------------------------------------------------------------- paths


@dataclass
class ForestPath:
    """Per-time coefficients ``<f, U_t>`` in ``R^k``; each value has shape ``(n + 1, k)``."""

    times: np.ndarray
    coeffs: dict[Forest, np.ndarray]
    N: int

    def value(self, f) -> np.ndarray:
        f = as_forest(f)
        if f in self.coeffs:
            return self.coeffs[f]
        return np.zeros_like(self.coeffs[ONE])

    @property
    def k(self) -> int:
        return self.coeffs[ONE].shape[-1]


@dataclass
class TreePath(ForestPath):
    """A forest path supported on ``1`` and single trees of order ``<= N - 1``."""

    coherent: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def Y(self) -> np.ndarray:
        return self.coeffs[ONE]


def coherent_path(times, Y: np.ndarray, model: SigmaModel, N: int, **meta) -> TreePath:
    """Fill tree coefficients by coherence: ``<h, Y_t> = Upsilon[h](Y_t) / S(h)``."""
    Y = np.asarray(Y, dtype=float)
    trees = enumerate_trees(model.d, N - 1) if N > 1 else ()
    ups = upsilon_all(model, trees, Y)
    coeffs = {ONE: Y}
    for h in trees:
        coeffs[Forest((h,))] = ups[h] / symmetry_factor(h)
    return TreePath(np.asarray(times, dtype=float), coeffs, N, coherent=True, meta=dict(meta))


# --------------------------------------------------------------------------- solver


def _rough_step(model: SigmaModel, trees, weights, y, inc) -> np.ndarray:
    ups = upsilon_all(model, trees, y)
    out = y.copy()
    for i, h in enumerate(trees):
        out = out + ups[h] * (inc[..., i:i + 1] * weights[i])
    return out


def march(model: SigmaModel, y0, increments: np.ndarray, dt: np.ndarray, m: float,
          N: int, drift: bool = True, splitting: str = "strang") -> np.ndarray:
    """Advance a batch of states through the given tree increments.

    ``y0``: ``(B, k)``; ``increments``: ``(B or 1, steps, T)`` over ``enumerate_trees(d, N)``;
    returns ``(B, steps + 1, k)``.
    """
    trees = enumerate_trees(model.d, N)
    weights = np.array([1.0 / symmetry_factor(h) for h in trees])
    y = np.array(y0, dtype=float, ndmin=2)
    steps = increments.shape[1]
    out = np.empty((y.shape[0], steps + 1, y.shape[1]))
    out[:, 0] = y
    silent = model.is_zero
    for n in range(steps):
        tau = float(dt[n])
        if drift:
            y = drift_flow(y, tau / 2 if splitting == "strang" else tau, m)
        if not silent:
            y = _rough_step(model, trees, weights, y, increments[:, n])
        if drift and splitting == "strang":
            y = drift_flow(y, tau / 2, m)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > OVERFLOW:
            bad = np.max(np.abs(y)) if np.all(np.isfinite(y)) else float("nan")
            raise NumericalAbort(f"state left the admissible range at step {n + 1}/{steps} (max |Y| = {bad})")
        out[:, n + 1] = y
    return out


def _lift_increments(lift: BranchedLift, times: np.ndarray, N: int) -> np.ndarray:
    if lift.N < N:
        raise ValueError(f"lift carries trees up to order {lift.N}, solver needs {N}")
    full = lift.consecutive(times)
    idx = [lift.index[h] for h in enumerate_trees(lift.d, N)]
    return full[:, idx]


def solve(config: SolveConfig, lift: BranchedLift, model: SigmaModel) -> TreePath:
    """Strang splitting: exact drift half-steps around an order-N branched Euler step."""
    N = config.N
    if model.d != lift.d:
        raise ValueError(f"model has d = {model.d} but driver has d = {lift.d}")
    times = config.times
    inc = _lift_increments(lift, times, N)[None]
    y0 = np.broadcast_to(np.asarray(config.y0, dtype=float), (model.k,))
    Y = march(model, y0, inc, np.diff(times), config.m, N, config.drift, config.splitting)[0]
    return coherent_path(times, Y, model, N, alpha=config.alpha, m=config.m, drift=config.drift)


def solve_batch(config: SolveConfig, lift: BranchedLift, model: SigmaModel, y0s) -> np.ndarray:
    """Solve for several initial conditions on the same driver; returns ``(B, steps + 1, k)``."""
    times = config.times
    inc = _lift_increments(lift, times, config.N)[None]
    y0s = np.asarray(y0s, dtype=float).reshape(-1, model.k)
    return march(model, y0s, inc, np.diff(times), config.m, config.N, config.drift, config.splitting)


# --------------------------------------------------------------------------- composition and integration


def compose_function(dtensor, Y: TreePath) -> ForestPath:
    """``g(Y) = g(Y) 1 + P_{<= N-1} sum_p D^p g(Y)[dY, ..., dY] / p!``.

    ``dtensor(p, y)`` returns ``D^p g(y)``. The coefficient of a forest ``f`` is
    ``D^{#f} g[(<h, Y>)_{h in f}] / prod_h f_h!``.
    """
    Yv = Y.Y
    trees = [f.trees[0] for f in Y.coeffs if f != ONE]
    out = {ONE: dtensor(0, Yv)}
    for f in forests_from_trees(trees, Y.N - 1):
        if f == ONE:
            continue
        T = dtensor(len(f), Yv)
        val = contract(T, [Y.coeffs[Forest((h,))] for h in f.trees])
        denom = 1
        for c in f.counts.values():
            denom *= math.factorial(c)
        out[f] = val / denom
    return ForestPath(Y.times, out, Y.N)


def compose_sigma(model: SigmaModel, mu: int, Y: TreePath) -> ForestPath:
    return compose_function(lambda p, y: model.dtensor(p, mu, y), Y)


def xi(U: ForestPath, mu: int, i: int, t: float, lift: BranchedLift) -> np.ndarray:
    """``Xi_{s,t} = sum_f <f, U_s> <X_{s,t}, [f]_mu>`` with ``s = U.times[i]``."""
    s = float(U.times[i])
    inc = lift.increment_array(s, t)
    out = np.zeros(U.k)
    for f, c in U.coeffs.items():
        out = out + c[i] * inc[lift.index[Tree(mu, f.trees)]]
    return out


def _xi_many(U: ForestPath, mu: int, idx: np.ndarray, lift: BranchedLift) -> np.ndarray:
    """``Xi`` over consecutive pairs of the time indices ``idx``; shape ``(len(idx) - 1, k)``."""
    inc = lift.consecutive(U.times[idx])
    out = np.zeros((len(idx) - 1, U.k))
    for f, c in U.coeffs.items():
        out += c[idx[:-1]] * inc[:, lift.index[Tree(mu, f.trees)]][:, None]
    return out


@dataclass
class SewingResult:
    value: np.ndarray
    error: float
    diffs: list[float]
    order: float
    converged: bool


def decay_order(diffs, floor: float) -> float:
    """Negative log2-slope of successive differences, ignoring values at the roundoff floor."""
    d = np.asarray(diffs, dtype=float)
    lv = np.arange(len(d))
    keep = d > floor
    if keep.sum() < 2:
        return float("inf")
    slope = np.polyfit(lv[keep], np.log2(d[keep]), 1)[0]
    return float(-slope)


def sewing_integral(U: ForestPath, mu: int, i: int, j: int, lift: BranchedLift, levels: int | None = None) -> SewingResult:
    """Dyadic compensated Riemann sums of ``Xi`` over ``[t_i, t_j]`` using grid points of ``U``."""
    span = j - i
    if span <= 0:
        return SewingResult(np.zeros(U.k), 0.0, [], float("inf"), True)
    max_levels = (span & -span).bit_length() - 1
    L = max_levels if levels is None else min(levels, max_levels)
    sums = []
    for lev in range(L + 1):
        idx = np.linspace(i, j, 2 ** lev + 1).astype(int)
        sums.append(_xi_many(U, mu, idx, lift).sum(axis=0))
    diffs = [float(np.linalg.norm(sums[n + 1] - sums[n])) for n in range(L)]
    scale = max(1.0, float(np.linalg.norm(sums[-1])))
    floor = 1e-13 * scale
    order = decay_order(diffs, floor)
    # coarse levels may oscillate; require decay overall and over the last levels
    above = [x for x in diffs if x > floor]
    tail = above[-3:]
    converged = order > 0 and all(b < a for a, b in zip(tail, tail[1:]))
    return SewingResult(sums[-1], diffs[-1] if diffs else 0.0, diffs, order, converged)


def rough_integral_path(Y: TreePath, model: SigmaModel, lift: BranchedLift) -> np.ndarray:
    """``Z_t = sum_mu int_0^t sigma_mu(Y) dX^mu`` as compensated sums on the solver grid."""
    idx = np.arange(len(Y.times))
    inc = np.zeros((len(idx) - 1, Y.k))
    for mu in range(1, model.d + 1):
        inc += _xi_many(compose_sigma(model, mu, Y), mu, idx, lift)
    return np.vstack([np.zeros((1, Y.k)), np.cumsum(inc, axis=0)])


def integral_path(Y: TreePath, Z: np.ndarray) -> TreePath:
    """The tree path of ``Z``: same higher coefficients as ``Y`` with ``Z`` in the ``1`` slot."""
    coeffs = dict(Y.coeffs)
    coeffs[ONE] = Z
    return TreePath(Y.times, coeffs, Y.N, coherent=False)


def drift_integral(Y: np.ndarray, times: np.ndarray, m: float, i: int, j: int) -> np.ndarray:
    """Composite Simpson for ``int_{t_i}^{t_j} |Y|^{m-1} Y dr`` (trapezoid on a leftover interval)."""
    g = np.linalg.norm(Y, axis=-1, keepdims=True) ** (m - 1) * Y
    out = np.zeros(Y.shape[-1])
    n = j - i
    even = n - n % 2
    for a in range(i, i + even, 2):
        h = times[a + 2] - times[a]
        out += h / 6 * (g[a] + 4 * g[a + 1] + g[a + 2])
    if n % 2:
        out += 0.5 * (times[j] - times[j - 1]) * (g[j - 1] + g[j])
    return out


# --------------------------------------------------------------------------- remainders


def _cut_table(path: ForestPath, f: Forest):
    """Terms ``(g, a, c)`` with ``(a, f)`` in ``Delta g`` for ``g`` in the support of ``path``."""
    out = []
    for g in path.coeffs:
        for (a, b), c in coproduct(g).items():
            if b == f:
                out.append((g, a, c))
    return out


def remainder(path: ForestPath, f, i: int, j: int, lift: BranchedLift) -> np.ndarray:
    """``R^{Y,f}_{s,t} = <f, Y_t> - <X_{s,t} (x) f, Delta Y_s>`` at ``s = t_i``, ``t = t_j``."""
    f = as_forest(f)
    s, t = float(path.times[i]), float(path.times[j])
    inc = lift.increment_array(s, t)
    out = path.value(f)[j].copy()
    for g, a, c in _cut_table(path, f):
        out -= c * path.coeffs[g][i] * lift.forest_values(inc, a)
    return out


def remainder_table(path: ForestPath, f, idx, lift: BranchedLift, table=None) -> np.ndarray:
    """``R^{Y,f}`` for all pairs of the time indices ``idx``: array ``(M, M, k)``, zero below the diagonal."""
    f = as_forest(f)
    idx = np.asarray(idx)
    if table is None:
        table = lift.pair_table(path.times[idx])
    M = len(idx)
    R = np.zeros((M, M, path.k))
    val = path.value(f)[idx]
    iu, ju = np.triu_indices(M, k=0)
    R[iu, ju] = val[ju]
    for g, a, c in _cut_table(path, f):
        xa = np.ones(len(iu)) if a == ONE else lift.forest_values(table[iu, ju], a)
        # the diagonal carries <X_{s,s}, a> = 1{a = 1}
        if a != ONE:
            xa = np.where(iu == ju, 0.0, xa)
        R[iu, ju] -= c * path.coeffs[g][idx][iu] * xa[:, None]
    return R


@dataclass
class RemainderReport:
    forest: str
    norm: float
    exponent: float
    s: float
    t: float
    samples: int


def remainder_norm(path: ForestPath, f, idx, alpha: float, lift: BranchedLift, table=None) -> RemainderReport:
    """``[Y:f]_I = sup |R^{Y,f}_{s,t}| / |t - s|^{(N - |f|) alpha}`` over pairs of ``idx``."""
    f = as_forest(f)
    idx = np.asarray(idx)
    R = remainder_table(path, f, idx, lift, table)
    times = path.times[idx]
    iu, ju = np.triu_indices(len(idx), k=1)
    expo = (path.N - f.order) * alpha
    ratio = np.linalg.norm(R[iu, ju], axis=-1) / (times[ju] - times[iu]) ** expo
    k = int(np.argmax(ratio))
    return RemainderReport(f.encode(), float(ratio[k]), expo, float(times[iu[k]]), float(times[ju[k]]), len(iu))


def remainder_formula_rhs(f, mu: int, Y: TreePath, i: int, j: int, lift: BranchedLift, model: SigmaModel) -> np.ndarray:
    """``Ups_mu[f](Y_t) - <X_{s,t}, P_{<=N-|f|-1} sum_p D^p Ups_mu[f](Y_s)[Ups(Y_s), ...] / p!>``.

    ``Ups = Upsilon / S``. The ``p``-fold sum is regrouped by forests ``g`` with
    ``#g = p``, each carrying ``1 / prod_h g_h!``.
    """
    if not Y.coherent:
        raise ValueError("the remainder formula needs a coherent path")
    f = as_forest(f)
    N = Y.N
    if f.order > N - 1:
        raise ValueError(f"|f| = {f.order} exceeds N - 1 = {N - 1}")
    top = Tree(mu, f.trees)
    S = symmetry_factor(f)
    ys, yt = Y.Y[i], Y.Y[j]
    inc = lift.increment_array(float(Y.times[i]), float(Y.times[j]))
    out = upsilon_derivative(model, top, 0, yt, []) / S
    budget = N - f.order - 1
    trees = enumerate_trees(model.d, budget) if budget >= 1 else ()
    bold = {h: upsilon_all(model, [h], ys)[h] / symmetry_factor(h) for h in trees}
    for g in forests_from_trees(trees, budget):
        denom = 1
        for c in g.counts.values():
            denom *= math.factorial(c)
        xg = 1.0 if g == ONE else float(lift.forest_values(inc, g))
        if xg == 0.0:
            continue
        d = upsilon_derivative(model, top, len(g), ys, [bold[h] for h in g.trees]) / S
        out = out - d * xg / denom
    return out


# --------------------------------------------------------------------------- E and U quantities


def e_bound(Y: TreePath, i: int, j: int, lift: BranchedLift, model: SigmaModel) -> float:
    """``E_{s,t} = sum_{h, |h| <= N-1} |Upsilon[h](Y_s) <X_{s,t}, h>|``."""
    N = Y.N
    if N < 2:
        return 0.0
    trees = enumerate_trees(model.d, N - 1)
    inc = lift.increment_array(float(Y.times[i]), float(Y.times[j]))
    ups = upsilon_all(model, trees, Y.Y[i])
    return float(sum(np.linalg.norm(ups[h]) * abs(inc[lift.index[h]]) for h in trees))


def e_table(Y: TreePath, idx, lift: BranchedLift, model: SigmaModel, table=None) -> np.ndarray:
    """``E_{s,t}`` over all pairs of the time indices ``idx``; ``(M, M)``, zero below the diagonal."""
    idx = np.asarray(idx)
    M = len(idx)
    out = np.zeros((M, M))
    if Y.N < 2:
        return out
    if table is None:
        table = lift.pair_table(Y.times[idx])
    trees = enumerate_trees(model.d, Y.N - 1)
    ups = upsilon_all(model, trees, Y.Y[idx])
    for h in trees:
        out += np.linalg.norm(ups[h], axis=-1)[:, None] * np.abs(table[:, :, lift.index[h]])
    return np.triu(out)


def ball_directions(k: int, extra: int = 32, seed: int = 20240607) -> np.ndarray:
    """Unit directions: +-axes followed by ``extra`` fixed pseudo-random ones."""
    eye = np.eye(k)
    rnd = np.random.default_rng(seed).standard_normal((extra, k))
    rnd /= np.linalg.norm(rnd, axis=1, keepdims=True)
    return np.vstack([eye, -eye, rnd])


def _ball_points(centres: np.ndarray, radii: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    pts = centres[:, None, :] + radii[:, None, None] * dirs[None, :, :]
    return np.concatenate([centres[:, None, :], pts], axis=1).reshape(-1, centres.shape[-1])


def u_quantities(f, fbar, mu: int, Y: TreePath, idx, lift: BranchedLift, model: SigmaModel,
                 table=None, etab=None) -> float:
    """Sampled suprema over balls around ``Y_s``, ``s, t`` in ``idx``.

    With ``fbar is None``: ``sup |D Upsilon_mu[f](Y_s + a)|`` for ``|a| <= E_{s,t} + |Y_t - Y_s|``.
    Otherwise: ``sup |D^{#fbar} Upsilon_mu[f](Y_s + z)[Upsilon[h](Y_s)]_{h in fbar}|`` for ``|z| <= E_{s,t}``.
    The sup over ``t`` is realised by the largest radius for each ``s``.
    """
    f = as_forest(f)
    idx = np.asarray(idx)
    top = Tree(mu, f.trees)
    if etab is None:
        etab = e_table(Y, idx, lift, model, table)
    Ys = Y.Y[idx]
    dirs = ball_directions(model.k)
    E = etab + etab.T  # symmetric access; only s <= t pairs are used below
    if fbar is None:
        jump = np.linalg.norm(Ys[None, :, :] - Ys[:, None, :], axis=-1)
        upper = np.triu(np.ones_like(E, dtype=bool))
        radii = np.max(np.where(upper, E + jump, 0.0), axis=1)
        pts = _ball_points(Ys, radii, dirs)
        eye = np.eye(model.k)
        D = np.stack([upsilon_derivative(model, top, 1, pts, [np.broadcast_to(eye[a], pts.shape)])
                      for a in range(model.k)], axis=-1)
        return float(np.max(np.linalg.norm(D.reshape(len(pts), -1), axis=-1)))
    fbar = as_forest(fbar)
    upper = np.triu(np.ones_like(E, dtype=bool))
    radii = np.max(np.where(upper, E, 0.0), axis=1)
    npts = len(dirs) + 1
    pts = _ball_points(Ys, radii, dirs)
    ups = upsilon_all(model, set(fbar.trees), Ys)
    vecs = [np.repeat(ups[h], npts, axis=0) for h in fbar.trees]
    val = upsilon_derivative(model, top, len(fbar), pts, vecs)
    return float(np.max(np.linalg.norm(val, axis=-1)))
