"""Piecewise-linear drivers and their canonical branched lifts.

On a linear piece with slope ``v`` every tree value is a monomial in the elapsed
time: ``<X_{a,r}, h> = c_h (r - a)^{|h|}`` with ``c_{[f]_mu} = v_mu prod_{h in f} c_h / |[f]_mu|``.
Longer increments are assembled from pieces with Chen's relation.
"""
from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .forests import ONE, Forest, Tree, as_forest, coproduct_terms, enumerate_trees


# --------------------------------------------------------------------------- paths


@dataclass(frozen=True)
class PiecewiseLinearPath:
    grid: np.ndarray  # (n + 1,)
    values: np.ndarray  # (n + 1, d)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if grid.ndim != 1 or len(grid) < 2 or len(values) != len(grid):
            raise ValueError("need at least two grid points and one value row per grid point")
        if not np.all(np.diff(grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if grid[0] > 0 or grid[-1] < 1:
            raise ValueError(f"grid must cover [0, 1], got [{grid[0]}, {grid[-1]}]")
        if not np.all(np.isfinite(values)):
            raise ValueError("driver values must be finite")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values, axis=0) / np.diff(self.grid)[:, None]

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.grid, self.values[:, j]) for j in range(self.d)], axis=-1)

    def segment_of(self, a: float, b: float) -> int:
        """Index of the linear piece containing ``[a, b]``; rejects straddling intervals."""
        i = int(np.searchsorted(self.grid, a, side="right") - 1)
        i = min(max(i, 0), len(self.grid) - 2)
        if a < self.grid[i] or b > self.grid[i + 1]:
            raise ValueError(f"[{a}, {b}] straddles a breakpoint of the driver")
        return i


def linear_path(v, n: int = 1) -> PiecewiseLinearPath:
    """``X(t) = t v`` on a uniform grid with ``n`` pieces."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    t = np.linspace(0.0, 1.0, n + 1)
    return PiecewiseLinearPath(t, t[:, None] * v[None, :])


def sinusoid_path(n: int, d: int = 1, drift=1.0, amplitude=0.2, freq=2.0, phase=0.0) -> PiecewiseLinearPath:
    """Interpolated ``X^mu(t) = drift_mu t + amplitude_mu sin(2 pi freq_mu t + phase_mu)`` (shifted to start at 0)."""
    t = np.linspace(0.0, 1.0, n + 1)
    p = [np.broadcast_to(np.asarray(x, dtype=float), (d,)) for x in (drift, amplitude, freq, phase)]
    vals = p[0] * t[:, None] + p[1] * np.sin(2 * np.pi * p[2] * t[:, None] + p[3])
    return PiecewiseLinearPath(t, vals - vals[0])


_chol_cache: dict[tuple[float, int], np.ndarray] = {}
_chol_lock = threading.Lock()

FBM_MAX_N = 2 ** 13


def fbm_cholesky(H: float, n: int) -> np.ndarray:
    """Lower Cholesky factor of the fBM covariance on ``t_i = i/n``, ``i = 1..n``."""
    key = (float(H), int(n))
    with _chol_lock:
        if key in _chol_cache:
            return _chol_cache[key]
    t = np.arange(1, n + 1) / n
    cov = 0.5 * (t[:, None] ** (2 * H) + t[None, :] ** (2 * H) - np.abs(t[:, None] - t[None, :]) ** (2 * H))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(cov + 1e-12 * np.eye(n))
    with _chol_lock:
        _chol_cache[key] = L
    return L


def sample_fbm(H: float, n: int, seed: int, d: int = 1) -> PiecewiseLinearPath:
    """Exact-covariance fBM on a uniform grid (``d`` independent components), linearly interpolated."""
    if not 0 < H < 1:
        raise ValueError(f"Hurst parameter must lie in (0, 1), got {H}")
    if not 1 <= n <= FBM_MAX_N:
        raise ValueError(f"grid size must lie in [1, {FBM_MAX_N}], got {n}")
    L = fbm_cholesky(H, n)
    z = np.random.default_rng(seed).standard_normal((n, d))
    x = np.vstack([np.zeros((1, d)), L @ z])
    return PiecewiseLinearPath(np.linspace(0.0, 1.0, n + 1), x)


def driver_csv_text(path: PiecewiseLinearPath, header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"x{j + 1}" for j in range(path.d)])
    for t, row in zip(path.grid, path.values):
        w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
    return buf.getvalue()


def write_driver_csv(path: PiecewiseLinearPath, target, header: str = "") -> None:
    Path(target).write_text(driver_csv_text(path, header))


def read_driver_csv(source) -> PiecewiseLinearPath:
    source = Path(source)
    if not source.is_file():
        raise FileNotFoundError(f"driver file not found: {source}")
    with source.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if len(rows) < 3:
        raise ValueError(f"driver file {source} needs a header and at least two rows")
    data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    return PiecewiseLinearPath(data[:, 0], data[:, 1:])


# --------------------------------------------------------------------------- exact increments


@dataclass(frozen=True)
class Increment:
    """Tree values ``<X_{s,t}, h>`` over a fixed tree set."""

    s: float
    t: float
    values: dict

    def __getitem__(self, x):
        if isinstance(x, Tree):
            return self.values[x]
        out = 1
        for h in as_forest(x).trees:
            out = out * self.values[h]
        return out


def lift_segment(a, b, slope, trees) -> Increment:
    """Exact ``<X_{a,b}, h>`` for a linear piece with the given slope (generic arithmetic).

    Works with floats or :class:`fractions.Fraction` inputs alike.
    """
    trees = tuple(sorted(set(trees)))
    closure = set()
    for h in trees:
        stack = [h]
        while stack:
            x = stack.pop()
            if x not in closure:
                closure.add(x)
                stack.extend(x.children)
    coef: dict[Tree, object] = {}
    # canonical order lists children before their parents
    for h in sorted(closure):
        c = slope[h.label - 1]
        for ch in h.children:
            c = c * coef[ch]
        coef[h] = c / h.order
    dt = b - a
    return Increment(a, b, {h: coef[h] * dt ** h.order for h in trees})


def chen_compose(left: Increment, right: Increment) -> Increment:
    """``<X_{s,t}, h> = <X_{s,u} (x) X_{u,t}, Delta h>`` (cut-off part pairs with the left interval)."""
    if left.t != right.s:
        raise ValueError(f"intervals [{left.s}, {left.t}] and [{right.s}, {right.t}] are not adjacent")
    if set(left.values) != set(right.values):
        raise ValueError("increments are over different tree sets")
    out = {}
    for h in left.values:
        total = 0
        for c, lefts, r in coproduct_terms(h):
            term = c
            for x in lefts:
                term = term * left.values[x]
            if r is not None:
                term = term * right.values[r]
            total = total + term
        out[h] = total
    return Increment(left.s, right.t, out)


# --------------------------------------------------------------------------- vectorised lift


class BranchedLift:
    """Canonical lift of a piecewise-linear path on the trees of order ``<= N``."""

    def __init__(self, path: PiecewiseLinearPath, N: int):
        if N < 1:
            raise ValueError("N must be at least 1")
        self.path = path
        self.N = N
        self.d = path.d
        self.trees: tuple[Tree, ...] = enumerate_trees(self.d, N)
        self.index = {h: i for i, h in enumerate(self.trees)}
        self.orders = np.array([h.order for h in self.trees])
        # per-segment monomial coefficients c_h
        slopes = path.slopes
        coef = np.zeros((len(slopes), len(self.trees)))
        for i, h in enumerate(self.trees):
            c = slopes[:, h.label - 1].copy()
            for ch in h.children:
                c = c * coef[:, self.index[ch]]
            coef[:, i] = c / h.order
        self.coef = coef
        # Chen plan: per tree, (coefficient, left indices, right index or -1)
        self._plan = [
            [(c, [self.index[x] for x in lefts], -1 if r is None else self.index[r])
             for c, lefts, r in coproduct_terms(h)]
            for h in self.trees
        ]
        self._cache: dict[tuple[float, float], np.ndarray] = {}
        self._lock = threading.Lock()
        self._variation: BranchedLift | None = None

    # -- core vector operations

    def compose(self, L: np.ndarray, R: np.ndarray) -> np.ndarray:
        """Chen composition on stacked tree-value arrays ``(..., T)``."""
        out = np.empty(np.broadcast_shapes(L.shape, R.shape))
        for i, terms in enumerate(self._plan):
            acc = 0.0
            for c, lefts, r in terms:
                term = float(c)
                for j in lefts:
                    term = term * L[..., j]
                if r >= 0:
                    term = term * R[..., r]
                acc = acc + term
            out[..., i] = acc
        return out

    def _pieces(self, s: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Tree values for sub-intervals ``[s, t]`` each inside one linear piece."""
        seg = np.clip(np.searchsorted(self.path.grid, s, side="right") - 1, 0, len(self.coef) - 1)
        dt = (t - s)[:, None] ** self.orders[None, :]
        return self.coef[seg] * dt, seg

    def consecutive(self, times) -> np.ndarray:
        """Tree values on every ``[times[i], times[i+1]]``, shape ``(len(times) - 1, T)``."""
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) < 0) or times[0] < self.path.grid[0] or times[-1] > self.path.grid[-1]:
            raise ValueError("times must be non-decreasing and inside the driver grid")
        grid = self.path.grid
        cuts = np.union1d(times, grid[(grid > times[0]) & (grid < times[-1])])
        step = np.searchsorted(times, cuts[:-1], side="right") - 1
        step = np.minimum(step, len(times) - 2)
        vals, _ = self._pieces(cuts[:-1], cuts[1:])
        n = len(times) - 1
        counts = np.bincount(step, minlength=n)
        out = np.zeros((n, len(self.trees)))
        if len(counts) == 0:
            return out
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        for j in range(int(counts.max()) if counts.size else 0):
            has = counts > j
            idx = starts[has] + j
            if j == 0:
                out[has] = vals[idx]
            else:
                out[has] = self.compose(out[has], vals[idx])
        return out

    def variation_lift(self) -> "BranchedLift":
        """Lift of the path with every slope replaced by its absolute value.

        Its tree values dominate every partial sum met while composing pieces,
        so they are the round-off scale for relative comparisons.
        """
        if self._variation is None:
            steps = np.abs(np.diff(self.path.values, axis=0))
            values = np.vstack([np.zeros(self.d), np.cumsum(steps, axis=0)])
            self._variation = BranchedLift(PiecewiseLinearPath(self.path.grid, values), self.N)
        return self._variation

    def chen_defect(self, s: float, u: float, t: float) -> float:
        """Largest defect of ``X_{s,t} = X_{s,u} * X_{u,t}`` relative to the variation lift on ``[s, t]``."""
        whole = self.increment_array(s, t)
        err = np.abs(whole - self.compose(self.increment_array(s, u), self.increment_array(u, t)))
        scale = self.variation_lift().increment_array(s, t)
        mask = scale > 0
        return float(np.max(err[mask] / scale[mask])) if mask.any() else float(np.max(err))

    def increment_array(self, s: float, t: float) -> np.ndarray:
        if not self.path.grid[0] <= s <= t <= self.path.grid[-1]:
            raise ValueError(f"need {self.path.grid[0]} <= s <= t <= {self.path.grid[-1]}, got s={s}, t={t}")
        key = (float(s), float(t))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        val = self.consecutive(np.array([s, t]))[0] if t > s else np.zeros(len(self.trees))
        val.setflags(write=False)
        with self._lock:
            self._cache[key] = val
        return val

    def increment(self, s: float, t: float) -> Increment:
        val = self.increment_array(s, t)
        return Increment(s, t, {h: float(v) for h, v in zip(self.trees, val)})

    def forest_values(self, arr: np.ndarray, f: Forest | Tree) -> np.ndarray:
        """Multiplicative extension to a forest of an array of tree values ``(..., T)``."""
        f = as_forest(f)
        out = np.ones(arr.shape[:-1])
        for h in f.trees:
            if h not in self.index:
                raise KeyError(f"tree {h.encode()} is not in the lift (d={self.d}, N={self.N})")
            out = out * arr[..., self.index[h]]
        return out

    def evaluate(self, s: float, t: float, f: Forest | Tree) -> float:
        """``<X_{s,t}, f>``; ``1`` on the empty forest."""
        f = as_forest(f)
        for h in f.trees:
            if h not in self.index:
                raise KeyError(f"tree {h.encode()} is not in the lift (d={self.d}, N={self.N})")
        if f == ONE:
            return 1.0
        return float(self.forest_values(self.increment_array(s, t), f))

    def pair_table(self, grid) -> np.ndarray:
        """``<X_{g_i, g_j}, h>`` for all ``i <= j``; array ``(M, M, T)``, zero below the diagonal."""
        grid = np.asarray(grid, dtype=float)
        M = len(grid)
        steps = self.consecutive(grid)
        table = np.zeros((M, M, len(self.trees)))
        idx = np.arange(M - 1)
        table[idx, idx + 1] = steps
        for k in range(2, M):
            i = np.arange(M - k)
            table[i, i + k] = self.compose(table[i, i + k - 1], steps[i + k - 1])
        return table

    def diagnostics(self, intervals) -> dict:
        """JSON-ready ``{"[s,t]": {tree encoding: value}}``."""
        out = {}
        for s, t in intervals:
            val = self.increment_array(s, t)
            out[f"[{s!r},{t!r}]"] = {h.encode(): float(v) for h, v in zip(self.trees, val)}
        return out


def dump_diagnostics(lift: BranchedLift, intervals, target) -> None:
    Path(target).write_text(json.dumps(lift.diagnostics(intervals), indent=2, sort_keys=True))


# --------------------------------------------------------------------------- order norms


@dataclass
class NormEstimate:
    forest: str
    value: float
    s: float
    t: float
    alpha: float


def dyadic_grid(level: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    return np.linspace(a, b, 2 ** level + 1)


def order_norms(lift: BranchedLift, alpha: float, grid, forests=None, table=None) -> dict:
    """``[X:f] = sup |<X_{s,t}, f>| / |t - s|^{alpha |f|}`` over grid pairs, with attaining pairs.

    ``forests`` defaults to every tree of the lift.
    """
    grid = np.asarray(grid, dtype=float)
    if len(grid) < 2:
        raise ValueError("need at least two grid points")
    if table is None:
        table = lift.pair_table(grid)
    forests = lift.trees if forests is None else forests
    i, j = np.triu_indices(len(grid), k=1)
    gap = grid[j] - grid[i]
    vals = table[i, j]
    out = {}
    for f in forests:
        f = as_forest(f)
        ratio = np.abs(lift.forest_values(vals, f)) / gap ** (alpha * f.order)
        k = int(np.argmax(ratio))
        out[f] = NormEstimate(f.encode(), float(ratio[k]), float(grid[i[k]]), float(grid[j[k]]), alpha)
    return out


def order_norm(lift: BranchedLift, f, alpha: float, grid) -> NormEstimate:
    return order_norms(lift, alpha, grid, [f])[as_forest(f)]
