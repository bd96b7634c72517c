"""Coefficient fields sigma and their elementary differentials.

A :class:`SigmaModel` maps ``R^k -> R^{k x d}`` and exposes exact derivative tensors
``D^p sigma_mu(y)`` of shape ``(..., k, k, ..., k)`` (value axis first, then ``p``
direction axes). Every model here has closed-form derivatives of all orders.

Elementary differentials ``Upsilon[h]`` are computed two ways: a direct recursion
over the tree (:func:`upsilon`) and a node-level contraction scheme
(:class:`Contraction`) whose Leibniz expansion yields exact ``D^p Upsilon[h]``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial

from .forests import Forest, Tree, enumerate_trees, symmetry_factor


def truncation_level(alpha: float) -> int:
    """The integer N with ``N alpha <= 1 < (N + 1) alpha``."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    n = int(math.floor(1.0 / alpha))
    while (n + 1) * alpha <= 1:
        n += 1
    while n * alpha > 1:
        n -= 1
    return n


def bracket(y) -> np.ndarray:
    """Japanese bracket ``(1 + |y|^2)^(1/2)`` over the last axis."""
    y = np.asarray(y, dtype=float)
    return np.sqrt(1.0 + np.sum(y * y, axis=-1))


def contract(T: np.ndarray, vecs) -> np.ndarray:
    """Feed vectors into the trailing direction slots of a (batched) tensor."""
    for v in vecs:
        v = np.asarray(v, dtype=float)
        vb = v.reshape(v.shape[:-1] + (1,) * (T.ndim - v.ndim) + v.shape[-1:])
        T = np.sum(T * vb, axis=-1)
    return T


# --------------------------------------------------------------------------- scalar profiles


class Profile:
    """A scalar function with exact derivatives of every order."""

    name = "profile"

    def deriv(self, p: int, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class TanhProfile(Profile):
    name = "tanh"

    @staticmethod
    @lru_cache(maxsize=None)
    def _poly(p: int) -> Polynomial:
        # tanh^(p) = P_p(tanh), P_{p+1}(T) = P_p'(T) (1 - T^2)
        P = Polynomial([0.0, 1.0])
        for _ in range(p):
            P = P.deriv() * Polynomial([1.0, 0.0, -1.0])
        return P

    def deriv(self, p, u):
        return self._poly(p)(np.tanh(u))


class SineProfile(Profile):
    name = "sin"

    def deriv(self, p, u):
        return np.sin(u + 0.5 * np.pi * p)


class BracketProfile(Profile):
    """``u -> (1 + u^2)^(gamma/2)``."""

    name = "bracket"

    def __init__(self, gamma: float):
        self.gamma = float(gamma)
        self._cache: dict[int, Polynomial] = {}

    def _poly(self, p: int) -> Polynomial:
        # phi^(n) = Q_n(u) (1 + u^2)^(a - n),  Q_{n+1} = Q_n' (1 + u^2) + 2 (a - n) u Q_n
        if p not in self._cache:
            a = 0.5 * self.gamma
            Q = Polynomial([1.0])
            for n in range(p):
                Q = Q.deriv() * Polynomial([1.0, 0.0, 1.0]) + Polynomial([0.0, 2.0 * (a - n)]) * Q
            self._cache[p] = Q
        return self._cache[p]

    def deriv(self, p, u):
        u = np.asarray(u, dtype=float)
        return self._poly(p)(u) * (1.0 + u * u) ** (0.5 * self.gamma - p)


class PolyProfile(Profile):
    name = "poly"

    def __init__(self, coeffs):
        self.poly = Polynomial(np.asarray(coeffs, dtype=float))

    def deriv(self, p, u):
        return self.poly.deriv(p)(np.asarray(u, dtype=float)) if p else self.poly(np.asarray(u, dtype=float))


PROFILES = {"tanh": TanhProfile, "sin": SineProfile}


# --------------------------------------------------------------------------- models


@dataclass
class SigmaModel:
    """Base class; subclasses implement :meth:`dtensor`."""

    k: int
    d: int
    N: int
    growth: str = "bounded"
    C_sigma: float = 1.0
    gamma: float | None = None
    name: str = "sigma"

    def __post_init__(self):
        if self.growth not in ("bounded", "polynomial"):
            raise ValueError(f"unknown growth class {self.growth!r}")
        if self.growth == "polynomial" and self.gamma is None:
            raise ValueError("polynomial growth needs gamma")

    def dtensor(self, p: int, mu: int, y) -> np.ndarray:
        """``D^p sigma_mu(y)`` with shape ``y.shape[:-1] + (k,) * (p + 1)``; ``mu`` is 1-based."""
        raise NotImplementedError

    def sigma(self, y) -> np.ndarray:
        """Matrix ``sigma(y)`` of shape ``(..., k, d)``."""
        return np.stack([self.dtensor(0, mu, y) for mu in range(1, self.d + 1)], axis=-1)

    def partial(self, beta, mu: int, y) -> np.ndarray:
        """``partial^beta sigma_mu(y)`` for a multi-index ``beta`` of length ``k``."""
        beta = tuple(int(b) for b in beta)
        if len(beta) != self.k:
            raise ValueError("multi-index length must equal k")
        idx = tuple(i for i, b in enumerate(beta) for _ in range(b))
        T = self.dtensor(len(idx), mu, y)
        return T[(Ellipsis, slice(None)) + idx] if idx else T

    @property
    def is_zero(self) -> bool:
        return False


@dataclass
class ConstantSigma(SigmaModel):
    value: np.ndarray = None  # (k, d)

    def __post_init__(self):
        super().__post_init__()
        self.value = np.asarray(self.value, dtype=float).reshape(self.k, self.d)

    def dtensor(self, p, mu, y):
        y = np.asarray(y, dtype=float)
        base = self.value[:, mu - 1]
        if p:
            return np.zeros(y.shape[:-1] + (self.k,) * (p + 1))
        return np.broadcast_to(base, y.shape[:-1] + (self.k,)).copy()

    @property
    def is_zero(self) -> bool:
        return not np.any(self.value)


@dataclass
class LinearSigma(SigmaModel):
    """``sigma_mu(x) = A_mu x``."""

    A: np.ndarray = None  # (d, k, k)

    def __post_init__(self):
        super().__post_init__()
        self.A = np.asarray(self.A, dtype=float).reshape(self.d, self.k, self.k)

    def dtensor(self, p, mu, y):
        y = np.asarray(y, dtype=float)
        A = self.A[mu - 1]
        if p == 0:
            return y @ A.T
        if p == 1:
            return np.broadcast_to(A, y.shape[:-1] + A.shape).copy()
        return np.zeros(y.shape[:-1] + (self.k,) * (p + 1))


@dataclass
class RidgeSigma(SigmaModel):
    """``sigma_mu(x) = c_mu + sum_r a[r, mu] phi_r(w_r . x + b_r)``.

    Derivatives are ``sum_r phi_r^(p)(w_r . x + b_r) a[r, mu] (x) w_r^{(x) p}``.
    """

    profiles: list = field(default_factory=list)
    a: np.ndarray = None  # (r, d, k)
    w: np.ndarray = None  # (r, k)
    b: np.ndarray = None  # (r,)
    offset: np.ndarray = None  # (k, d)

    def __post_init__(self):
        super().__post_init__()
        r = len(self.profiles)
        self.a = np.asarray(self.a, dtype=float).reshape(r, self.d, self.k)
        self.w = np.asarray(self.w, dtype=float).reshape(r, self.k)
        self.b = np.zeros(r) if self.b is None else np.asarray(self.b, dtype=float).reshape(r)
        self.offset = (np.zeros((self.k, self.d)) if self.offset is None
                       else np.asarray(self.offset, dtype=float).reshape(self.k, self.d))
        self._outer: dict[tuple[int, int, int], np.ndarray] = {}

    def _outer_product(self, r: int, mu: int, p: int) -> np.ndarray:
        key = (r, mu, p)
        if key not in self._outer:
            T = self.a[r, mu - 1]
            for _ in range(p):
                T = np.multiply.outer(T, self.w[r])
            self._outer[key] = T
        return self._outer[key]

    def dtensor(self, p, mu, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape[:-1] + (self.k,) * (p + 1))
        if p == 0:
            out = out + self.offset[:, mu - 1]
        for r, prof in enumerate(self.profiles):
            u = y @ self.w[r] + self.b[r]
            coef = prof.deriv(p, u)
            out = out + np.multiply.outer(coef, self._outer_product(r, mu, p))
        return out


def model_from_spec(kind: str, N: int, k: int = 1, d: int = 1, **params) -> SigmaModel:
    """Build a named test model.

    Kinds: ``zero``, ``constant``, ``linear``, ``power_bracket`` (``sigma = C <x>^gamma``,
    scalar), ``tanh`` (``sigma = c0 + c1 tanh(x)`` per entry), ``sine`` (ridge of sines),
    ``polynomial`` (scalar polynomial, for algebraic identity checks).
    """
    C = float(params.get("C_sigma", 1.0))
    if kind == "zero":
        return ConstantSigma(k=k, d=d, N=N, C_sigma=0.0, value=np.zeros((k, d)), name="zero")
    if kind == "constant":
        value = np.asarray(params.get("value", np.ones((k, d))), dtype=float)
        return ConstantSigma(k=k, d=d, N=N, C_sigma=float(np.max(np.abs(value))), value=value, name="constant")
    if kind == "linear":
        A = params.get("A")
        if A is None:
            A = np.stack([np.eye(k)] * d)
        return LinearSigma(k=k, d=d, N=N, growth="polynomial", gamma=1.0, C_sigma=C, A=A, name="linear")
    if kind == "power_bracket":
        if k != 1 or d != 1:
            raise ValueError("power_bracket is a scalar model (k = d = 1)")
        gamma = float(params.get("gamma", 1.2))
        return RidgeSigma(k=1, d=1, N=N, growth="polynomial", gamma=gamma, C_sigma=C,
                          profiles=[BracketProfile(gamma)], a=[[[C]]], w=[[1.0]], name="power_bracket")
    if kind == "tanh":
        c0 = float(params.get("c0", 1.0))
        c1 = float(params.get("c1", 0.5))
        # one ridge per (row, column): sigma_mu(x)_i = c0 + c1 tanh(x_i + shift)
        profiles, a, w, b = [], [], [], []
        for mu in range(d):
            for i in range(k):
                profiles.append(TanhProfile())
                amp = np.zeros((d, k))
                amp[mu, i] = c1
                a.append(amp)
                w.append(np.eye(k)[i])
                b.append(0.3 * (mu - i))
        return RidgeSigma(k=k, d=d, N=N, C_sigma=abs(c0) + abs(c1) * 2.0, profiles=profiles,
                          a=a, w=w, b=b, offset=np.full((k, d), c0), name="tanh")
    if kind == "sine":
        rng = np.random.default_rng(int(params.get("seed", 7)))
        r = int(params.get("ridges", max(1, k * d)))
        scale = float(params.get("scale", 0.5))
        a = np.asarray(params["a"], dtype=float).reshape(r, d, k) if "a" in params else rng.normal(size=(r, d, k)) * scale
        if "w" in params:
            w = np.asarray(params["w"], dtype=float).reshape(r, k)
        else:
            w = rng.normal(size=(r, k))
            w /= np.linalg.norm(w, axis=1, keepdims=True)
        b = np.asarray(params["b"], dtype=float).reshape(r) if "b" in params else rng.uniform(0, 2 * np.pi, size=r)
        offset = np.asarray(params.get("offset", np.zeros((k, d))), dtype=float)
        wmax = max(1.0, float(np.abs(w).max()))
        C = float(np.abs(a).sum(axis=0).max()) * wmax ** N + float(np.abs(offset).max())
        return RidgeSigma(k=k, d=d, N=N, C_sigma=C, profiles=[SineProfile() for _ in range(r)],
                          a=a, w=w, b=b, offset=offset, name="sine")
    if kind == "polynomial":
        if k != 1 or d != 1:
            raise ValueError("polynomial is a scalar model (k = d = 1)")
        coeffs = params.get("coeffs", [0.3, -0.7, 0.4, 0.25, -0.1])
        deg = len(coeffs) - 1
        return RidgeSigma(k=1, d=1, N=N, growth="polynomial", gamma=float(deg), C_sigma=C,
                          profiles=[PolyProfile(coeffs)], a=[[[1.0]]], w=[[1.0]], name="polynomial")
    raise ValueError(f"unknown sigma model kind {kind!r}")


# --------------------------------------------------------------------------- elementary differentials


def _check_order(model: SigmaModel, h: Tree) -> None:
    if h.order > model.N:
        raise ValueError(f"tree {h.encode()} has order {h.order} > N = {model.N}; "
                         "sigma derivatives beyond order N are not available")


def upsilon(model: SigmaModel, h: Tree, y) -> np.ndarray:
    """``Upsilon[[f]_mu](y) = D^{#f} sigma_mu(y)[(Upsilon[h'](y))_{h' in f}]`` (batched in ``y``)."""
    _check_order(model, h)
    return _upsilon_rec(model, h, np.asarray(y, dtype=float), {})


def _upsilon_rec(model, h, y, memo):
    if h in memo:
        return memo[h]
    T = model.dtensor(len(h.children), h.label, y)
    out = contract(T, [_upsilon_rec(model, c, y, memo) for c in h.children])
    memo[h] = out
    return out


def upsilon_all(model: SigmaModel, trees, y) -> dict[Tree, np.ndarray]:
    """``Upsilon[h](y)`` for several trees, sharing subtree evaluations."""
    y = np.asarray(y, dtype=float)
    memo: dict = {}
    for h in trees:
        _check_order(model, h)
    return {h: _upsilon_rec(model, h, y, memo) for h in trees}


def bold_upsilon(model: SigmaModel, h: Tree | Forest, y, mu: int | None = None) -> np.ndarray:
    """``Upsilon / S``; pass a tree, or a forest ``f`` together with ``mu`` for ``[f]_mu``."""
    if isinstance(h, Forest):
        if mu is None:
            raise ValueError("a forest argument needs the root decoration mu")
        h = Tree(mu, h.trees)
    return upsilon(model, h, y) / symmetry_factor(h)


def bold_upsilon_vector(model: SigmaModel, y) -> dict[Tree, np.ndarray]:
    """``sum_h Upsilon[h](y)/S(h) h`` over trees of order ``<= N - 1``."""
    trees = enumerate_trees(model.d, model.N - 1) if model.N > 1 else ()
    vals = upsilon_all(model, trees, y)
    return {h: v / symmetry_factor(h) for h, v in vals.items()}


class Contraction:
    """Node-level contraction scheme of a tree.

    Node ``u`` carries the tensor ``D^{c(u)} sigma_{mu(u)}``; edges feed child outputs
    into parent slots. Derivatives distribute direction vectors over nodes
    (Leibniz rule), so ``D^p Upsilon[h]`` is exact.
    """

    def __init__(self, h: Tree):
        self.tree = h
        self.labels: list[int] = []
        self.kids: list[list[int]] = []

        def walk(t):
            idx = len(self.labels)
            self.labels.append(t.label)
            self.kids.append([])
            for c in t.children:
                self.kids[idx].append(walk(c))
            return idx

        walk(h)

    def evaluate(self, model: SigmaModel, y, directions=()) -> np.ndarray:
        """``D^p Upsilon[h](y)[v_1, ..., v_p]`` with ``p = len(directions)``."""
        y = np.asarray(y, dtype=float)
        dirs = [np.asarray(v, dtype=float) for v in directions]
        tensors: dict[tuple[int, int], np.ndarray] = {}
        memo: dict[tuple[int, int], np.ndarray] = {}

        def tensor(order, label):
            key = (order, label)
            if key not in tensors:
                tensors[key] = model.dtensor(order, label, y)
            return tensors[key]

        def rec(u: int, mask: int) -> np.ndarray:
            key = (u, mask)
            if key in memo:
                return memo[key]
            members = [i for i in range(len(dirs)) if mask >> i & 1]
            kids = self.kids[u]
            slots = len(kids) + 1  # last slot = derivative hits the node itself
            total = None
            for assign in itertools.product(range(slots), repeat=len(members)):
                sub = [0] * len(kids)
                own = []
                for i, s in zip(members, assign):
                    if s == len(kids):
                        own.append(dirs[i])
                    else:
                        sub[s] |= 1 << i
                T = tensor(len(kids) + len(own), self.labels[u])
                term = contract(T, [rec(c, m) for c, m in zip(kids, sub)] + own)
                total = term if total is None else total + term
            memo[key] = total
            return total

        return rec(0, (1 << len(dirs)) - 1)


@lru_cache(maxsize=None)
def contraction(h: Tree) -> Contraction:
    return Contraction(h)


def upsilon_derivative(model: SigmaModel, h: Tree, p: int, y, directions) -> np.ndarray:
    """Exact ``D^p Upsilon[h](y)[v_1..v_p]`` for ``0 <= p <= N - |h| + 1``."""
    _check_order(model, h)
    if not 0 <= p <= model.N - h.order + 1:
        raise ValueError(f"derivative order p = {p} outside [0, N - |h| + 1] = [0, {model.N - h.order + 1}]")
    if len(directions) != p:
        raise ValueError("need exactly p direction vectors")
    return contraction(h).evaluate(model, y, directions)


def upsilon_derivative_tensor(model: SigmaModel, h: Tree, p: int, y) -> np.ndarray:
    """Full tensor ``D^p Upsilon[h](y)`` of shape ``(k,) * (p + 1)`` (single point)."""
    k = model.k
    eye = np.eye(k)
    out = np.zeros((k,) * (p + 1))
    for idx in itertools.product(range(k), repeat=p):
        out[(slice(None),) + idx] = upsilon_derivative(model, h, p, y, [eye[i] for i in idx])
    return out


@dataclass
class GrowthReport:
    tree: str
    p: int
    growth: str
    fitted_constant: float
    argmax: list[float]
    n_points: int


def growth_check(model: SigmaModel, h: Tree, p: int, sample) -> GrowthReport:
    """Sup over ``sample`` of ``|D^p Upsilon[h](y)|`` divided by its growth envelope.

    The envelope is ``C^{|h|}``, times ``<y>^{(gamma-1)|h|+1-p}`` for polynomial models.
    """
    sample = np.atleast_2d(np.asarray(sample, dtype=float))
    if sample.shape[-1] != model.k:
        sample = sample.reshape(-1, model.k)
    best, arg = 0.0, sample[0]
    for y in sample:
        val = float(np.linalg.norm(upsilon_derivative_tensor(model, h, p, y)))
        env = model.C_sigma ** h.order if model.C_sigma > 0 else 1.0
        if model.growth == "polynomial":
            env *= float(bracket(y)) ** ((model.gamma - 1.0) * h.order + 1.0 - p)
        ratio = val / env
        if ratio > best:
            best, arg = ratio, y
    return GrowthReport(tree=h.encode(), p=p, growth=model.growth, fitted_constant=best,
                        argmax=[float(v) for v in np.atleast_1d(arg)], n_points=len(sample))


def growth_sweep(model: SigmaModel, h: Tree, p: int, exponents=range(1, 7), points: int = 201) -> list[GrowthReport]:
    """Fitted growth constants on nested symmetric grids ``[-10^j, 10^j]`` (log-spaced plus a uniform core).

    A wrong growth exponent makes the constants drift with the extent; a valid
    bound keeps them flat.
    """
    if model.k != 1:
        raise ValueError("growth_sweep samples a scalar state; use growth_check for k > 1")
    out = []
    for j in exponents:
        core = np.linspace(-1.0, 1.0, 41)
        tail = np.logspace(0.0, float(j), points)
        grid = np.unique(np.concatenate([-tail[::-1], core, tail]))
        out.append(growth_check(model, h, p, grid[:, None]))
    return out
