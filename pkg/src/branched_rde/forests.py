"""Decorated rooted trees and forests.

Trees carry node labels in ``1..d``. A tree is stored in canonical form (children
sorted under :func:`canonical_order`) and interned, so structurally equal trees are
the same object. Forests are sorted tuples of trees; the empty forest is :data:`ONE`.

Linear combinations use exact coefficients (``int`` or ``Fraction``).
"""
from __future__ import annotations

import itertools
import math
import threading
from collections import Counter
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Iterator, Union

Coeff = Union[int, Fraction, float]


class Tree:
    """A decorated rooted tree ``[f]_label``; build with ``Tree(label, children)``."""

    __slots__ = ("label", "children", "order", "key", "_hash", "_encoding")

    _table: dict[tuple, "Tree"] = {}
    _lock = threading.Lock()

    def __new__(cls, label: int, children: Iterable["Tree"] = ()) -> "Tree":
        kids = tuple(sorted(children, key=_sort_key))
        key = (1 + sum(c.order for c in kids), int(label), tuple(c.key for c in kids))
        found = cls._table.get(key)
        if found is not None:
            return found
        with cls._lock:
            found = cls._table.get(key)
            if found is not None:
                return found
            obj = object.__new__(cls)
            obj.label = int(label)
            obj.children = kids
            obj.order = key[0]
            obj.key = key
            obj._hash = hash(key)
            obj._encoding = None
            cls._table[key] = obj
            return obj

    def __reduce__(self):
        return (Tree, (self.label, self.children))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        return self is other

    def __lt__(self, other: "Tree") -> bool:
        return self.key < other.key

    def __le__(self, other: "Tree") -> bool:
        return self.key <= other.key

    @property
    def forest(self) -> "Forest":
        """The forest of subtrees hanging off the root."""
        return Forest(self.children)

    def encode(self) -> str:
        if self._encoding is None:
            self._encoding = f"[{self.label}:" + "".join(c.encode() for c in self.children) + "]"
        return self._encoding

    def __repr__(self) -> str:
        return self.encode()


def _sort_key(h: Tree) -> tuple:
    return h.key


def canonical_order(a: Tree, b: Tree) -> int:
    """Three-way comparison: order, then root label, then children lexicographically."""
    return (a.key > b.key) - (a.key < b.key)


def node(label: int) -> Tree:
    """The single-node tree carrying ``label``."""
    return Tree(label, ())


class Forest:
    """A commutative product of trees, stored as a sorted tuple (multiplicity kept)."""

    __slots__ = ("trees", "order", "_hash")

    def __init__(self, trees: Iterable[Tree] = ()):
        if isinstance(trees, Tree):
            trees = (trees,)
        ts = tuple(sorted(trees, key=_sort_key))
        self.trees = ts
        self.order = sum(h.order for h in ts)
        self._hash = hash(tuple(h._hash for h in ts))

    def __reduce__(self):
        return (Forest, (self.trees,))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Forest) and self.trees == other.trees

    def __lt__(self, other: "Forest") -> bool:
        return (self.order, [h.key for h in self.trees]) < (other.order, [h.key for h in other.trees])

    def __len__(self) -> int:
        return len(self.trees)

    def __iter__(self) -> Iterator[Tree]:
        return iter(self.trees)

    def __bool__(self) -> bool:
        return bool(self.trees)

    def __mul__(self, other: "Forest") -> "Forest":
        if not isinstance(other, Forest):
            return NotImplemented
        return Forest(self.trees + other.trees)

    @property
    def counts(self) -> Counter:
        """Multi-index view: tree -> multiplicity."""
        return Counter(self.trees)

    @property
    def min_tree(self) -> Tree:
        if not self.trees:
            raise ValueError("the empty forest has no minimal tree")
        return self.trees[0]

    def without(self, h: Tree) -> "Forest":
        """Remove one copy of ``h``."""
        ts = list(self.trees)
        ts.remove(h)
        return Forest(ts)

    def encode(self) -> str:
        return " ".join(h.encode() for h in self.trees) if self.trees else "1"

    def __repr__(self) -> str:
        return f"Forest({self.encode()})"


ONE = Forest(())


def as_forest(x: Tree | Forest) -> Forest:
    return x if isinstance(x, Forest) else Forest((x,))


def parse_tree(text: str) -> Tree:
    """Inverse of :meth:`Tree.encode`, e.g. ``"[1:[2:]]"``."""
    tree, pos = _parse_at(text.strip(), 0)
    if pos != len(text.strip()):
        raise ValueError(f"trailing characters in tree encoding {text!r}")
    return tree


def parse_forest(text: str) -> Forest:
    s = text.strip()
    if s in ("", "1"):
        return ONE
    trees, pos = [], 0
    while pos < len(s):
        if s[pos].isspace():
            pos += 1
            continue
        h, pos = _parse_at(s, pos)
        trees.append(h)
    return Forest(trees)


def _parse_at(s: str, pos: int) -> tuple[Tree, int]:
    if s[pos] != "[":
        raise ValueError(f"expected '[' at {pos} in {s!r}")
    colon = s.index(":", pos)
    label = int(s[pos + 1:colon])
    pos = colon + 1
    kids = []
    while s[pos] != "]":
        h, pos = _parse_at(s, pos)
        kids.append(h)
    return Tree(label, kids), pos + 1


# --------------------------------------------------------------------------- enumeration


def _forests_from(pool: list[Tree], total: int, start: int = 0) -> Iterator[tuple[Tree, ...]]:
    # multisets from pool[start:] (pool sorted canonically) with order exactly `total`
    if total == 0:
        yield ()
        return
    for i in range(start, len(pool)):
        h = pool[i]
        if h.order > total:
            continue
        for rest in _forests_from(pool, total - h.order, i):
            yield (h,) + rest


@lru_cache(maxsize=None)
def enumerate_trees(d: int, n_max: int) -> tuple[Tree, ...]:
    """All trees with labels in ``1..d`` and order ``<= n_max``, canonically sorted."""
    if d < 1 or n_max < 0:
        raise ValueError("need d >= 1 and n_max >= 0")
    trees: list[Tree] = []
    for n in range(1, n_max + 1):
        pool = sorted(trees, key=_sort_key)
        for kids in _forests_from(pool, n - 1):
            for mu in range(1, d + 1):
                trees.append(Tree(mu, kids))
    return tuple(sorted(trees, key=_sort_key))


def forests_from_trees(trees: Iterable[Tree], n_max: int) -> list[Forest]:
    """All forests built from ``trees`` with order ``<= n_max`` (including ``ONE``)."""
    pool = sorted(set(trees), key=_sort_key)
    out = [Forest(ts) for n in range(n_max + 1) for ts in _forests_from(pool, n)]
    return sorted(out)


@lru_cache(maxsize=None)
def enumerate_forests(d: int, n_max: int) -> tuple[Forest, ...]:
    return tuple(forests_from_trees(enumerate_trees(d, n_max), n_max))


# --------------------------------------------------------------------------- vectors


class ForestVector(dict):
    """Sparse linear combination ``forest -> coefficient``; zeros are never stored."""

    def add_term(self, f: Forest, c: Coeff) -> None:
        if not c:
            return
        v = self.get(f, 0) + c
        if v:
            self[f] = v
        else:
            self.pop(f, None)

    def __add__(self, other: "ForestVector") -> "ForestVector":
        out = ForestVector(self)
        for f, c in other.items():
            out.add_term(f, c)
        return out

    def __sub__(self, other: "ForestVector") -> "ForestVector":
        return self + other.scale(-1)

    def scale(self, c: Coeff) -> "ForestVector":
        return ForestVector({f: c * v for f, v in self.items()}) if c else ForestVector()

    def __mul__(self, other):
        if isinstance(other, ForestVector):
            out = ForestVector()
            for f, a in self.items():
                for g, b in other.items():
                    out.add_term(f * g, a * b)
            return out
        return self.scale(other)

    __rmul__ = scale

    @classmethod
    def of(cls, x: Tree | Forest, c: Coeff = 1) -> "ForestVector":
        return cls({as_forest(x): c}) if c else cls()


class TensorVector(dict):
    """Sparse linear combination of pairs ``(left, right)`` of forests."""

    def add_term(self, key: tuple[Forest, Forest], c: Coeff) -> None:
        if not c:
            return
        v = self.get(key, 0) + c
        if v:
            self[key] = v
        else:
            self.pop(key, None)

    def __add__(self, other: "TensorVector") -> "TensorVector":
        out = TensorVector(self)
        for k, c in other.items():
            out.add_term(k, c)
        return out

    def __mul__(self, other: "TensorVector") -> "TensorVector":
        out = TensorVector()
        for (a, b), x in self.items():
            for (c, e), y in other.items():
                out.add_term((a * c, b * e), x * y)
        return out


def bracket(v: ForestVector, label: int) -> ForestVector:
    """Linear extension of ``f -> [f]_label``."""
    return ForestVector({Forest((Tree(label, f.trees),)): c for f, c in v.items()})


def truncate(v: ForestVector, n: int) -> ForestVector:
    """Drop every forest of order greater than ``n``."""
    return ForestVector({f: c for f, c in v.items() if f.order <= n})


# --------------------------------------------------------------------------- coproduct


@lru_cache(maxsize=None)
def _tree_coproduct(h: Tree) -> TensorVector:
    # Delta [f]_mu = [f]_mu (x) 1 + (id (x) [.]_mu) Delta f
    out = TensorVector({(Forest((h,)), ONE): 1})
    for (left, right), c in _forest_coproduct(h.forest).items():
        out.add_term((left, Forest((Tree(h.label, right.trees),))), c)
    return out


@lru_cache(maxsize=None)
def _forest_coproduct(f: Forest) -> TensorVector:
    out = TensorVector({(ONE, ONE): 1})
    for h in f.trees:
        out = out * _tree_coproduct(h)
    return out


def coproduct(x: Tree | Forest | ForestVector) -> TensorVector:
    """Connes-Kreimer coproduct, extended linearly to forest vectors."""
    if isinstance(x, ForestVector):
        out = TensorVector()
        for f, c in x.items():
            for k, v in _forest_coproduct(f).items():
                out.add_term(k, c * v)
        return out
    return TensorVector(_forest_coproduct(as_forest(x)))


@lru_cache(maxsize=None)
def coproduct_terms(h: Tree) -> tuple[tuple[int, tuple[Tree, ...], Tree | None], ...]:
    """Coproduct of a tree as ``(coefficient, left trees, right tree or None)`` triples."""
    out = []
    for (left, right), c in sorted(_tree_coproduct(h).items(), key=lambda kv: (kv[0][1], kv[0][0])):
        out.append((c, left.trees, right.trees[0] if right else None))
    return tuple(out)


# --------------------------------------------------------------------------- grafting


@lru_cache(maxsize=None)
def _graft(ft: Forest, f: Forest) -> ForestVector:
    if not f.trees:
        return ForestVector({ft: 1})
    J, I = ft.trees, f.trees
    stay_slot = len(I)
    out = ForestVector()
    # each tree of ft either stays alongside (slot len(I)) or is grafted onto root i
    for assign in itertools.product(range(len(I) + 1), repeat=len(J)):
        acc = ForestVector({Forest([J[j] for j, a in enumerate(assign) if a == stay_slot]): 1})
        for i, root in enumerate(I):
            sub = Forest([J[j] for j, a in enumerate(assign) if a == i])
            acc = acc * bracket(_graft(sub, root.forest), root.label)
        for g, c in acc.items():
            out.add_term(g, c)
    return out


def graft(ft: Tree | Forest, f: Tree | Forest) -> ForestVector:
    """Sum over all ways of attaching the trees of ``ft`` to nodes of ``f`` or beside it."""
    return ForestVector(_graft(as_forest(ft), as_forest(f)))


# --------------------------------------------------------------------------- combinatorial weights


@lru_cache(maxsize=None)
def _symmetry(f: Forest) -> int:
    out = 1
    for h, n in f.counts.items():
        out *= math.factorial(n) * _symmetry(h.forest) ** n
    return out


def symmetry_factor(x: Tree | Forest) -> int:
    """``S(f) = prod_h f_h! S(h)^{f_h}`` with ``S([f]_mu) = S(f)``."""
    if isinstance(x, Tree):
        return _symmetry(x.forest)
    return _symmetry(x)


def multinomial(f: Forest) -> int:
    """``(#f)! / prod_h f_h!``."""
    out = math.factorial(len(f))
    for n in f.counts.values():
        out //= math.factorial(n)
    return out


def inner_sharp(f: Tree | Forest, g: Tree | Forest) -> int:
    return int(as_forest(f) == as_forest(g))


@lru_cache(maxsize=None)
def _sym(f: Forest, g: Forest) -> int:
    if len(f) != len(g) or f.order != g.order:
        return 0
    if not f.trees:
        return 1
    h, rest = f.trees[0], Forest(f.trees[1:])
    total = 0
    # expand the bijection sum along the first tree of f
    for j, gj in enumerate(g.trees):
        if gj.label != h.label or gj.order != h.order:
            continue
        w = _sym(h.forest, gj.forest)
        if w:
            total += w * _sym(rest, Forest(g.trees[:j] + g.trees[j + 1:]))
    return total


def inner_sym(a, b) -> Coeff:
    """Symmetrised inner product, defined inductively via bijections of tree factors.

    Accepts trees, forests, forest vectors, or (for tensors) pairs / TensorVectors.
    """
    if isinstance(a, TensorVector) or isinstance(b, TensorVector):
        a = a if isinstance(a, TensorVector) else TensorVector({a: 1})
        b = b if isinstance(b, TensorVector) else TensorVector({b: 1})
        return sum(x * y * _sym(l1, l2) * _sym(r1, r2)
                   for (l1, r1), x in a.items() for (l2, r2), y in b.items())
    if isinstance(a, ForestVector) or isinstance(b, ForestVector):
        a = a if isinstance(a, ForestVector) else ForestVector.of(a)
        b = b if isinstance(b, ForestVector) else ForestVector.of(b)
        return sum(x * y * _sym(f, g) for f, x in a.items() for g, y in b.items())
    return _sym(as_forest(a), as_forest(b))


# --------------------------------------------------------------------------- full sets


def _is_full(A: set[Forest]) -> Forest | None:
    # downward closure: removing any single tree from a member stays in A
    if not A:
        return ONE
    for f in sorted(A):
        for h in set(f.trees):
            g = f.without(h)
            if g not in A:
                return g
    return None


def boundary_set(A: Iterable[Forest], trees: Iterable[Tree]) -> set[Forest]:
    """Forests outside ``A`` (and non-empty) whose minimal tree, removed once, lands in ``A``.

    ``trees`` is the ambient tree set the forests are drawn from.
    """
    A = set(A)
    missing = _is_full(A)
    if missing is not None:
        if not A:
            raise ValueError("A is not full: it is empty")
        raise ValueError(f"A is not full: {missing.encode()} is below a member but not in A")
    pool = sorted(set(trees), key=_sort_key)
    out = set()
    for a in A:
        for h in pool:
            if a.trees and a.min_tree < h:
                break
            f = a * Forest((h,))
            if f not in A:
                out.add(f)
    return out
