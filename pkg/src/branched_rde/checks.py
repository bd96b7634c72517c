"""Exhaustive self-checks of the forest algebra, shared by the CLI and the test suite."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

from .forests import (
    ONE,
    Forest,
    ForestVector,
    Tree,
    _sym,
    coproduct,
    enumerate_forests,
    enumerate_trees,
    graft,
    symmetry_factor,
)

MAX_ORDER = 6


class BudgetExceeded(ValueError):
    pass


@dataclass
class CheckResult:
    name: str
    passed: bool
    checked: int
    detail: str = ""
    counts: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.checked} checked{extra}"


def count_forests(d: int, n_max: int) -> tuple[list[int], list[int]]:
    """Numbers of decorated trees and forests by order (Euler transform), without enumerating."""
    trees = [0] * (n_max + 2)
    forests = [1] + [0] * (n_max + 1)
    for n in range(1, n_max + 2):
        trees[n] = d * forests[n - 1]
        # forests[n] = (1/n) sum_k c_k forests[n - k], c_k = sum_{j | k} j trees[j]
        if n <= n_max:
            s = 0
            for k in range(1, n + 1):
                c = sum(j * trees[j] for j in range(1, k + 1) if k % j == 0)
                s += c * forests[n - k]
            forests[n] = s // n
    return trees[: n_max + 1], forests[: n_max + 1]


def adjoint_size(d: int, max_order: int) -> dict:
    _, F = count_forests(d, max_order)
    pairs = sum(F[i] * F[j] for i in range(max_order + 1) for j in range(max_order + 1 - i))
    return {"forests": sum(F), "pairs": pairs, "triples": pairs * sum(F)}


def check_budget(d: int, max_order: int) -> None:
    if max_order > MAX_ORDER:
        size = adjoint_size(d, max_order)
        raise BudgetExceeded(
            f"max_order={max_order} exceeds the budget of {MAX_ORDER}: "
            f"{size['forests']} forests, {size['pairs']} pairs, {size['triples']} triples")


GraftHook = Callable[[Forest, Forest, ForestVector], ForestVector]


def corrupt_first_pair(ft: Forest, f: Forest, v: ForestVector) -> ForestVector:
    """Fault-injection hook: bumps one graft coefficient of the first pair with both sides non-empty."""
    if ft.trees and f.trees and ft.order + f.order >= 2 and len(ft) == 1 and len(f) == 1:
        if ft.trees[0].order == 1 and f.trees[0].order == 1 and ft.trees[0].label == f.trees[0].label == 1:
            g = min(v)
            out = ForestVector(v)
            out[g] = out[g] + 1
            return out
    return v


def adjoint_check(d: int, max_order: int, graft_hook: GraftHook | None = None) -> CheckResult:
    """``<<ft graft f, g>> == <<ft (x) f, Delta g>>`` for every pair with ``|ft| + |f| <= n`` and every ``|g| <= n``.

    Both sides are assembled as exact integer tables indexed by (pair, g). The
    symmetrised pairing is evaluated by its inductive definition on every pair of
    forests of equal order (it vanishes across orders); all other entries are zero
    on both sides.
    """
    check_budget(d, max_order)
    forests = enumerate_forests(d, max_order)
    by_order: dict[int, list[Forest]] = {}
    for f in forests:
        by_order.setdefault(f.order, []).append(f)
    # rows[f] = {g: <<f, g>>}, cols[g] = {f: <<f, g>>}
    rows: dict[Forest, dict[Forest, int]] = {f: {} for f in forests}
    cols: dict[Forest, dict[Forest, int]] = {f: {} for f in forests}
    for group in by_order.values():
        for f in group:
            for g in group:
                w = _sym(f, g)
                if w:
                    rows[f][g] = w
                    cols[g][f] = w

    pairs = [(ft, f) for ft in forests for f in forests if ft.order + f.order <= max_order]
    lhs: dict[tuple[Forest, Forest], dict[Forest, int]] = {}
    for ft, f in pairs:
        v = graft(ft, f)
        if graft_hook is not None:
            v = graft_hook(ft, f, v)
        row: dict[Forest, int] = {}
        for gp, c in v.items():
            for g, w in rows.get(gp, {}).items():
                row[g] = row.get(g, 0) + c * w
        lhs[(ft, f)] = {g: x for g, x in row.items() if x}

    rhs: dict[tuple[Forest, Forest], dict[Forest, int]] = {p: {} for p in pairs}
    for g in forests:
        for (a, b), c in coproduct(g).items():
            for ft, wa in cols[a].items():
                for f, wb in cols[b].items():
                    row = rhs.get((ft, f))
                    if row is not None:
                        row[g] = row.get(g, 0) + c * wa * wb
    for p in pairs:
        rhs[p] = {g: x for g, x in rhs[p].items() if x}

    counts = {"forests": len(forests), "pairs": len(pairs), "triples": len(pairs) * len(forests)}
    for ft, f in pairs:
        left, right = lhs[(ft, f)], rhs[(ft, f)]
        if left != right:
            g = min(k for k in set(left) | set(right) if left.get(k, 0) != right.get(k, 0))
            return CheckResult(
                "adjointness", False, counts["triples"],
                f"mismatch at ft={ft.encode()} f={f.encode()} g={g.encode()}: "
                f"{left.get(g, 0)} != {right.get(g, 0)}", counts)
    return CheckResult("adjointness", True, counts["triples"],
                       f"{counts['pairs']} pairs x {counts['forests']} forests", counts)


def grading_check(d: int, max_order: int) -> CheckResult:
    check_budget(d, max_order)
    forests = enumerate_forests(d, max_order)
    n = 0
    for f in forests:
        cp = coproduct(f)
        n += 1
        if any(a.order + b.order != f.order for a, b in cp):
            return CheckResult("grading", False, n, f"coproduct of {f.encode()} breaks grading")
        if len(f) == 1 and (cp.get((f, ONE)) != 1 or cp.get((ONE, f)) != 1):
            return CheckResult("grading", False, n, f"counit terms missing for {f.encode()}")
    for ft in forests:
        for f in forests:
            if ft.order + f.order > max_order:
                continue
            n += 1
            if any(g.order != ft.order + f.order for g in graft(ft, f)):
                return CheckResult("grading", False, n, f"graft {ft.encode()} onto {f.encode()} breaks grading")
    return CheckResult("grading", True, n)


def automorphisms(h: Tree) -> int:
    """Decoration-preserving automorphisms of a rooted tree, by brute force over node permutations."""
    labels: list[int] = []
    parents: list[int] = []

    def walk(t, parent):
        idx = len(labels)
        labels.append(t.label)
        parents.append(parent)
        for c in t.children:
            walk(c, idx)

    walk(h, -1)
    n = len(labels)
    depth = [0] * n
    for v in range(1, n):
        depth[v] = depth[parents[v]] + 1
    # permutations preserving (label, depth) classes only
    classes: dict[tuple[int, int], list[int]] = {}
    for v in range(n):
        classes.setdefault((labels[v], depth[v]), []).append(v)
    keys = sorted(classes)
    count = 0
    for perms in itertools.product(*[itertools.permutations(classes[k]) for k in keys]):
        pi = [0] * n
        for k, perm in zip(keys, perms):
            for src, dst in zip(classes[k], perm):
                pi[src] = dst
        if all(parents[pi[v]] == pi[parents[v]] for v in range(1, n)):
            count += 1
    return count


def symmetry_check(d: int, max_order: int) -> CheckResult:
    check_budget(d, max_order)
    trees = enumerate_trees(d, max_order) if max_order >= 1 else ()
    for i, h in enumerate(trees, 1):
        a, b = symmetry_factor(h), automorphisms(h)
        if a != b:
            return CheckResult("symmetry", False, i, f"S({h.encode()}) = {a} but {b} automorphisms")
    return CheckResult("symmetry", True, len(trees))


def multiplicativity_check(d: int, max_order: int) -> CheckResult:
    check_budget(d, max_order)
    forests = enumerate_forests(d, max_order)
    n = 0
    for f in forests:
        for g in forests:
            if f.order + g.order > max_order or g < f:
                continue
            n += 1
            if coproduct(f * g) != coproduct(f) * coproduct(g):
                return CheckResult("multiplicativity", False, n, f"fails for {f.encode()} * {g.encode()}")
    return CheckResult("multiplicativity", True, n)


def run_algebra_checks(d: int, max_order: int, graft_hook: GraftHook | None = None) -> list[CheckResult]:
    check_budget(d, max_order)
    return [
        adjoint_check(d, max_order, graft_hook),
        grading_check(d, max_order),
        symmetry_check(d, max_order),
        multiplicativity_check(d, max_order),
    ]
