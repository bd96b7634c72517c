import math
from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from branched_rde.driver import (
    BranchedLift,
    PiecewiseLinearPath,
    chen_compose,
    driver_csv_text,
    dyadic_grid,
    lift_segment,
    linear_path,
    order_norm,
    order_norms,
    read_driver_csv,
    sample_fbm,
    sinusoid_path,
    write_driver_csv,
)
from branched_rde.forests import ONE, Forest, Tree, enumerate_trees, node
from oracles import symbolic_tree_integral

b1, b2 = node(1), node(2)


def T(label, *kids):
    return Tree(label, kids)


def random_path(seed, n=16, d=2):
    rng = np.random.default_rng(seed)
    grid = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, n - 1)), [1.0]])
    values = np.vstack([np.zeros(d), np.cumsum(rng.normal(size=(n, d)) * 0.5, axis=0)])
    return PiecewiseLinearPath(grid, values)


# ---------------------------------------------------------------- paths


def test_path_validation():
    with pytest.raises(ValueError):
        PiecewiseLinearPath(np.array([0.0, 0.5, 0.4]), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        PiecewiseLinearPath(np.array([0.0, 1.0]), np.zeros((3, 1)))


def test_segment_straddle_rejected():
    path = linear_path([1.0], n=4)
    assert path.segment_of(0.25, 0.5) == 1
    with pytest.raises(ValueError):
        path.segment_of(0.2, 0.3)


def test_sinusoid_starts_at_zero():
    path = sinusoid_path(64, d=2)
    np.testing.assert_array_equal(path.values[0], 0.0)
    assert path.values.shape == (65, 2)


# ---------------------------------------------------------------- exact lift on a segment


@pytest.mark.parametrize("h,expect", [
    (b1, lambda t: t),
    (T(1, b1), lambda t: t ** 2 / 2),
    (T(1, b1, b1), lambda t: t ** 3 / 3),
    (T(1, T(1, b1)), lambda t: t ** 3 / 6),
])
def test_linear_driver_closed_forms(h, expect):
    lift = BranchedLift(linear_path([1.0], n=1), 3)
    for t in (0.1, 0.5, 1.0):
        assert lift.evaluate(0.0, t, h) == pytest.approx(expect(t), rel=1e-12)


def test_symbolic_oracle_order4():
    v = [1, 2]
    path = linear_path(v, n=3)
    lift = BranchedLift(path, 4)
    for h in enumerate_trees(2, 4):
        exact = float(symbolic_tree_integral(h, v, sp.Rational(7, 10)))
        got = lift.evaluate(0.0, 0.7, h)
        assert got == pytest.approx(exact, rel=1e-12), h.encode()


def test_lift_segment_fractions():
    inc = lift_segment(Fraction(0), Fraction(1, 2), [Fraction(1), Fraction(3)], enumerate_trees(2, 3))
    for h, val in inc.values.items():
        assert isinstance(val, Fraction)
        assert val == symbolic_tree_integral(h, [1, 3], sp.Rational(1, 2))


def test_zero_slope():
    lift = BranchedLift(linear_path([0.0], n=2), 3)
    for h in lift.trees:
        assert lift.evaluate(0.1, 0.9, h) == 0.0
    assert lift.evaluate(0.1, 0.9, ONE) == 1.0


def test_forest_value_is_product():
    lift = BranchedLift(linear_path([1.0, -2.0], n=1), 2)
    f = Forest((b2, b2))
    assert lift.evaluate(0.0, 0.4, f) == pytest.approx((-0.8) ** 2)
    assert lift.evaluate(0.3, 0.3, f) == 0.0


def test_unknown_tree():
    lift = BranchedLift(linear_path([1.0], n=1), 2)
    with pytest.raises(KeyError):
        lift.evaluate(0, 1, T(1, b1, b1))


# ---------------------------------------------------------------- Chen


def test_chen_half_split_example():
    h = T(1, b1)
    left = lift_segment(Fraction(0), Fraction(1, 2), [Fraction(1)], [b1, h])
    right = lift_segment(Fraction(1, 2), Fraction(1), [Fraction(1)], [b1, h])
    assert chen_compose(left, right)[h] == Fraction(1, 2)


def test_chen_rejects_gap():
    a = lift_segment(0.0, 0.5, [1.0], [b1])
    b = lift_segment(0.6, 1.0, [1.0], [b1])
    with pytest.raises(ValueError):
        chen_compose(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_chen_relation_random_triples(seed):
    lift = BranchedLift(random_path(seed), 4)
    rng = np.random.default_rng(100 + seed)
    for _ in range(100):
        s, u, t = np.sort(rng.uniform(0, 1, 3))
        assert lift.chen_defect(s, u, t) <= 1e-10


def test_chen_defect_detects_corruption():
    lift = BranchedLift(random_path(0), 3)
    base = lift.chen_defect(0.1, 0.4, 0.9)
    bad = lift.increment_array(0.1, 0.9).copy()
    bad[-1] *= 1.001
    lift._cache[(0.1, 0.9)] = bad
    assert base < 1e-12 < lift.chen_defect(0.1, 0.4, 0.9)


def test_compose_associative():
    lift = BranchedLift(random_path(9), 4)
    A, B, C = (lift.increment_array(a, b) for a, b in [(0.0, 0.3), (0.3, 0.55), (0.55, 1.0)])
    np.testing.assert_allclose(lift.compose(lift.compose(A, B), C), lift.compose(A, lift.compose(B, C)),
                               rtol=1e-12, atol=1e-14)


def test_chen_generic_matches_vectorised():
    lift = BranchedLift(linear_path([1.0, 0.5], n=1), 3)
    L = lift.increment(0.0, 0.25)
    R = lift.increment(0.25, 0.75)
    gen = chen_compose(L, R)
    vec = lift.increment(0.0, 0.75)
    for h in lift.trees:
        assert gen[h] == pytest.approx(vec[h], rel=1e-13, abs=1e-15)


def test_pair_table_matches_direct():
    lift = BranchedLift(random_path(3), 3)
    grid = np.linspace(0, 1, 9)
    table = lift.pair_table(grid)
    for i in range(9):
        for j in range(i + 1, 9):
            np.testing.assert_allclose(table[i, j], lift.increment_array(grid[i], grid[j]), rtol=1e-11, atol=1e-13)


def test_consecutive_matches_increments():
    lift = BranchedLift(random_path(4), 3)
    times = np.linspace(0, 1, 13)
    steps = lift.consecutive(times)
    for i in range(12):
        np.testing.assert_allclose(steps[i], lift.increment_array(times[i], times[i + 1]), rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2), st.floats(0.05, 0.95))
def test_first_level_is_path_increment(v, u):
    lift = BranchedLift(sinusoid_path(32, d=2, drift=v), 2)
    inc = lift.increment_array(0.0, u)
    np.testing.assert_allclose([inc[lift.index[b1]], inc[lift.index[b2]]], lift.path(u) - lift.path(0.0),
                               atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_shuffle_identity_order2(seed, a, b):
    # <X, b_i> <X, b_j> = <X, [b_i]_j> + <X, [b_j]_i>
    s, t = sorted((a, b))
    lift = BranchedLift(random_path(seed, n=6), 2)
    x = lift.increment_array(s, t)
    ix = lift.index
    lhs = x[ix[b1]] * x[ix[b2]]
    rhs = x[ix[T(2, b1)]] + x[ix[T(1, b2)]]
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------- fBM


def test_fbm_brownian_increments():
    n, draws = 16, 10_000
    incs = np.stack([np.diff(sample_fbm(0.5, n, s).values[:, 0]) for s in range(draws)])
    assert np.var(incs) == pytest.approx(1 / n, rel=0.05)
    corr = np.corrcoef(incs[:, 0], incs[:, 1])[0, 1]
    assert abs(corr) < 0.05


@pytest.mark.parametrize("H", [0.3, 0.4, 0.7])
def test_fbm_terminal_variance(H):
    vals = np.array([sample_fbm(H, 8, s).values[-1, 0] for s in range(10_000)])
    assert np.mean(vals ** 2) == pytest.approx(1.0, rel=0.05)


def test_fbm_deterministic():
    a = sample_fbm(0.4, 128, 42, d=2)
    b = sample_fbm(0.4, 128, 42, d=2)
    assert a.values.tobytes() == b.values.tobytes()
    assert sample_fbm(0.4, 128, 43, d=2).values.tobytes() != a.values.tobytes()


def test_fbm_rejects_bad_inputs():
    with pytest.raises(ValueError):
        sample_fbm(1.2, 8, 0)
    with pytest.raises(ValueError):
        sample_fbm(0.4, 2 ** 14, 0)


# ---------------------------------------------------------------- CSV


def test_csv_round_trip(tmp_path):
    path = sample_fbm(0.4, 32, 1, d=2)
    target = tmp_path / "drv.csv"
    write_driver_csv(path, target, header="config_hash: abc")
    assert target.read_text().startswith("# config_hash: abc\n")
    back = read_driver_csv(target)
    np.testing.assert_array_equal(back.grid, path.grid)
    np.testing.assert_array_equal(back.values, path.values)
    assert driver_csv_text(back) == driver_csv_text(path)


def test_csv_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        read_driver_csv(tmp_path / "nope.csv")


# ---------------------------------------------------------------- norms


def test_norm_linear_driver():
    lift = BranchedLift(linear_path([1.0], n=1), 2)
    est = order_norm(lift, b1, 0.4, dyadic_grid(5))
    assert est.value == pytest.approx(1.0)
    assert (est.s, est.t) == (0.0, 1.0)


def test_norm_constant_path():
    lift = BranchedLift(linear_path([0.0], n=1), 2)
    assert all(e.value == 0.0 for e in order_norms(lift, 0.4, dyadic_grid(4)).values())


@pytest.mark.parametrize("seed", range(3))
def test_norm_submultiplicative(seed):
    lift = BranchedLift(sample_fbm(0.45, 64, seed, d=2), 2)
    grid = dyadic_grid(6)
    norms = order_norms(lift, 0.4, grid)
    trees = [h for h in lift.trees if h.order == 1]
    for a in trees:
        for b in trees:
            f = Forest((a, b))
            fv = order_norms(lift, 0.4, grid, [f])[f].value
            assert fv <= norms[Forest((a,))].value * norms[Forest((b,))].value * (1 + 1e-12)


def test_norm_needs_two_points():
    lift = BranchedLift(linear_path([1.0], n=1), 1)
    with pytest.raises(ValueError):
        order_norms(lift, 0.4, [0.0])


def test_norm_scales_with_order():
    # X(t) = c t: [X:h] on [0,1] scales like c^{|h|}
    grid = dyadic_grid(4)
    a = order_norms(BranchedLift(linear_path([1.0], n=1), 3), 0.4, grid)
    b = order_norms(BranchedLift(linear_path([2.0], n=1), 3), 0.4, grid)
    for f in a:
        assert b[f].value == pytest.approx(2 ** f.order * a[f].value, rel=1e-12)
        assert math.isfinite(a[f].value)
