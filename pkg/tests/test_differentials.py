import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branched_rde.differentials import (
    bold_upsilon,
    bold_upsilon_vector,
    bracket,
    growth_check,
    growth_sweep,
    model_from_spec,
    truncation_level,
    upsilon,
    upsilon_all,
    upsilon_derivative,
    upsilon_derivative_tensor,
)
from branched_rde.forests import ONE, Tree, enumerate_forests, enumerate_trees, graft, node, parse_tree

b1, b2 = node(1), node(2)


def T(label, *kids):
    return Tree(label, kids)


@pytest.mark.parametrize("alpha,N", [(0.45, 2), (0.5, 2), (0.34, 2), (0.3, 3), (0.26, 3), (0.25, 4), (0.99, 1), (0.2, 5)])
def test_truncation_level(alpha, N):
    assert truncation_level(alpha) == N


def test_truncation_level_rejects():
    with pytest.raises(ValueError):
        truncation_level(1.2)


def test_bracket():
    assert bracket(np.array([0.0])) == 1.0
    assert bracket(np.array([3.0, 4.0])) == pytest.approx(np.sqrt(26))


# ---------------------------------------------------------------- sigma models


@pytest.mark.parametrize("kind,k,d,params", [
    ("tanh", 2, 2, {}),
    ("sine", 2, 2, {"seed": 3}),
    ("power_bracket", 1, 1, {"gamma": 1.3}),
    ("polynomial", 1, 1, {}),
    ("linear", 2, 1, {}),
])
def test_dtensor_matches_finite_differences(kind, k, d, params):
    model = model_from_spec(kind, N=3, k=k, d=d, **params)
    rng = np.random.default_rng(0)
    y = rng.normal(size=k)
    h = 1e-6
    for p in range(3):
        for mu in range(1, d + 1):
            T0 = model.dtensor(p, mu, y)
            T1 = model.dtensor(p + 1, mu, y)
            for j in range(k):
                e = np.eye(k)[j] * h
                fd = (model.dtensor(p, mu, y + e) - model.dtensor(p, mu, y - e)) / (2 * h)
                np.testing.assert_allclose(T1[..., j], fd, atol=1e-6 * (1 + np.abs(T0).max()))


def test_dtensor_symmetric():
    model = model_from_spec("sine", N=3, k=3, d=1, seed=2)
    T3 = model.dtensor(3, 1, np.array([0.1, -0.4, 0.7]))
    for perm in itertools.permutations((1, 2, 3)):
        np.testing.assert_allclose(T3, T3.transpose((0,) + perm), atol=1e-14)


def test_dtensor_batched_shape():
    model = model_from_spec("tanh", N=2, k=2, d=3)
    assert model.dtensor(2, 1, np.zeros((5, 2))).shape == (5, 2, 2, 2)
    assert model.sigma(np.zeros(2)).shape == (2, 3)


def test_unknown_model():
    with pytest.raises(ValueError):
        model_from_spec("cubic", N=2)


def test_scalar_models_reject_vectors():
    with pytest.raises(ValueError):
        model_from_spec("power_bracket", N=2, k=2)


def test_power_bracket_values():
    model = model_from_spec("power_bracket", N=3, gamma=1.5)
    y = np.array([2.0])
    assert model.sigma(y)[0, 0] == pytest.approx(5.0 ** 0.75)
    # d/dx <x>^g = g x <x>^{g-2}
    assert model.dtensor(1, 1, y)[0, 0] == pytest.approx(1.5 * 2.0 * 5.0 ** (-0.25))


# ---------------------------------------------------------------- Upsilon


def test_upsilon_single_node_is_sigma():
    model = model_from_spec("tanh", N=2, k=2, d=2)
    y = np.array([0.3, -1.2])
    for mu in (1, 2):
        np.testing.assert_allclose(upsilon(model, node(mu), y), model.sigma(y)[:, mu - 1])


def test_upsilon_identity_sigma():
    model = model_from_spec("linear", N=3)
    y = np.array([1.7])
    assert upsilon(model, T(1, b1), y)[0] == pytest.approx(1.7)
    assert upsilon(model, T(1, b1, b1), y)[0] == 0.0


def test_upsilon_mixed_example():
    # Upsilon_l[b_k [b_k]_i] = D^2 sigma_l [sigma_k, D sigma_i sigma_k]
    model = model_from_spec("sine", N=4, k=2, d=2, seed=11)
    y = np.array([0.4, 0.9])
    k_, i_, l_ = 1, 2, 2
    sk = model.sigma(y)[:, k_ - 1]
    inner = model.dtensor(1, i_, y) @ sk
    expect = np.einsum("aij,i,j->a", model.dtensor(2, l_, y), sk, inner)
    got = upsilon(model, T(l_, node(k_), T(i_, node(k_))), y)
    np.testing.assert_allclose(got, expect, rtol=1e-13)


def test_upsilon_order_guard():
    model = model_from_spec("tanh", N=2)
    with pytest.raises(ValueError):
        upsilon(model, T(1, T(1, b1)), np.zeros(1))


def test_upsilon_all_matches_single():
    model = model_from_spec("tanh", N=3, k=2, d=2)
    y = np.array([0.2, -0.5])
    trees = enumerate_trees(2, 3)
    allv = upsilon_all(model, trees, y)
    for h in trees:
        np.testing.assert_array_equal(allv[h], upsilon(model, h, y))


def test_bold_upsilon():
    model = model_from_spec("sine", N=3, k=2, d=2, seed=1)
    y = np.array([0.1, 0.2])
    h = T(1, b2, b2)
    np.testing.assert_allclose(bold_upsilon(model, h, y), upsilon(model, h, y) / 2)
    np.testing.assert_allclose(bold_upsilon(model, ONE, y, mu=2), model.sigma(y)[:, 1])
    with pytest.raises(ValueError):
        bold_upsilon(model, ONE, y)
    vec = bold_upsilon_vector(model, y)
    assert set(vec) == set(enumerate_trees(2, 2))


def test_upsilon_batched():
    model = model_from_spec("tanh", N=3, k=2, d=1)
    ys = np.random.default_rng(1).normal(size=(4, 2))
    h = T(1, b1, T(1))
    batch = upsilon(model, h, ys)
    for y, v in zip(ys, batch):
        np.testing.assert_allclose(v, upsilon(model, h, y), rtol=1e-14)


# ---------------------------------------------------------------- derivatives


@pytest.mark.parametrize("kind,k,d", [("tanh", 2, 2), ("sine", 2, 1), ("power_bracket", 1, 1)])
def test_upsilon_derivative_finite_difference(kind, k, d):
    model = model_from_spec(kind, N=3, k=k, d=d)
    rng = np.random.default_rng(5)
    y = rng.normal(size=k)
    step = 1e-5
    for h in enumerate_trees(d, 2):
        for p in range(1, model.N - h.order + 2):
            dirs = list(rng.normal(size=(p, k)))
            exact = upsilon_derivative(model, h, p, y, dirs)
            lower = lambda z: upsilon_derivative(model, h, p - 1, z, dirs[1:])
            fd = (lower(y + step * dirs[0]) - lower(y - step * dirs[0])) / (2 * step)
            assert np.linalg.norm(exact - fd) <= 1e-6 * max(1.0, np.linalg.norm(exact))


def test_upsilon_derivative_p0():
    model = model_from_spec("tanh", N=2, k=2, d=2)
    y = np.array([1.0, 2.0])
    h = T(2, b1)
    np.testing.assert_allclose(upsilon_derivative(model, h, 0, y, []), upsilon(model, h, y))


def test_upsilon_derivative_range():
    model = model_from_spec("tanh", N=2)
    with pytest.raises(ValueError):
        upsilon_derivative(model, T(1, b1), 2, np.zeros(1), [np.ones(1)] * 2)
    with pytest.raises(ValueError):
        upsilon_derivative(model, b1, 1, np.zeros(1), [])


def test_derivative_tensor_symmetric():
    model = model_from_spec("sine", N=4, k=2, d=1, seed=4)
    D = upsilon_derivative_tensor(model, T(1, b1), 2, np.array([0.3, 0.1]))
    np.testing.assert_allclose(D, D.transpose(0, 2, 1), atol=1e-14)


def _ups_vector(model, vec, mu, y):
    out = 0.0
    for g, c in vec.items():
        out = out + c * upsilon(model, Tree(mu, g.trees), y)
    return out


@pytest.mark.parametrize("kind,k,d", [("polynomial", 1, 1), ("sine", 2, 2)])
def test_grafting_compatibility(kind, k, d):
    # Upsilon_mu[ft -> f] = D^{#ft} Upsilon_mu[f][(Upsilon[h])_{h in ft}]
    N = 5
    model = model_from_spec(kind, N=N, k=k, d=d)
    y = np.full(k, 0.37)
    forests = enumerate_forests(d, 3)
    checked = 0
    for ft in forests:
        for f in forests:
            if ft.order + f.order > N - 1:
                continue
            for mu in range(1, d + 1):
                lhs = _ups_vector(model, graft(ft, f), mu, y)
                dirs = [upsilon(model, h, y) for h in ft.trees]
                rhs = upsilon_derivative(model, Tree(mu, f.trees), len(dirs), y, dirs)
                assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(1.0, np.linalg.norm(rhs))
                checked += 1
    assert checked > 20


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([t for t in enumerate_trees(2, 3)]))
def test_upsilon_scaling_linear(a, b, h):
    # sigma linear: Upsilon[h] is linear in y, so Upsilon[h](a y) = a Upsilon[h](y)
    A = np.array([[[0.5, -0.2], [0.1, 0.3]], [[0.0, 1.0], [-1.0, 0.2]]])
    model = model_from_spec("linear", N=3, k=2, d=2, A=A)
    y = np.array([1.0, b])
    np.testing.assert_allclose(upsilon(model, h, a * y), a * upsilon(model, h, y), atol=1e-12)


# ---------------------------------------------------------------- growth


def test_growth_constant_sigma():
    model = model_from_spec("constant", N=2, value=np.array([[0.7]]))
    rep = growth_check(model, b1, 0, np.linspace(-5, 5, 11)[:, None])
    assert rep.fitted_constant <= 1.0


def test_growth_power_bracket_finite():
    model = model_from_spec("power_bracket", N=3, gamma=1.2)
    for h in enumerate_trees(1, 3):
        for p in range(0, model.N - h.order + 2):
            reps = growth_sweep(model, h, p)
            vals = [r.fitted_constant for r in reps]
            assert np.all(np.isfinite(vals))
            assert max(vals) / min(vals) < 4


def test_growth_wrong_exponent_drifts():
    # understated growth exponent: the envelope is too small, so constants grow with the grid extent
    model = model_from_spec("power_bracket", N=2, gamma=2.0)
    model.gamma = 1.0
    vals = [r.fitted_constant for r in growth_sweep(model, T(1, b1), 0)]
    assert vals[-1] / vals[0] > 100


def test_growth_sweep_requires_scalar():
    with pytest.raises(ValueError):
        growth_sweep(model_from_spec("tanh", N=2, k=2), b1, 0)


def test_parse_tree_in_upsilon():
    model = model_from_spec("linear", N=3)
    assert upsilon(model, parse_tree("[1:[1:]]"), np.array([2.0]))[0] == pytest.approx(2.0)
