from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shortcutbench import measures
from shortcutbench import numerics as nx

from conftest import fd_grads, tape_grads


def naive_dcor(x: np.ndarray, y: np.ndarray) -> float:
    """Textbook double loops in float64, written independently of the package."""
    x = np.asarray(x, float).reshape(len(x), -1)
    y = np.asarray(y, float).reshape(len(y), -1)
    n = len(x)

    def centred(z):
        d = [[math.dist(z[i], z[j]) for j in range(n)] for i in range(n)]
        row = [sum(r) / n for r in d]
        grand = sum(row) / n
        return [[d[i][j] - row[i] - row[j] + grand for j in range(n)] for i in range(n)]

    a, b = centred(x), centred(y)
    v = lambda p, q: sum(p[i][j] * q[i][j] for i in range(n) for j in range(n)) / n**2
    return math.sqrt(max(v(a, b), 0.0) / math.sqrt(v(a, a) * v(b, b)))


samples = hnp.arrays(np.float64, st.tuples(st.integers(5, 12), st.just(2)),
                     elements=st.floats(-5, 5, allow_nan=False))


def spread(z):
    return np.ptp(z, axis=0).min() > 0.5


# -- hand cases ---------------------------------------------------------------------


def test_self_dcor_is_one(rng):
    z = rng.normal(size=(60, 2))
    assert measures.dcor(z, z).item() == pytest.approx(1.0, abs=1e-6)


def test_affine_image_has_dcor_one(rng):
    z = rng.normal(size=(40, 2))
    assert measures.dcor(z, 2 * z + 1).item() == pytest.approx(1.0, abs=1e-6)


def test_two_samples_give_exactly_one():
    assert measures.dcor([[0.0], [3.0]], [[1.0], [5.0]]).item() == 1.0


def test_double_center_hand_case():
    out = measures.double_center(nx.Tensor([[0.0, 2.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(out.data, [[-1, 1], [1, -1]])


def test_double_center_rows_and_columns_sum_to_zero(rng):
    z = rng.normal(size=(9, 3))
    c = measures.centered_distances(z).data
    np.testing.assert_allclose(c.sum(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(c.sum(axis=1), 0, atol=1e-5)


def test_double_center_rejects_asymmetric():
    with pytest.raises(ValueError):
        measures.double_center(nx.Tensor([[0.0, 1.0], [2.0, 0.0]]))


def test_dcov_two_samples_closed_form():
    # with N=2 every centred entry is +-d/2, so dCov = |x1-x2||y1-y2| / 2
    e, f = 3.0, 4.0
    assert measures.dcov([[0.0], [e]], [[0.0], [f]]).item() == pytest.approx(math.sqrt(e * f) / 2)


def test_factorial_design_has_zero_dcov_and_zero_gradient():
    a = np.array([0.0, 0.0, 1.0, 1.0])
    b = np.array([0.0, 1.0, 0.0, 1.0])
    out, grads, _ = tape_grads(measures.dcor, a, b)
    assert out.item() == 0.0
    for g in grads:
        assert not g.any()


def test_constant_subspace_is_degenerate(rng):
    with pytest.raises(measures.DegenerateInputError):
        measures.dcor(np.ones((10, 2)), rng.normal(size=(10, 2)))


def test_single_sample_is_degenerate():
    with pytest.raises(measures.DegenerateInputError):
        measures.dcor([[1.0]], [[2.0]])


def test_row_mismatch(rng):
    with pytest.raises(nx.ShapeError):
        measures.dcor(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)))


def test_negative_dcov_beyond_tolerance_fails():
    A = nx.Tensor(np.eye(2))
    with pytest.raises(measures.NumericalFailure):
        measures._dcov_sq(A, nx.Tensor(-np.eye(2)))


def test_matches_independent_oracle(rng):
    for _ in range(5):
        x = rng.normal(size=(15, 2))
        y = x[:, :1] ** 2 + 0.3 * rng.normal(size=(15, 1))
        assert measures.dcor(x, y).item() == pytest.approx(naive_dcor(x, y), abs=1e-5)
        assert measures.dcor_value(x, y) == pytest.approx(naive_dcor(x, y), abs=1e-6)  # float32 distances


def test_independent_uniforms_below_permutation_quantile():
    u = np.random.default_rng(11).uniform(size=(1000, 2))
    v = np.random.default_rng(12).uniform(size=(1000, 2))
    observed, null = measures.permutation_null(u, v, 100, seed=0)
    assert observed < 0.1
    assert observed <= np.percentile(null, 99)


def test_permutation_pvalue_detects_dependence(rng):
    x = rng.normal(size=(100, 1))
    assert measures.permutation_independence_pvalue(x, x**2, n_perm=100) == pytest.approx(1 / 101)
    with pytest.raises(ValueError):
        measures.permutation_independence_pvalue(x, x, n_perm=10)


# -- properties ----------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(samples, samples)
def test_dcor_matches_oracle_property(x, y):
    n = min(len(x), len(y))
    x, y = x[:n], y[:n]
    assume(spread(x) and spread(y))
    assert measures.dcor(x, y).item() == pytest.approx(naive_dcor(x, y), abs=1e-4)


@settings(max_examples=25, deadline=None)
@given(samples, st.floats(0.1, 10), st.floats(-5, 5), st.floats(0, 2 * math.pi))
def test_dcor_invariant_to_similarity_transforms(z, s, t, theta):
    assume(spread(z))
    rng = np.random.default_rng(0)
    other = rng.normal(size=z.shape) + z[:, ::-1]
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    base = measures.dcor_value(z, other)
    moved = measures.dcor_value(s * z @ rot + t, other)
    assert moved == pytest.approx(base, abs=1e-6)
    assert measures.dcor_value(other, z) == pytest.approx(base, abs=1e-12)
    assert 0.0 <= base <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(6, 12), st.floats(0.0, 2.0))
def test_dcor_gradient_matches_finite_differences(seed, n, coupling):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = coupling * x[:, ::-1] ** 2 + rng.normal(size=(n, 2))
    out, grads, ts = tape_grads(measures.dcor, x, y)
    assume(0.05 < out.item() < 0.99)
    for g, n_ in zip(grads, fd_grads(measures.dcor, ts, eps=1e-2)):
        assert nx.max_rel_error(g, n_) < 1e-2


# -- mutual information -----------------------------------------------------------------


def test_gaussian_mi_analytic_values():
    assert measures.gaussian_mi_analytic(0.9) == pytest.approx(0.8304, abs=1e-4)
    assert measures.gaussian_mi_analytic(0.0) == 0.0
    with pytest.raises(ValueError):
        measures.gaussian_mi_analytic(1.0)


def test_dv_bound_is_zero_for_constant_statistic(rng):
    net = measures.MineNet(2, 2, seed=0)
    for k, t in net.params.items():
        t.data[...] = 0
    net.params["mine.l2.b"].data[...] = 3.7
    z = rng.normal(size=(50, 2))
    bound = measures.mine_dv_bound(net, nx.Tensor(z), nx.Tensor(z), rng.permutation(50))
    assert bound.item() == pytest.approx(0.0, abs=1e-6)


def test_dv_bound_matches_direct_formula(rng):
    net = measures.MineNet(1, 1, hidden=(8,), seed=3)
    z1, z2 = rng.normal(size=(20, 1)), rng.normal(size=(20, 1))
    perm = rng.permutation(20)
    T = lambda a, b: net.statistic(nx.Tensor(a), nx.Tensor(b)).data.astype(np.float64).ravel()
    expect = T(z1, z2).mean() - np.log(np.mean(np.exp(T(z1, z2[perm]))))
    got = measures.mine_dv_bound(net, nx.Tensor(z1), nx.Tensor(z2), perm).item()
    assert got == pytest.approx(expect, abs=1e-5)


def test_mine_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(100):
        net = measures.MineNet(1, 1, hidden=(6, 6), seed=int(rng.integers(1000)))
        z1, z2 = rng.normal(size=(8, 1)), rng.normal(size=(8, 1))
        perm = rng.permutation(8)
        with nx.relu_margin() as m:
            measures.mine_dv_bound(net, nx.Tensor(z1), nx.Tensor(z2), perm)
        if m.value > 0.02:
            break
    fn = lambda a, b: measures.mine_dv_bound(net, a, b, perm, frozen=True)
    _, grads, ts = tape_grads(fn, z1, z2)
    for g, n_ in zip(grads, fd_grads(fn, ts)):
        assert nx.max_rel_error(g, n_) < 1e-2


def test_frozen_bound_leaves_estimator_untouched(rng):
    net = measures.MineNet(2, 2, seed=0)
    z = nx.Tensor(rng.normal(size=(10, 2)), requires_grad=True)
    with nx.Tape() as tape:
        b = measures.mine_dv_bound(net, z, z, rng.permutation(10), frozen=True)
    tape.backward(b)
    assert all(t.grad is None for t in net.params.values())
    assert z.grad is not None


def test_train_step_leaves_inputs_untouched(rng):
    net = measures.MineNet(2, 2, seed=0)
    z = nx.Tensor(rng.normal(size=(10, 2)), requires_grad=True)
    opt = nx.Optimizer(net.params, "adam", 1e-3)
    before = net.params.state_dict()
    measures.mine_train_step(net, z, z, opt, rng)
    assert z.grad is None
    assert any(not np.array_equal(before[k], net.params[k].data) for k in before)


def test_mine_width_mismatch(rng):
    net = measures.MineNet(2, 2)
    with pytest.raises(nx.ShapeError):
        net.statistic(nx.Tensor(rng.normal(size=(4, 3))), nx.Tensor(rng.normal(size=(4, 2))))
