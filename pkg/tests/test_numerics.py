from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shortcutbench import numerics as nx

from conftest import fd_grads, tape_grads

floats = st.floats(-3, 3, allow_nan=False, width=32)


def matrices(rows, cols):
    return hnp.arrays(np.float32, (rows, cols), elements=floats)


# -- tape semantics -------------------------------------------------------------


def test_ops_outside_tape_record_nothing():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    y = nx.mul(x, x)
    assert not y.requires_grad


def test_constants_are_not_recorded():
    a, b = nx.Tensor([1.0]), nx.Tensor([2.0])
    with nx.Tape() as tape:
        nx.add(a, b)
    assert tape.nodes == []


def test_backward_twice_raises():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    with nx.Tape() as tape:
        y = nx.sum(nx.mul(x, x))
    tape.backward(y)
    with pytest.raises(nx.GradientError):
        tape.backward(y)


def test_non_scalar_loss_raises():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    with nx.Tape() as tape:
        y = nx.mul(x, x)
    with pytest.raises(nx.GradientError):
        tape.backward(y)


def test_populated_grad_is_not_accumulated():
    x = nx.Tensor([1.0], requires_grad=True)
    for expect_error in (False, True):
        with nx.Tape() as tape:
            y = nx.sum(nx.scale(x, 3.0))
        if expect_error:
            with pytest.raises(nx.GradientError):
                tape.backward(y)
        else:
            tape.backward(y)
            np.testing.assert_allclose(x.grad, [3.0])


def test_unreachable_leaf_gets_zero_grad():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    w = nx.Tensor([5.0, 6.0], requires_grad=True)
    with nx.Tape() as tape:
        nx.mul(w, w)  # recorded but not part of the loss
        y = nx.sum(x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    assert w.grad is not None and not w.grad.any()


def test_loss_from_other_tape_rejected():
    x = nx.Tensor([1.0], requires_grad=True)
    with nx.Tape():
        y = nx.sum(x)
    with nx.Tape() as other:
        pass
    with pytest.raises(nx.GradientError):
        other.backward(y)


def test_reused_input_accumulates_within_one_backward():
    _, (g,), _ = tape_grads(lambda x: nx.sum(nx.add(nx.mul(x, x), x)), np.array([2.0, -1.0]))
    np.testing.assert_allclose(g, [5.0, -1.0])


def test_non_finite_raises():
    with pytest.raises(FloatingPointError):
        nx.log(nx.Tensor([0.0]))


def test_float32_everywhere():
    x = nx.Tensor(np.arange(3, dtype=np.float64))
    assert x.data.dtype == np.float32
    assert nx.exp(x).data.dtype == np.float32


# -- hand-derived gradients -------------------------------------------------------


def test_relu_subgradient_at_zero_is_zero():
    _, (g,), _ = tape_grads(lambda x: nx.sum(nx.relu(x)), np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_sqrt_gradient_at_zero_is_zero():
    _, (g,), _ = tape_grads(lambda x: nx.sum(nx.sqrt(x)), np.array([0.0, 4.0]))
    np.testing.assert_allclose(g, [0.0, 0.25])


def test_cross_entropy_uniform_logits():
    y = nx.one_hot(np.array([0, 1, 1]))
    out, (g,), _ = tape_grads(lambda l: nx.softmax_cross_entropy(l, y), np.zeros((3, 2)))
    assert out.item() == pytest.approx(np.log(2), abs=1e-7)
    np.testing.assert_allclose(g, (0.5 - y) / 3, atol=1e-7)


def test_cross_entropy_rejects_soft_targets():
    with pytest.raises(ValueError):
        nx.softmax_cross_entropy(nx.Tensor(np.zeros((1, 2))), np.array([[0.5, 0.5]]))


def test_cross_entropy_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.softmax_cross_entropy(nx.Tensor(np.zeros((2, 2))), nx.one_hot(np.array([0, 1, 1])))


def test_logmeanexp_is_stable_for_large_inputs():
    out = nx.logmeanexp(nx.Tensor([1000.0, 1000.0]))
    assert out.item() == pytest.approx(1000.0)


def test_grad_reverse_identity_forward_negated_backward():
    x = np.array([[1.0, -2.0]])
    out, (g,), _ = tape_grads(lambda t: nx.sum(nx.grad_reverse(t, 0.25)), x)
    assert out.item() == pytest.approx(-1.0)
    np.testing.assert_allclose(g, [[-0.25, -0.25]])


def test_grad_reverse_rejects_negative_weight():
    with pytest.raises(ValueError):
        nx.grad_reverse(nx.Tensor([1.0]), -0.1)


def test_mean_axis_gradient():
    _, (g,), _ = tape_grads(lambda x: nx.sum(nx.mean(x, axis=0)), np.ones((4, 3)))
    np.testing.assert_allclose(g, np.full((4, 3), 0.25))


def test_take_rows_scatters_repeats():
    _, (g,), _ = tape_grads(lambda x: nx.sum(nx.take_rows(x, np.array([0, 0, 2]))), np.ones((3, 2)))
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


# -- finite-difference agreement (property tests) ---------------------------------


@settings(max_examples=30, deadline=None)
@given(matrices(3, 4), matrices(4, 2), hnp.arrays(np.float32, (2,), elements=floats))
def test_affine_matches_finite_differences(x, W, b):
    fn = lambda x, W, b: nx.sum(nx.mul(nx.affine(x, W, b), nx.affine(x, W, b)))
    _, grads, ts = tape_grads(fn, x, W, b)
    for g, n in zip(grads, fd_grads(fn, ts, eps=1e-2)):
        np.testing.assert_allclose(g, n, rtol=2e-2, atol=5e-2)


@settings(max_examples=30, deadline=None)
@given(matrices(5, 2))
def test_cross_entropy_matches_finite_differences(logits):
    y = nx.one_hot(np.array([0, 1, 1, 0, 1]))
    fn = lambda l: nx.softmax_cross_entropy(l, y)
    _, (g,), ts = tape_grads(fn, logits)
    (n,) = fd_grads(fn, ts)
    assert nx.max_rel_error(g, n) < 1e-2


@settings(max_examples=30, deadline=None)
@given(matrices(6, 1))
def test_logmeanexp_matches_finite_differences(x):
    _, (g,), ts = tape_grads(nx.logmeanexp, x)
    (n,) = fd_grads(nx.logmeanexp, ts)
    assert nx.max_rel_error(g, n) < 1e-2


@settings(max_examples=30, deadline=None)
@given(matrices(3, 3))
def test_elementwise_chain_matches_finite_differences(x):
    fn = lambda t: nx.sum(nx.div(nx.exp(nx.scale(t, 0.5)), nx.add(nx.mul(t, t), nx.Tensor(1.0))))
    _, (g,), ts = tape_grads(fn, x)
    (n,) = fd_grads(fn, ts)
    assert nx.max_rel_error(g, n) < 1e-2


@settings(max_examples=30, deadline=None)
@given(matrices(3, 5))
def test_slice_concat_roundtrip_gradient(x):
    w = np.arange(15, dtype=np.float32).reshape(3, 5)
    fn = lambda t: nx.sum(nx.mul(nx.concat_cols(nx.slice_cols(t, 0, 2), nx.slice_cols(t, 2, 5)), nx.Tensor(w)))
    out, (g,), _ = tape_grads(fn, x)
    np.testing.assert_allclose(g, w)


@settings(max_examples=30, deadline=None)
@given(matrices(4, 3), st.floats(0, 2))
def test_grad_reverse_scales_any_upstream_gradient(x, lam):
    w = np.linspace(-1, 1, 12, dtype=np.float32).reshape(4, 3)
    _, (g_plain,), _ = tape_grads(lambda t: nx.sum(nx.mul(t, nx.Tensor(w))), x)
    _, (g_rev,), _ = tape_grads(lambda t: nx.sum(nx.mul(nx.grad_reverse(t, lam), nx.Tensor(w))), x)
    np.testing.assert_allclose(g_rev, -np.float32(lam) * g_plain, rtol=1e-6, atol=1e-7)


# -- parameters and optimizers ----------------------------------------------------


def test_glorot_bounds_and_zero_bias(rng):
    ps = nx.ParamSet()
    nx.add_linear(ps, "l", 256, 64, rng)
    bound = np.sqrt(6 / (256 + 64))
    assert np.abs(ps["l.W"].data).max() <= bound
    assert np.abs(ps["l.W"].data).max() > 0.9 * bound
    assert not ps["l.b"].data.any()


def test_duplicate_param_name_rejected():
    ps = nx.ParamSet()
    ps.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        ps.add("w", np.zeros(2))


def test_adam_first_step_moves_by_lr_times_sign():
    ps = nx.ParamSet()
    p = ps.add("w", np.array([1.0, 1.0, 1.0]))
    p.grad = np.array([0.3, -2.0, 1e-3], dtype=np.float32)
    nx.adam_step(ps, nx.OptState("adam"), lr=0.1)
    # bias-corrected m/sqrt(v) equals g/|g| after one step
    np.testing.assert_allclose(p.data, [0.9, 1.1, 0.9], rtol=1e-5)
    assert p.grad is None


def test_adam_two_steps_against_hand_computation():
    ps = nx.ParamSet()
    p = ps.add("w", np.array([0.0]))
    st_ = nx.OptState("adam")
    b1, b2, lr = 0.9, 0.999, 0.01
    m = v = 0.0
    w = 0.0
    for t, g in enumerate((1.0, 3.0), 1):
        p.grad = np.array([g], dtype=np.float32)
        nx.adam_step(ps, st_, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + 1e-8)
    assert p.data[0] == pytest.approx(w, rel=1e-5)


def test_sgd_momentum_hand_computation():
    ps = nx.ParamSet()
    p = ps.add("w", np.array([1.0]))
    st_ = nx.OptState("sgd")
    for g in (1.0, 1.0):
        p.grad = np.array([g], dtype=np.float32)
        nx.sgd_momentum_step(ps, st_, lr=0.1, momentum=0.9)
    # v1 = 1, v2 = 1.9 -> 1 - 0.1 - 0.19
    assert p.data[0] == pytest.approx(0.71, rel=1e-6)


def test_optimizer_refuses_missing_gradients():
    ps = nx.ParamSet()
    ps.add("w", np.zeros(1))
    with pytest.raises(nx.GradientError):
        nx.Optimizer(ps, "adam").step()


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        nx.Optimizer(nx.ParamSet(), "rmsprop")


def test_frozen_views_receive_no_gradient():
    ps = nx.ParamSet()
    w = ps.add("w", np.array([2.0]))
    x = nx.Tensor([3.0], requires_grad=True)
    with nx.Tape() as tape:
        y = nx.sum(nx.mul(x, ps.frozen()["w"]))
    tape.backward(y)
    assert w.grad is None
    np.testing.assert_allclose(x.grad, [2.0])


def test_state_dict_roundtrip_and_mismatch():
    a, b = nx.ParamSet(), nx.ParamSet()
    a.add("w", np.array([1.0, 2.0]))
    b.add("w", np.zeros(2))
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(b["w"].data, [1.0, 2.0])
    c = nx.ParamSet()
    c.add("w", np.zeros(3))
    with pytest.raises(nx.ShapeError):
        c.load_state_dict(a.state_dict())


def test_relu_margin_tracks_smallest_preactivation():
    with nx.relu_margin() as m:
        nx.relu(nx.Tensor([0.5, -0.02, 3.0]))
    assert m.value == pytest.approx(0.02)


def test_precision_context_switches_and_restores_dtype():
    with nx.precision(np.float64):
        t = nx.relu(nx.Tensor([1.0, -2.0]))
        assert t.data.dtype == np.float64
    assert nx.Tensor([1.0]).data.dtype == np.float32
