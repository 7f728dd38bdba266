"""Tape mechanics: recording order, accumulation, and the checker itself."""

import numpy as np
import pytest

from ecc import ops
from ecc.autodiff import Tape, Tensor, accumulate, active_tape, gradient_check


def t64(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_product_plus_term_hand_gradients():
    # z = mean(x*y + x) with scalars: dz/dx = y + 1, dz/dy = x.
    x = t64([2.0])
    y = t64([3.0])
    with Tape() as tape:
        z = ops.mean_all(ops.add(ops.mul(x, y), x))
    tape.backward(z)
    assert z.item() == pytest.approx(8.0)
    np.testing.assert_allclose(x.grad, [4.0], rtol=1e-12)
    np.testing.assert_allclose(y.grad, [2.0], rtol=1e-12)


def test_linear_gradient_is_exact():
    # For z = mean(w * x) the gradient is x / n with no approximation.
    rng = np.random.default_rng(7)
    w = t64(rng.standard_normal(5))
    x = t64(rng.standard_normal(5))
    with Tape() as tape:
        z = ops.mean_all(ops.mul(w, x))
    tape.backward(z)
    np.testing.assert_allclose(w.grad, x.data / 5.0, rtol=0, atol=1e-15)
    np.testing.assert_allclose(x.grad, w.data / 5.0, rtol=0, atol=1e-15)


def test_shared_input_gradients_sum():
    # x feeds two consumers; contributions must add, giving d/dx (x^2 + x) = 2x + 1.
    x = t64([1.5, -0.5])
    with Tape() as tape:
        z = ops.mean_all(ops.add(ops.mul(x, x), x))
    tape.backward(z)
    np.testing.assert_allclose(x.grad, (2.0 * x.data + 1.0) / 2.0, rtol=1e-12)


def test_records_replay_in_reverse_order():
    x = t64([1.0])
    order = []
    with Tape() as tape:
        y = ops.relu(x)
        z = ops.sigmoid(y)
        s = ops.mean_all(z)
        tape.record("probe_a", lambda: order.append("a"))
        tape.record("probe_b", lambda: order.append("b"))
    assert tape.op_names() == ["relu", "sigmoid", "mean_all", "probe_a", "probe_b"]
    tape.backward(s)
    assert order == ["b", "a"]
    assert x.grad is not None


def test_no_active_tape_records_nothing():
    x = t64([1.0, 2.0])
    assert active_tape() is None
    y = ops.relu(x)
    assert y.grad is None and x.grad is None
    with Tape() as tape:
        ops.relu(x)
        assert len(tape) == 1
    assert active_tape() is None


def test_branch_not_reaching_loss_keeps_grad_none():
    x = t64([1.0])
    y = t64([2.0])
    with Tape() as tape:
        ops.sigmoid(x)  # dead branch
        z = ops.mean_all(ops.mul(y, y))
    tape.backward(z)
    assert x.grad is None
    np.testing.assert_allclose(y.grad, [4.0], rtol=1e-12)


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0])
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_accumulate_copies_views():
    base = np.ones((2, 4))
    x = Tensor(np.zeros(4), requires_grad=True)
    accumulate(x, base[0])
    x.grad += 1.0
    np.testing.assert_array_equal(base[0], np.ones(4))


def test_gradient_check_passes_on_correct_composite():
    rng = np.random.default_rng(3)
    inputs = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}

    def fn(t):
        return ops.mean_all(ops.mul(ops.sigmoid(t["a"]), ops.relu(t["b"])))

    report = gradient_check(
        fn, {k: Tensor(v) for k, v in inputs.items()}, name="composite"
    )
    assert report.passed, report.summary()
    assert report.max_rel_error < 1e-3


def test_gradient_check_flags_wrong_backward():
    # An op whose recorded closure doubles the true gradient must fail.
    def bad_scale(x):
        out = Tensor(x.data * 3.0, requires_grad=True)

        def backward():
            accumulate(x, out.grad * 6.0)  # true factor is 3

        tape = active_tape()
        if tape is not None:
            tape.record("bad_scale", backward)
        return out

    def fn(t):
        return ops.mean_all(bad_scale(t["x"]))

    report = gradient_check(fn, {"x": Tensor(np.ones(3))}, name="bad_scale")
    assert not report.passed
    assert "x" in report.failing_inputs
    assert report.max_rel_error > 0.1
