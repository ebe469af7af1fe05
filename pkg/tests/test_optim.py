"""Adam update semantics."""
import numpy as np
import pytest

from beamckm import tensor as T
from beamckm.optim import AdamState, adam_step, zero_grads


def make_param(values):
    return T.TensorNode(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_zero_gradient_leaves_params_unchanged():
    p = make_param([1.0, -2.0, 3.0])
    state = AdamState.for_params([p], lr=1e-3)
    before = p.values.copy()
    for _ in range(5):
        p.grad = np.zeros_like(p.values)
        adam_step([p], state)
    np.testing.assert_array_equal(p.values, before)
    assert state.step_count == 5


def test_first_step_matches_hand_evaluated_recurrences():
    # m1=(1-b1)g, v1=(1-b2)g^2; bias correction gives mhat=g, vhat=g^2,
    # so the update is -lr*g/(|g|+eps)
    g = 0.5
    lr = 1e-4
    p = make_param([1.0])
    state = AdamState.for_params([p], lr=lr)
    p.grad = np.array([g])
    adam_step([p], state)
    want = 1.0 - lr * g / (abs(g) + 1e-8)
    assert p.values[0] == pytest.approx(want, rel=1e-12)
    assert p.values[0] - 1.0 == pytest.approx(-1e-4, rel=1e-6)


def test_params_update_independently():
    pa, pb = make_param([0.3]), make_param([-1.2])
    joint = AdamState.for_params([pa, pb], lr=1e-2)
    solo_a = AdamState.for_params([make_param([0.3])], lr=1e-2)
    ga, gb = 0.7, -0.1
    ref_a = make_param([0.3])
    for _ in range(3):
        pa.grad, pb.grad = np.array([ga]), np.array([gb])
        adam_step([pa, pb], joint)
        ref_a.grad = np.array([ga])
        adam_step([ref_a], solo_a)
    assert pa.values[0] == pytest.approx(ref_a.values[0], rel=1e-15)


def test_lr_zero_is_identity():
    p = make_param(np.linspace(-1, 1, 7))
    state = AdamState.for_params([p], lr=0.0)
    before = p.values.copy()
    p.grad = np.ones_like(p.values)
    adam_step([p], state)
    np.testing.assert_array_equal(p.values, before)


def test_missing_grad_raises():
    p = make_param([1.0])
    state = AdamState.for_params([p])
    with pytest.raises(ValueError):
        adam_step([p], state)


def test_grads_left_untouched_and_zero_grads():
    p = make_param([2.0])
    state = AdamState.for_params([p])
    p.grad = np.array([0.25])
    adam_step([p], state)
    np.testing.assert_array_equal(p.grad, [0.25])
    zero_grads([p])
    assert p.grad is None


def test_state_shape_mismatch_raises():
    p = make_param([1.0, 2.0])
    state = AdamState.for_params([make_param([1.0])])
    p.grad = np.zeros(2)
    with pytest.raises(ValueError):
        adam_step([p], state)
