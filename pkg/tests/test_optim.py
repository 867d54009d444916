import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from morphcl.exceptions import NonFiniteError
from morphcl.schemas import Schedule, ScheduleKind
from morphcl.services.netcore import ParamSet
from morphcl.services.optim import AdamWState, adamw_step, clip_grad, schedule_lr


def _params(*arrays):
    return ParamSet(tuple(np.asarray(a, dtype=np.float64) for a in arrays))


def test_first_step_moves_by_lr_times_sign():
    params = _params([1.0, -2.0, 0.5])
    grads = _params([0.3, -4.0, 1e-3])
    state = AdamWState.fresh(params, weight_decay=0.0)
    new, state = adamw_step(state, params, grads, lr=0.01)
    assert state.step_count == 1
    assert np.allclose(new[0], params[0] - 0.01 * np.sign(grads[0]), atol=1e-6)


def test_weight_decay_is_decoupled():
    params = _params([2.0, -4.0])
    state = AdamWState.fresh(params, weight_decay=0.1)
    new, _ = adamw_step(state, params, params.zeros_like(), lr=0.5)
    assert np.allclose(new[0], params[0] * (1 - 0.5 * 0.1))


def test_non_finite_gradient_rejected():
    params = _params([1.0])
    with pytest.raises(NonFiniteError):
        adamw_step(AdamWState.fresh(params), params, _params([np.nan]), lr=0.1)


def test_bad_betas():
    with pytest.raises(ValueError):
        AdamWState.fresh(_params([1.0]), betas=(1.0, 0.999))


@pytest.mark.parametrize(
    "kind, epoch, expected",
    [
        (ScheduleKind.COSINE, 0, 1e-3),
        (ScheduleKind.COSINE, 100, 1e-5),
        (ScheduleKind.COSINE, 50, 1e-5 + 0.5 * (1e-3 - 1e-5)),
        (ScheduleKind.COSINE, 500, 1e-5),
        (ScheduleKind.CONSTANT, 500, 1e-3),
        (ScheduleKind.LINEAR, 50, 1e-3 + (1e-5 - 1e-3) * 0.5),
        (ScheduleKind.STEP, 25, 1e-3 * 0.5),
        (ScheduleKind.EXPONENTIAL, 2, 1e-3 * 0.25),
    ],
)
def test_schedule_values(kind, epoch, expected):
    schedule = Schedule(kind=kind, eta0=1e-3, eta_min=1e-5, horizon=100, step_size=20, gamma=0.5)
    assert schedule_lr(schedule, epoch) == pytest.approx(expected)


def test_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        schedule_lr(Schedule(), -1)


@given(
    st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1, max_size=12),
    st.floats(min_value=1e-3, max_value=10.0),
)
def test_clip_grad_bounds_norm_and_is_idempotent(values, max_norm):
    grads = _params(values)
    clipped = clip_grad(grads, max_norm)
    assert clipped.global_norm() <= max_norm * (1 + 1e-9)
    again = clip_grad(clipped, max_norm)
    assert np.allclose(again.flat(), clipped.flat())
    if grads.global_norm() <= max_norm:
        assert clipped is grads


def test_unit_gradient_first_step_is_minus_lr():
    params = _params([0.0, 3.0])
    state = AdamWState.fresh(params, weight_decay=0.0)
    new, _ = adamw_step(state, params, _params([1.0, 1.0]), lr=0.1)
    assert np.allclose(new[0] - params[0], [-0.1, -0.1], rtol=0, atol=1e-8)
