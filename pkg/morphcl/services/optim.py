from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from morphcl.exceptions import NonFiniteError
from morphcl.schemas import Schedule, ScheduleKind
from morphcl.services.netcore import Gradients, ParamSet


@dataclass(frozen=True)
class AdamWState:
    m: ParamSet
    v: ParamSet
    step_count: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def fresh(
        cls,
        params: ParamSet,
        *,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ) -> "AdamWState":
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"invalid betas: {betas}")
        return cls(m=params.zeros_like(), v=params.zeros_like(), betas=(b1, b2), eps=eps, weight_decay=weight_decay)


def adamw_step(state: AdamWState, params: ParamSet, grads: Gradients, lr: float) -> tuple[ParamSet, AdamWState]:
    """One AdamW step with bias correction and decoupled weight decay"""
    if lr <= 0.0:
        raise ValueError(f"lr must be > 0, got {lr}")
    params.check_compatible(grads)
    state.m.check_compatible(params)
    if not grads.is_finite():
        raise NonFiniteError("gradient contains non-finite entries")

    b1, b2 = state.betas
    t = state.step_count + 1
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t

    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p = p - lr * state.weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p)

    new_state = replace(state, m=ParamSet(tuple(new_m)), v=ParamSet(tuple(new_v)), step_count=t)
    return ParamSet(tuple(new_p)), new_state


def schedule_lr(schedule: Schedule, epoch: int) -> float:
    """Learning rate at `epoch`; past the horizon every decaying schedule sits at eta_min"""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    eta0, eta_min, horizon = schedule.eta0, schedule.eta_min, schedule.horizon
    kind = schedule.kind

    if kind is ScheduleKind.CONSTANT:
        return eta0
    if epoch > horizon:
        return eta_min
    if kind is ScheduleKind.COSINE:
        return eta_min + 0.5 * (eta0 - eta_min) * (1.0 + math.cos(math.pi * epoch / horizon))
    if kind is ScheduleKind.LINEAR:
        return eta0 + (eta_min - eta0) * epoch / horizon
    if kind is ScheduleKind.STEP:
        return max(eta_min, eta0 * schedule.gamma ** (epoch // schedule.step_size))
    if kind is ScheduleKind.EXPONENTIAL:
        return max(eta_min, eta0 * schedule.gamma**epoch)
    raise ValueError(f"unknown schedule kind {kind}")


def clip_grad(grads: Gradients, max_norm: float) -> Gradients:
    if max_norm <= 0.0:
        raise ValueError(f"max_norm must be > 0, got {max_norm}")
    norm = grads.global_norm()
    if norm <= max_norm:
        return grads
    return grads.scale(max_norm / norm)
