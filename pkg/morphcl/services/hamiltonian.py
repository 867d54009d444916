"""Hamiltonian gradient: current-task, replay and perturbation terms blended by (alpha, beta, gamma)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from morphcl.exceptions import NonFiniteError
from morphcl.schemas import GradWeights, LossKind
from morphcl.services.netcore import Gradients, Network, value_and_grad
from morphcl.services.optim import AdamWState, adamw_step, clip_grad

Batch = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class HamiltonianStep:
    grads: Gradients
    loss: float
    current_loss: float
    current_grads: Gradients
    replay_loss: Optional[float] = None
    perturbation: float = 0.0


def perturbation_term(
    net: Network, batch: Batch, var_x: float, var_w: float, t: int, kind: LossKind, seed
) -> tuple[float, Gradients]:
    """Loss change and its gradient under one Gaussian draw on inputs and weights, divided by t+1"""
    if var_x < 0.0 or var_w < 0.0:
        raise ValueError(f"perturbation variances must be >= 0, got {var_x}, {var_w}")
    params = net.params()
    if var_x == 0.0 and var_w == 0.0:
        return 0.0, params.zeros_like()

    x, y = batch
    rng = np.random.default_rng(seed)
    noisy_x = x + rng.normal(0.0, np.sqrt(var_x), size=x.shape)
    noisy = params.map(lambda p: p + rng.normal(0.0, np.sqrt(var_w), size=p.shape))
    value_p, grads_p = value_and_grad(net.with_params(noisy), noisy_x, y, kind)
    value_0, grads_0 = value_and_grad(net, x, y, kind)
    scale = 1.0 / (t + 1)
    return (value_p - value_0) * scale, (grads_p - grads_0).scale(scale)


def perturbation_grad(net: Network, batch: Batch, var_x: float, var_w: float, t: int, kind: LossKind, seed) -> Gradients:
    return perturbation_term(net, batch, var_x, var_w, t, kind, seed)[1]


def hamiltonian_step(
    net: Network,
    batch_c: Batch,
    batch_e: Optional[Batch],
    w: GradWeights,
    t: int,
    kind: LossKind,
    var_x: float,
    var_w: float,
    seed,
) -> HamiltonianStep:
    current_loss, grads_c = value_and_grad(net, *batch_c, kind)
    grads = grads_c.scale(w.alpha)
    total = w.alpha * current_loss

    replay_loss = None
    if t > 0 and batch_e is not None and len(batch_e[0]) > 0:
        replay_loss, grads_e = value_and_grad(net, *batch_e, kind)
        if w.beta > 0.0:
            grads = grads + grads_e.scale(w.beta)
            total += w.beta * replay_loss

    perturbation = 0.0
    if w.gamma > 0.0:
        perturbation, grads_p = perturbation_term(net, batch_c, var_x, var_w, t, kind, seed)
        grads = grads + grads_p.scale(w.gamma)
        total += w.gamma * perturbation

    return HamiltonianStep(grads, total, current_loss, grads_c, replay_loss, perturbation)


def hamiltonian_grad(
    net: Network,
    batch_c: Batch,
    batch_e: Optional[Batch],
    w: GradWeights,
    t: int,
    kind: LossKind,
    var_x: float,
    var_w: float,
    seed,
) -> Gradients:
    return hamiltonian_step(net, batch_c, batch_e, w, t, kind, var_x, var_w, seed).grads


def train_constant(
    net: Network,
    batch_c: Batch,
    batch_e: Optional[Batch],
    w: GradWeights,
    t: int,
    kind: LossKind,
    n_epochs: int,
    lr: float,
    seed,
    *,
    var_x: float = 0.0,
    var_w: float = 0.0,
    clip_norm: float = 1.0,
    weight_decay: float = 0.01,
) -> Network:
    """Fixed batches, constant learning rate, one clipped AdamW step on the Hamiltonian gradient per epoch"""
    if n_epochs < 0:
        raise ValueError(f"n_epochs must be >= 0, got {n_epochs}")
    base = int(np.random.SeedSequence(seed).generate_state(1)[0])
    state = AdamWState.fresh(net.params(), weight_decay=weight_decay)
    for epoch in range(n_epochs):
        step = hamiltonian_step(net, batch_c, batch_e, w, t, kind, var_x, var_w, [base, epoch])
        params, state = adamw_step(state, net.params(), clip_grad(step.grads, clip_norm), lr)
        if not params.is_finite():
            raise NonFiniteError(f"parameters left the finite range at epoch {epoch}")
        net = net.with_params(params)
    return net
