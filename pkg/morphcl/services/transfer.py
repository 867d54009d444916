"""Low-rank weight transfer between architectures: V = A W B^T with the core W frozen."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from morphcl.exceptions import ShapeMismatchError, TransferPlanError
from morphcl.schemas import Architecture, LossKind
from morphcl.services.netcore import Network, ParamSet, as_matrix, forward, loss, value_and_grad
from morphcl.services.optim import AdamWState, adamw_step

logger = logging.getLogger(__name__)

NOISE_SCALE = 0.01


# --- Plans ---
@dataclass(frozen=True)
class LayerPlan:
    a_rows: int  # new out
    a_cols: int  # old out
    b_rows: int  # new in
    b_cols: int  # old in

    @property
    def a_shape(self) -> tuple[int, int]:
        return (self.a_rows, self.a_cols)

    @property
    def b_shape(self) -> tuple[int, int]:
        return (self.b_rows, self.b_cols)

    @property
    def old_shape(self) -> tuple[int, int]:
        return (self.a_cols, self.b_cols)

    @property
    def new_shape(self) -> tuple[int, int]:
        return (self.a_rows, self.b_rows)


@dataclass(frozen=True)
class FilterPlan:
    k_new: int
    k_old: int

    @property
    def a_shape(self) -> tuple[int, int]:
        return (self.k_new, self.k_old)

    @property
    def b_shape(self) -> tuple[int, int]:
        return (self.k_new, self.k_old)


@dataclass(frozen=True)
class TransferPlan:
    layers: tuple[LayerPlan, ...]
    filter: Optional[FilterPlan] = None

    @property
    def is_identity(self) -> bool:
        return all(p.a_rows == p.a_cols and p.b_rows == p.b_cols for p in self.layers)


def plan_ffn_shapes(old: Architecture, new: Architecture, *, allow_input_change: bool = False) -> TransferPlan:
    if old.depth != new.depth:
        raise TransferPlanError(f"depth differs: {old} has {old.depth} layers, {new} has {new.depth}")
    if old.widths[-1] != new.widths[-1]:
        raise TransferPlanError(f"output width changed from {old.widths[-1]} to {new.widths[-1]}")
    if not allow_input_change and old.widths[0] != new.widths[0]:
        raise TransferPlanError(f"input width changed from {old.widths[0]} to {new.widths[0]}")
    layers = tuple(
        LayerPlan(a_rows=n_out, a_cols=o_out, b_rows=n_in, b_cols=o_in)
        for (o_out, o_in), (n_out, n_in) in zip(old.layer_dims(), new.layer_dims())
    )
    return TransferPlan(layers=layers)


def plan_conv_shapes(k_old: int, k_new: int) -> FilterPlan:
    if k_old < 1 or k_new < 1:
        raise TransferPlanError(f"filter sides must be >= 1, got {k_old} -> {k_new}")
    return FilterPlan(k_new=k_new, k_old=k_old)


def plan_cnn_shapes(old_feed: Architecture, new_feed: Architecture, k_old: int, k_new: int) -> TransferPlan:
    """Filter plan plus the dense plan for a feed whose flattened input width may change"""
    dense = plan_ffn_shapes(old_feed, new_feed, allow_input_change=True)
    return TransferPlan(layers=dense.layers, filter=plan_conv_shapes(k_old, k_new))


# --- A/B pairs ---
@dataclass(frozen=True)
class TransferPair:
    A: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    plan: TransferPlan

    def params(self) -> ParamSet:
        tensors: list[np.ndarray] = []
        for a, b in zip(self.A, self.B):
            tensors.extend((a, b))
        return ParamSet(tuple(tensors))

    def with_params(self, params: ParamSet) -> "TransferPair":
        self.params().check_compatible(params)
        return TransferPair(A=tuple(params.tensors[0::2]), B=tuple(params.tensors[1::2]), plan=self.plan)


def identity_like(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Exact identity when square; otherwise a top-left identity block over small Glorot noise"""
    if rows == cols:
        return np.eye(rows)
    limit = np.sqrt(6.0 / (rows + cols))
    out = NOISE_SCALE * rng.uniform(-limit, limit, size=(rows, cols))
    k = min(rows, cols)
    out[:k, :k] = np.eye(k)
    return out


def init_ab(plan: TransferPlan, seed) -> TransferPair:
    rng = np.random.default_rng(seed)
    A, B = [], []
    for p in plan.layers:
        A.append(identity_like(*p.a_shape, rng))
        B.append(identity_like(*p.b_shape, rng))
    return TransferPair(A=tuple(A), B=tuple(B), plan=plan)


def init_filter_ab(plan: FilterPlan, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return identity_like(*plan.a_shape, rng), identity_like(*plan.b_shape, rng)


def transfer_filters(A: np.ndarray, B: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """A K B^T for every (out-channel, in-channel) slice of an (out, in, k, k) kernel tensor"""
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[2] != A.shape[1] or kernels.shape[3] != B.shape[1]:
        raise ShapeMismatchError(f"kernel tensor {kernels.shape} does not fit A {A.shape} / B {B.shape}")
    return np.einsum("ij,ocjk,lk->ocil", A, kernels, B)


def _check_pair(pair: TransferPair, net_old: Network, new_arch: Architecture) -> None:
    if len(pair.A) != len(net_old.layers):
        raise ShapeMismatchError(f"pair has {len(pair.A)} layers, network has {len(net_old.layers)}")
    for i, (a, b, layer, (n_out, n_in)) in enumerate(zip(pair.A, pair.B, net_old.layers, new_arch.layer_dims())):
        o_out, o_in = layer.weight.shape
        if a.shape != (n_out, o_out) or b.shape != (n_in, o_in):
            raise ShapeMismatchError(
                f"layer {i}: A {a.shape} / B {b.shape} cannot map {(o_out, o_in)} to {(n_out, n_in)}"
            )


def apply_transfer(pair: TransferPair, net_old: Network, new_arch: Architecture) -> Network:
    _check_pair(pair, net_old, new_arch)
    weights = [a @ layer.weight @ b.T for a, b, layer in zip(pair.A, pair.B, net_old.layers)]
    biases = [a @ layer.bias for a, layer in zip(pair.A, net_old.layers)]
    return Network.from_arrays(new_arch, net_old.activation, weights, biases)


def transfer_norm(net: Network) -> float:
    """Sum of Frobenius norms of the transferred weights"""
    return float(sum(np.linalg.norm(w) for w in net.weights))


def ab_value_and_grad(
    src: Network, pair: TransferPair, new_arch: Architecture, x, y, kind: LossKind
) -> tuple[float, ParamSet]:
    """Loss of the transferred network and its gradient w.r.t. (A0, B0, A1, B1, ...)"""
    target = apply_transfer(pair, src, new_arch)
    value, g = value_and_grad(target, x, y, kind)
    grads: list[np.ndarray] = []
    for i, (a, b, layer) in enumerate(zip(pair.A, pair.B, src.layers)):
        g_v, g_b = g[2 * i], g[2 * i + 1]
        grads.append(g_v @ b @ layer.weight.T + np.outer(g_b, layer.bias))
        grads.append(g_v.T @ a @ layer.weight)
    return value, ParamSet(tuple(grads))


def ab_grad_check(
    src: Network, pair: TransferPair, new_arch: Architecture, x, y, kind: LossKind, h: float = 1e-6
) -> float:
    """Max relative error of the A/B gradient against central differences"""
    _, analytic = ab_value_and_grad(src, pair, new_arch, x, y, kind)
    params = pair.params()
    worst = 0.0
    for k, tensor in enumerate(params.tensors):
        for idx in np.ndindex(tensor.shape):
            plus = [np.array(t) for t in params.tensors]
            minus = [np.array(t) for t in params.tensors]
            plus[k][idx] += h
            minus[k][idx] -= h
            lp = loss(forward(apply_transfer(pair.with_params(ParamSet(tuple(plus))), src, new_arch), x), y, kind)
            lm = loss(forward(apply_transfer(pair.with_params(ParamSet(tuple(minus))), src, new_arch), x), y, kind)
            fd = (lp - lm) / (2.0 * h)
            an = analytic[k][idx]
            worst = max(worst, abs(an - fd) / (abs(an) + abs(fd) + 1e-12))
    return worst


@dataclass(frozen=True)
class TrainABResult:
    pair: TransferPair
    pre_loss: float
    post_loss: float
    diverged: bool = False
    best_epoch: int = 0


def _fit_rows(x, y, max_rows: int, seed) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(x, "transfer inputs")
    y = as_matrix(y, "transfer targets")
    if x.shape[0] > max_rows:
        idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], size=max_rows, replace=False))
        x, y = x[idx], y[idx]
    return x, y


def train_ab(
    src: Network,
    pair: TransferPair,
    new_arch: Architecture,
    x,
    y,
    n_epochs: int,
    lr: float,
    seed,
    *,
    kind: LossKind = LossKind.MSE,
    max_rows: int = 1024,
    batch_size: Optional[int] = None,
) -> TrainABResult:
    """Adam on A and B only, one pass of shuffled minibatches per epoch

    Returns the best pair seen at an epoch end, the starting pair included. batch_size None
    trains full-batch.
    """
    if n_epochs < 0:
        raise ValueError(f"n_epochs must be >= 0, got {n_epochs}")
    if batch_size is not None and batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    x, y = _fit_rows(x, y, max_rows, seed)
    best_pair = pair
    best_loss = pre_loss = loss(forward(apply_transfer(pair, src, new_arch), x), y, kind)
    best_epoch, diverged = 0, False
    if n_epochs == 0:
        return TrainABResult(pair=pair, pre_loss=pre_loss, post_loss=pre_loss)

    n = x.shape[0]
    size = n if batch_size is None else min(batch_size, n)
    rng = np.random.default_rng([np.random.SeedSequence(seed).generate_state(1)[0], 0xAB])
    state = AdamWState.fresh(pair.params(), weight_decay=0.0)
    current = pair
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, n_epochs + 1):
            order = rng.permutation(n) if size < n else np.arange(n)
            for start in range(0, n, size):
                idx = order[start:start + size]
                _, grads = ab_value_and_grad(src, current, new_arch, x[idx], y[idx], kind)
                if not grads.is_finite():
                    diverged = True
                    break
                params, state = adamw_step(state, current.params(), grads, lr)
                if not params.is_finite():
                    diverged = True
                    break
                current = current.with_params(params)
            if diverged:
                break
            value = loss(forward(apply_transfer(current, src, new_arch), x), y, kind)
            if not np.isfinite(value):
                diverged = True
                break
            if value < best_loss:
                best_pair, best_loss, best_epoch = current, value, epoch

    if diverged:
        logger.warning("A/B training diverged; keeping the pair from epoch %d", best_epoch)
    logger.debug("A/B training kept epoch %d of %d (loss %.6g -> %.6g)", best_epoch, n_epochs, pre_loss, best_loss)
    return TrainABResult(pair=best_pair, pre_loss=pre_loss, post_loss=best_loss, diverged=diverged, best_epoch=best_epoch)


@dataclass(frozen=True)
class MorphResult:
    net: Network
    pre_loss: float  # old network, old architecture
    post_loss: float  # transferred network
    n_ab: int
    transfer_norm: float
    diverged: bool = False

    @property
    def loss_gap(self) -> float:
        return self.post_loss - self.pre_loss


def morph(
    net: Network,
    new_arch: Architecture,
    x,
    y,
    *,
    n_epochs: int,
    lr: float,
    seed,
    kind: LossKind = LossKind.MSE,
    max_rows: int = 1024,
    batch_size: Optional[int] = None,
) -> MorphResult:
    """plan -> init -> train A/B -> apply; the result lives on new_arch"""
    plan = plan_ffn_shapes(net.arch, new_arch)
    pair = init_ab(plan, seed)
    trained = train_ab(net, pair, new_arch, x, y, n_epochs, lr, seed, kind=kind, max_rows=max_rows, batch_size=batch_size)
    new_net = apply_transfer(trained.pair, net, new_arch)
    xs, ys = _fit_rows(x, y, max_rows, seed)
    pre = loss(forward(net, xs), ys, kind)
    logger.info("morphed %s -> %s (A/B loss %.6g -> %.6g)", net.arch, new_arch, trained.pre_loss, trained.post_loss)
    return MorphResult(
        net=new_net,
        pre_loss=pre,
        post_loss=trained.post_loss,
        n_ab=n_epochs,
        transfer_norm=transfer_norm(new_net),
        diverged=trained.diverged,
    )
