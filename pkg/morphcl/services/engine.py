"""Per-task training loops for conditions C1-C4."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from morphcl.exceptions import ConfigError, MorphCLError
from morphcl.schemas import (
    Condition,
    EpochRecord,
    EventRecord,
    GradWeights,
    MorphRecord,
    RunConfig,
    Schedule,
    ScheduleKind,
    SearchRecord,
)
from morphcl.services.hamiltonian import Batch, hamiltonian_step
from morphcl.services.netcore import Network, forward, init_network, loss, score
from morphcl.services.optim import AdamWState, adamw_step, clip_grad, schedule_lr
from morphcl.services.replay import ReplayBuffer
from morphcl.services.search import (
    Evaluator,
    candidate_seed,
    evaluate_candidate,
    ndds_search,
    should_change,
    width_ceiling,
)
from morphcl.services.tasks import Dataset, TaskSplit
from morphcl.services.transfer import morph, transfer_norm

logger = logging.getLogger(__name__)

TaskRecord = Union[EpochRecord, SearchRecord, MorphRecord, EventRecord]

# Seed streams
CURRENT, REPLAY, PERTURB, WARMUP, SEARCH, MORPH, INIT, WARMUP_REPLAY, WARMUP_PERTURB = range(9)

MORPH_ROWS = 1024


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def step_seed(run_seed: int, t: int, epoch: int, stream: int) -> int:
    return derive_seed(run_seed, t, epoch, stream)


def sample_batch(ds: Dataset, batch_size: int, seed) -> Batch:
    n = len(ds)
    idx = np.random.default_rng(seed).choice(n, size=batch_size, replace=n < batch_size)
    return ds.x[idx], ds.y[idx]


def sample_replay(buf: ReplayBuffer, batch_size: int, t: int, seed, *, balanced: bool) -> Optional[Batch]:
    """Quota-balanced or uniform replay batch; None before there is anything to replay"""
    if t == 0 or buf.is_empty():
        return None
    rb = buf.sample_balanced(batch_size, t, seed) if balanced else buf.sample_uniform(batch_size, seed)
    return rb.x, rb.y


def adapt_weights(j_curr: float, j_prev: float) -> GradWeights:
    if not j_prev > 0.0 or not np.isfinite(j_curr):
        return GradWeights()
    r = j_curr / j_prev
    alpha = min(0.7, 0.3 + 0.4 * (r - 1.0))
    beta = max(0.2, 0.6 - 0.4 * (r - 1.0))
    return GradWeights(alpha=float(np.clip(alpha, 0.0, 1.0)), beta=float(np.clip(beta, 0.0, 1.0)), gamma=0.1)


# --- Warmup ---
@dataclass
class WarmupResult:
    net: Network
    losses: list[float] = field(default_factory=list)
    hamiltonian: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    lr: float = 0.0


def warmup(
    net: Network,
    train: Dataset,
    n_epochs: int,
    eta0: float,
    cfg: RunConfig,
    *,
    t: int = 0,
    run_seed: int = 0,
    buf: Optional[ReplayBuffer] = None,
    weights: Optional[GradWeights] = None,
) -> WarmupResult:
    """Current-task-only steps at the reduced learning rate

    Each epoch also measures the full Hamiltonian (replay and perturbation included, blended by
    `weights`) so the warmup tail is comparable with the previous task's training tail.
    """
    if n_epochs < 0:
        raise ValueError(f"n_epochs must be >= 0, got {n_epochs}")
    weights = weights or cfg.grad_weights
    lr = cfg.warmup_lr_factor * eta0
    result = WarmupResult(net=net, lr=lr)
    if n_epochs == 0:
        return result
    state = AdamWState.fresh(net.params(), betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    for epoch in range(n_epochs):
        batch_c = sample_batch(train, cfg.batch_size, step_seed(run_seed, t, epoch, WARMUP))
        batch_e = None
        if buf is not None:
            batch_e = sample_replay(buf, cfg.batch_size, t, step_seed(run_seed, t, epoch, WARMUP_REPLAY), balanced=True)
        step = hamiltonian_step(
            result.net, batch_c, batch_e, weights, t, cfg.loss_kind, cfg.sigma_x2, cfg.sigma_w2,
            step_seed(run_seed, t, epoch, WARMUP_PERTURB),
        )
        result.losses.append(step.current_loss)
        result.hamiltonian.append(step.loss)
        result.grad_norms.append(step.current_grads.global_norm())
        params, state = adamw_step(state, result.net.params(), clip_grad(step.current_grads, cfg.clip_norm), lr)
        result.net = result.net.with_params(params)
    return result


# --- Task loop ---
@dataclass
class TaskLog:
    task: int
    records: list[TaskRecord] = field(default_factory=list)
    grad_weights: GradWeights = field(default_factory=GradWeights)
    arch_changed: bool = False

    @property
    def epochs(self) -> list[EpochRecord]:
        return [r for r in self.records if isinstance(r, EpochRecord)]

    @property
    def morphs(self) -> list[MorphRecord]:
        return [r for r in self.records if isinstance(r, MorphRecord)]

    @property
    def search(self) -> list[SearchRecord]:
        return [r for r in self.records if isinstance(r, SearchRecord)]

    def event(self, message: str) -> None:
        logger.info("task %d: %s", self.task, message)
        self.records.append(EventRecord(task=self.task, message=message))

    def tail_mean(self, window: int, attr: str = "hamiltonian_loss") -> Optional[float]:
        rows = [getattr(r, attr) for r in self.epochs if r.phase == "train"][-window:]
        return float(np.mean(rows)) if rows else None


@dataclass
class TaskResult:
    net: Network
    log: TaskLog

    @property
    def arch(self):
        return self.net.arch


def condition_config(cfg: RunConfig, cond: Condition) -> RunConfig:
    """C1 trains at a constant learning rate without warmup"""
    if cond is Condition.C1:
        return cfg.model_copy(update={"warmup_epochs": 0, "schedule": ScheduleKind.CONSTANT})
    return cfg


def search_subset(train: Dataset, buf: ReplayBuffer, size: int, seed) -> tuple[Batch, Optional[Batch]]:
    """Current-task rows and replay rows, half each (all current when the buffer is empty)"""
    rng = np.random.default_rng(seed)
    n_cur = size if buf.is_empty() else max(1, size // 2)
    n_cur = min(n_cur, len(train))
    idx = rng.choice(len(train), size=n_cur, replace=False)
    current = (train.x[idx], train.y[idx])
    if buf.is_empty() or size <= n_cur:
        return current, None
    rb = buf.sample_uniform(size - n_cur, rng.integers(2**32))
    return current, (rb.x, rb.y)


def holdout(batch: Optional[Batch], frac: float) -> tuple[Optional[Batch], Optional[Batch]]:
    """Split already-shuffled rows into (fit, held out); both keep at least one row or nothing is held out"""
    if batch is None:
        return None, None
    n = len(batch[0])
    n_val = int(round(frac * n))
    if n_val == 0 or n_val >= n:
        return batch, None
    x, y = batch
    return (x[: n - n_val], y[: n - n_val]), (x[n - n_val:], y[n - n_val:])


def _stack(parts: Sequence[Optional[Batch]]) -> Optional[Batch]:
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    return np.vstack([p[0] for p in parts]), np.vstack([p[1] for p in parts])


def default_evaluator(task: TaskSplit, buf: ReplayBuffer, cfg: RunConfig, t: int, run_seed: int) -> Evaluator:
    """Candidates train on part of the search subset with the C1 loop and are scored on the rest"""
    current, replay = search_subset(task.train, buf, cfg.search.eval_subset_size, step_seed(run_seed, t, 0, SEARCH))
    fit_c, val_c = holdout(current, cfg.search.holdout_frac)
    fit_e, val_e = holdout(replay, cfg.search.holdout_frac)
    validation = _stack([val_c, val_e])

    def evaluate(arch, index):
        return evaluate_candidate(
            arch,
            *fit_c,
            cfg.search.eval_epochs,
            candidate_seed(run_seed, t, index),
            replay=fit_e,
            validation=validation,
            task=t,
            weights=cfg.grad_weights,
            activation=cfg.activation,
            kind=cfg.loss_kind,
            lr=cfg.search.eval_lr,
            clip_norm=cfg.clip_norm,
            var_x=cfg.sigma_x2,
            var_w=cfg.sigma_w2,
            weight_decay=cfg.weight_decay,
        )

    return evaluate


def _rows(ds: Dataset, max_rows: int, seed) -> Batch:
    if len(ds) <= max_rows:
        return ds.x, ds.y
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=max_rows, replace=False))
    return ds.x[idx], ds.y[idx]


def _kept(net: Network, task: TaskSplit, cfg: RunConfig, t: int, seed, log: TaskLog, reason: str) -> Network:
    """The search fired but the architecture stays; logged as a zero-gap row of the morph table"""
    x, y = _rows(task.train, MORPH_ROWS, seed)
    value = loss(forward(net, x), y, cfg.loss_kind)
    log.event(f"{reason}, keeping {net.arch}")
    log.records.append(
        MorphRecord(
            task=t,
            mode="kept",
            arch_old=list(net.arch.widths),
            arch_new=list(net.arch.widths),
            pre_loss=value,
            post_loss=value,
            loss_gap=0.0,
            transfer_norm=transfer_norm(net),
        )
    )
    return net


def _change_architecture(
    cond: Condition,
    net: Network,
    task: TaskSplit,
    buf: ReplayBuffer,
    cfg: RunConfig,
    t: int,
    run_seed: int,
    log: TaskLog,
    evaluator: Optional[Evaluator],
) -> Network:
    kind = cfg.loss_kind
    seed = step_seed(run_seed, t, 0, MORPH)
    evaluator = evaluator or default_evaluator(task, buf, cfg, t, run_seed)
    ceiling = width_ceiling(cfg.initial_architecture(), cfg.search.max_width_factor)
    try:
        result = ndds_search(net.arch, evaluator, cfg.search, task=t, ceiling=ceiling)
    except MorphCLError as exc:
        return _kept(net, task, cfg, t, seed, log, f"search failed: {exc.detail}")
    log.records.extend(result.trace)
    if not result.changed:
        return _kept(net, task, cfg, t, seed, log, f"search found nothing better in {result.evaluations} evaluations")

    new_arch = result.arch
    x, y = _rows(task.train, MORPH_ROWS, seed)
    if cond is Condition.C3:
        new_net = init_network(new_arch, cfg.activation, seed)
        pre, post = loss(forward(net, x), y, kind), loss(forward(new_net, x), y, kind)
        record = MorphRecord(
            task=t,
            mode="reinit",
            arch_old=list(net.arch.widths),
            arch_new=list(new_arch.widths),
            pre_loss=pre,
            post_loss=post,
            loss_gap=post - pre,
            transfer_norm=transfer_norm(new_net),
        )
    else:
        try:
            res = morph(
                net,
                new_arch,
                x,
                y,
                n_epochs=cfg.ab_epochs,
                lr=cfg.ab_lr,
                seed=seed,
                kind=kind,
                max_rows=MORPH_ROWS,
                batch_size=cfg.ab_batch_size,
            )
        except MorphCLError as exc:
            return _kept(net, task, cfg, t, seed, log, f"transfer to {new_arch} failed: {exc.detail}")
        new_net = res.net
        record = MorphRecord(
            task=t,
            mode="awb",
            arch_old=list(net.arch.widths),
            arch_new=list(new_arch.widths),
            pre_loss=res.pre_loss,
            post_loss=res.post_loss,
            loss_gap=res.loss_gap,
            n_ab=res.n_ab,
            transfer_norm=res.transfer_norm,
            diverged=res.diverged,
        )
    log.records.append(record)
    log.arch_changed = True
    logger.info("task %d: %s %s -> %s (loss %.6g -> %.6g)", t, record.mode, net.arch, new_arch, record.pre_loss, record.post_loss)
    return new_net


def train_task(
    cond: Condition,
    net: Network,
    task: TaskSplit,
    buf: ReplayBuffer,
    cfg: RunConfig,
    t: int,
    *,
    run_seed: int = 0,
    j_prev: Optional[float] = None,
    grad_weights: Optional[GradWeights] = None,
    eval_sets: Sequence[Dataset] = (),
    evaluator: Optional[Evaluator] = None,
) -> TaskResult:
    """One task under `cond`; appends the task's training data to the buffer at the end

    j_prev is the mean Hamiltonian loss over the previous task's last loss_window epochs and
    grad_weights the blend that task ended with; the warmup tail is measured with the same blend.
    """
    if cond is Condition.C1 and cfg.warmup_epochs > 0:
        raise ConfigError("C1 trains without warmup; resolve the config with condition_config first")
    kind = cfg.loss_kind
    log = TaskLog(task=t, grad_weights=cfg.grad_weights)
    weights = cfg.grad_weights
    heuristics = cond.uses_heuristics and t > 0
    offset = 0

    if heuristics:
        incoming = grad_weights or cfg.grad_weights
        warm = warmup(net, task.train, cfg.warmup_epochs, cfg.lr, cfg, t=t, run_seed=run_seed, buf=buf, weights=incoming)
        net = warm.net
        for epoch, (h_value, value, gnorm) in enumerate(zip(warm.hamiltonian, warm.losses, warm.grad_norms)):
            log.records.append(
                EpochRecord(
                    task=t,
                    epoch=epoch,
                    phase="warmup",
                    hamiltonian_loss=h_value,
                    current_loss=value,
                    grad_norm=gnorm,
                    lr=warm.lr,
                    arch=list(net.arch.widths),
                )
            )
        offset = len(warm.losses)
        if warm.hamiltonian:
            j_curr = float(np.mean(warm.hamiltonian[-cfg.loss_window:]))
        else:
            batch_c = sample_batch(task.train, cfg.batch_size, step_seed(run_seed, t, 0, WARMUP))
            batch_e = sample_replay(buf, cfg.batch_size, t, step_seed(run_seed, t, 0, WARMUP_REPLAY), balanced=True)
            j_curr = hamiltonian_step(
                net, batch_c, batch_e, incoming, t, kind, cfg.sigma_x2, cfg.sigma_w2,
                step_seed(run_seed, t, 0, WARMUP_PERTURB),
            ).loss

        if j_prev is not None:
            weights = adapt_weights(j_curr, j_prev)
            log.grad_weights = weights
            if cond.uses_search and should_change(j_curr, j_prev, cfg.theta_loss):
                log.event(f"hamiltonian ratio {j_curr / j_prev:.3f} exceeds {cfg.theta_loss}, searching")
                net = _change_architecture(cond, net, task, buf, cfg, t, run_seed, log, evaluator)

    if heuristics:
        schedule = cfg.lr_schedule()
    else:
        schedule = Schedule(kind=ScheduleKind.CONSTANT, eta0=cfg.lr, eta_min=min(cfg.lr_min, cfg.lr), horizon=cfg.epochs_per_task)

    state = AdamWState.fresh(net.params(), betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    last = cfg.epochs_per_task - 1
    for epoch in range(cfg.epochs_per_task):
        lr = schedule_lr(schedule, epoch)
        batch_c = sample_batch(task.train, cfg.batch_size, step_seed(run_seed, t, epoch, CURRENT))
        batch_e = sample_replay(
            buf, cfg.batch_size, t, step_seed(run_seed, t, epoch, REPLAY), balanced=cond.uses_heuristics
        )
        step = hamiltonian_step(
            net, batch_c, batch_e, weights, t, kind, cfg.sigma_x2, cfg.sigma_w2, step_seed(run_seed, t, epoch, PERTURB)
        )
        params, state = adamw_step(state, net.params(), clip_grad(step.grads, cfg.clip_norm), lr)
        net = net.with_params(params)

        metric = None
        if eval_sets and ((epoch + 1) % cfg.eval_every == 0 or epoch == last):
            metric = float(np.mean([score(net, ds.x, ds.y, kind) for ds in eval_sets]))
        log.records.append(
            EpochRecord(
                task=t,
                epoch=offset + epoch,
                hamiltonian_loss=step.loss,
                current_loss=step.current_loss,
                replay_loss=step.replay_loss,
                replay_test_metric=metric,
                grad_norm=step.grads.global_norm(),
                lr=lr,
                arch=list(net.arch.widths),
            )
        )

    buf.add_task(task.train.x, task.train.y, t)
    return TaskResult(net=net, log=log)
