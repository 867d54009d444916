"""Neighborhood directional direct search over integer layer widths, and the change trigger."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from morphcl.exceptions import ArchitectureError, MorphCLError
from morphcl.schemas import ActivationKind, Architecture, GradWeights, LossKind, SearchConfig, SearchRecord
from morphcl.services.hamiltonian import Batch, train_constant
from morphcl.services.netcore import forward, init_network, loss

logger = logging.getLogger(__name__)

Direction = tuple[int, ...]
# (candidate, candidate index) -> loss; index 0 is the incumbent
Evaluator = Callable[[Architecture, int], float]


# --- Directions and poll points ---
def direction_set(arch: Architecture, kind: str = "signed_multiples", multiples: Sequence[int] = (1, 2, 3)) -> list[Direction]:
    """Directions touch hidden widths only"""
    n = len(arch.widths)
    dirs: list[Direction] = []
    for i in range(1, n - 1):
        if kind == "unit":
            steps = [1]
        elif kind == "signed_multiples":
            steps = [s * k for k in multiples for s in (1, -1)]
        else:
            raise ValueError(f"unknown direction set {kind!r}")
        for step in steps:
            d = [0] * n
            d[i] = step
            dirs.append(tuple(d))
    return dirs


def poll_points(
    x_s: Architecture, directions: Sequence[Direction], step: int, *, ceiling: Optional[Sequence[int]] = None
) -> list[Architecture]:
    """x_s + step*d per direction, plus pairwise sums when there are at most three directions

    Candidates with a width below 1, or above `ceiling` where one is given, are dropped.
    """
    n = len(x_s.widths)
    for d in directions:
        if len(d) != n or d[0] != 0 or d[-1] != 0:
            raise ArchitectureError(f"direction {list(d)} must match {x_s} and leave input/output widths alone")
    if ceiling is not None and len(ceiling) != n:
        raise ArchitectureError(f"width ceiling {list(ceiling)} does not match {x_s}")

    moves = [tuple(d) for d in directions]
    if len(directions) <= 3:
        for a in range(len(directions)):
            for b in range(a + 1, len(directions)):
                moves.append(tuple(p + q for p, q in zip(directions[a], directions[b])))

    seen = {x_s.widths}
    out: list[Architecture] = []
    for move in moves:
        widths = tuple(w + step * m for w, m in zip(x_s.widths, move))
        if widths in seen or min(widths) < 1:
            continue
        if ceiling is not None and any(w > c for w, c in zip(widths, ceiling)):
            continue
        seen.add(widths)
        out.append(Architecture(widths=widths, filter_size=x_s.filter_size))
    return out


def width_ceiling(initial: Architecture, factor: Optional[float]) -> Optional[tuple[int, ...]]:
    """Per-layer width cap at `factor` times the starting widths; input/output widths stay fixed"""
    if factor is None:
        return None
    n = len(initial.widths)
    return tuple(w if i in (0, n - 1) else max(1, int(factor * w)) for i, w in enumerate(initial.widths))


# --- Candidate evaluation ---
def candidate_seed(run_seed: int, task: int, index: int) -> list[int]:
    return [run_seed, task, index]


def evaluate_candidate(
    arch: Architecture,
    x: np.ndarray,
    y: np.ndarray,
    eval_epochs: int,
    seed,
    *,
    replay: Optional[Batch] = None,
    validation: Optional[Batch] = None,
    task: int = 0,
    weights: GradWeights = GradWeights(),
    activation: ActivationKind = ActivationKind.RELU,
    kind: LossKind = LossKind.MSE,
    lr: float = 1e-3,
    clip_norm: float = 1.0,
    var_x: float = 0.0,
    var_w: float = 0.0,
    weight_decay: float = 0.01,
) -> float:
    """Train a fresh Glorot network with the constant-rate Hamiltonian loop and return its mean loss

    The loss is taken on `validation` when given, otherwise on the training rows (replay included).
    Divergence scores +inf.
    """
    if len(x) == 0:
        raise ValueError("candidate evaluation needs a non-empty subset")
    seed_seq = np.random.SeedSequence(seed)
    init_seed, loop_seed = (int(s) for s in seed_seq.generate_state(2))
    net = init_network(arch, activation, init_seed)
    if validation is not None:
        x_v, y_v = validation
    elif replay is not None and len(replay[0]) > 0:
        x_v, y_v = np.vstack([x, replay[0]]), np.vstack([y, replay[1]])
    else:
        x_v, y_v = x, y
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            net = train_constant(
                net,
                (x, y),
                replay,
                weights,
                task,
                kind,
                eval_epochs,
                lr,
                loop_seed,
                var_x=var_x,
                var_w=var_w,
                clip_norm=clip_norm,
                weight_decay=weight_decay,
            )
            value = loss(forward(net, x_v), y_v, kind)
    except MorphCLError as exc:
        logger.debug("candidate %s diverged: %s", arch, exc.detail)
        return float("inf")
    return value if np.isfinite(value) else float("inf")


# --- Search ---
@dataclass
class SearchResult:
    arch: Architecture
    loss: float
    initial_loss: float
    rounds: int = 0
    evaluations: int = 0
    trace: list[SearchRecord] = field(default_factory=list)
    path: list[Architecture] = field(default_factory=list)

    @property
    def changed(self) -> bool:
        return self.arch.widths != self.path[0].widths


class _Memo:
    """Each distinct architecture is evaluated once, under the index of its first appearance"""

    def __init__(self, evaluate: Evaluator, pool: Optional[ThreadPoolExecutor] = None):
        self._evaluate = evaluate
        self._pool = pool
        self._cache: dict[tuple[int, ...], float] = {}

    @property
    def calls(self) -> int:
        return len(self._cache)

    def __call__(self, archs: Sequence[Architecture]) -> list[float]:
        fresh: list[Architecture] = []
        for arch in archs:
            if arch.widths not in self._cache and all(arch.widths != f.widths for f in fresh):
                fresh.append(arch)
        jobs = [(arch, self.calls + k) for k, arch in enumerate(fresh)]
        if self._pool is not None:
            values = list(self._pool.map(lambda job: self._evaluate(*job), jobs))
        else:
            values = [self._evaluate(*job) for job in jobs]
        for arch, value in zip(fresh, values):
            value = float(value)
            self._cache[arch.widths] = value if np.isfinite(value) else float("inf")
        return [self._cache[arch.widths] for arch in archs]


def ndds_search(
    psi: Architecture,
    evaluate: Evaluator,
    cfg: SearchConfig,
    *,
    task: int = 0,
    directions: Optional[Sequence[Direction]] = None,
    ceiling: Optional[Sequence[int]] = None,
) -> SearchResult:
    """Greedy poll-and-move search; stops at loss <= ratio*initial or after max_rounds"""
    dirs = list(directions) if directions is not None else direction_set(psi, cfg.directions, cfg.multiples)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    memo = _Memo(evaluate, pool)
    try:
        x_s = psi
        [loss_s] = memo([x_s])
        result = SearchResult(arch=psi, loss=loss_s, initial_loss=loss_s, path=[psi])
        if not dirs or not np.isfinite(loss_s):
            result.evaluations = memo.calls
            return result
        target = cfg.threshold_ratio * loss_s

        while result.rounds < cfg.max_rounds and loss_s > target:
            polls = poll_points(x_s, dirs, cfg.step_size, ceiling=ceiling)
            if not polls:
                break
            result.rounds += 1
            losses = memo(polls)

            best = int(np.argmin(losses))
            moved = losses[best] < loss_s
            for k, (cand, value) in enumerate(zip(polls, losses)):
                result.trace.append(
                    SearchRecord(
                        task=task,
                        round=result.rounds,
                        candidate=list(cand.widths),
                        loss=value,
                        accepted=moved and k == best,
                    )
                )
            if not moved:
                break
            x_s, loss_s = polls[best], losses[best]
            result.path.append(x_s)
            logger.debug("search round %d moved to %s (loss %.6g)", result.rounds, x_s, loss_s)
    finally:
        if pool is not None:
            pool.shutdown()

    result.arch, result.loss, result.evaluations = x_s, loss_s, memo.calls
    return result


def should_change(j_curr: float, j_prev: float, theta: float) -> bool:
    if not j_prev > 0.0 or np.isnan(j_curr):
        return False
    return j_curr / j_prev > theta
