"""Task-tagged experience replay with quota-balanced sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from morphcl.exceptions import EmptyBufferError, ReplayError, ShapeMismatchError
from morphcl.schemas import ReplayQuotas

logger = logging.getLogger(__name__)

# Quota group tags carried by sampled batches
RECENT, OLDER, RANDOM = 0, 1, 2


@dataclass(frozen=True)
class ReplayBatch:
    x: np.ndarray
    y: np.ndarray
    task_ids: np.ndarray
    groups: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


class ReplayBuffer:
    """Per-task sample store. Owned by one training loop; snapshots are read-only."""

    def __init__(self, capacity: int, seed: int = 0, quotas: ReplayQuotas | None = None):
        if capacity < 1:
            raise ReplayError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.quotas = quotas or ReplayQuotas()
        self._rng = np.random.default_rng(seed)
        self._x: dict[int, np.ndarray] = {}
        self._y: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return sum(x.shape[0] for x in self._x.values())

    @property
    def task_ids(self) -> list[int]:
        return sorted(self._x)

    def task_size(self, task_id: int) -> int:
        x = self._x.get(task_id)
        return 0 if x is None else x.shape[0]

    def is_empty(self) -> bool:
        return len(self) == 0

    def add_task(self, x: np.ndarray, y: np.ndarray, task_id: int) -> None:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatchError(f"task {task_id}: {x.shape[0]} inputs but {y.shape[0]} targets")
        expected = self.task_ids[-1] + 1 if self._x else 0
        if task_id != expected:
            raise ReplayError(f"task ids must be added in order: expected {expected}, got {task_id}")

        self._x[task_id] = x.copy()
        self._y[task_id] = y.copy()
        self._evict(task_id)
        logger.debug("replay buffer holds %d samples over %d tasks", len(self), len(self._x))

    def _keep(self, task_id: int, n_keep: int) -> None:
        size = self.task_size(task_id)
        if n_keep >= size:
            return
        if n_keep <= 0:
            del self._x[task_id], self._y[task_id]
            return
        idx = np.sort(self._rng.choice(size, size=n_keep, replace=False))
        self._x[task_id] = self._x[task_id][idx]
        self._y[task_id] = self._y[task_id][idx]

    def _evict(self, newest: int) -> None:
        overflow = len(self) - self.capacity
        if overflow <= 0:
            return
        older = [t for t in self.task_ids if t != newest]
        # oldest tasks first, one survivor each
        for t in older:
            if overflow <= 0:
                return
            take = min(overflow, self.task_size(t) - 1)
            self._keep(t, self.task_size(t) - take)
            overflow -= take
        for t in older:
            if overflow <= 0:
                return
            overflow -= self.task_size(t)
            self._keep(t, 0)
        if overflow > 0:
            self._keep(newest, self.task_size(newest) - overflow)

    # --- Sampling ---
    def _draw(self, tasks: list[int], n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
        if n <= 0 or not tasks:
            return []
        sizes = np.array([self.task_size(t) for t in tasks])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(offsets[-1])
        flat = rng.choice(total, size=n, replace=total < n)
        owner = np.searchsorted(offsets, flat, side="right") - 1
        return [(tasks[k], int(i - offsets[k])) for k, i in zip(owner, flat)]

    def _gather(self, picks: list[tuple[int, int]], tags: list[int]) -> ReplayBatch:
        x = np.stack([self._x[t][i] for t, i in picks])
        y = np.stack([self._y[t][i] for t, i in picks])
        return ReplayBatch(
            x=x,
            y=y,
            task_ids=np.array([t for t, _ in picks], dtype=np.int64),
            groups=np.array(tags, dtype=np.int64),
        )

    def sample_uniform(self, batch_size: int, seed) -> ReplayBatch:
        if self.is_empty():
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        if batch_size < 1:
            raise ReplayError(f"batch_size must be >= 1, got {batch_size}")
        rng = np.random.default_rng(seed)
        picks = self._draw(self.task_ids, batch_size, rng)
        return self._gather(picks, [RANDOM] * batch_size)

    def sample_balanced(self, batch_size: int, current_task: int, seed) -> ReplayBatch:
        """Recent/older/random quota batch; collapses to uniform under three task groups"""
        if self.is_empty():
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        if batch_size < 1:
            raise ReplayError(f"batch_size must be >= 1, got {batch_size}")

        eligible = [t for t in self.task_ids if t < current_task] or self.task_ids
        if len(self.task_ids) < 3 or len(eligible) < 2:
            return self.sample_uniform(batch_size, seed)

        rng = np.random.default_rng(seed)
        recent, older = [eligible[-1]], eligible[:-1]
        n_recent = int(np.floor(self.quotas.recent * batch_size))
        n_older = int(np.floor(self.quotas.older * batch_size))
        n_random = batch_size - n_recent - n_older

        picks = self._draw(recent, n_recent, rng) + self._draw(older, n_older, rng) + self._draw(
            self.task_ids, n_random, rng
        )
        tags = [RECENT] * n_recent + [OLDER] * n_older + [RANDOM] * n_random
        return self._gather(picks, tags)
