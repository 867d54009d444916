"""Task sequences: parametric sine regression and digit-group classification."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np

from morphcl.schemas import ImageTaskSpec, SineRanges, SineTaskSpec
from morphcl.services import images as image_io

logger = logging.getLogger(__name__)

TaskKind = Literal["sine", "sine_noisy", "image_digits", "image_rotated"]


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    task_id: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"task {self.task_id}: {self.x.shape[0]} inputs but {self.y.shape[0]} targets")

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.task_id, self.meta)


@dataclass(frozen=True)
class TaskSplit:
    train: Dataset
    test: Dataset

    @property
    def task_id(self) -> int:
        return self.train.task_id


def gen_sine_task(spec: SineTaskSpec, seed, task_id: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    lo, hi = spec.domain
    x = rng.uniform(lo, hi, size=(spec.n_samples, 1))
    y = spec.amplitude * np.sin(spec.frequency * x + spec.phase)
    if spec.noise > 0.0:
        y = y + rng.normal(0.0, spec.noise, size=y.shape)
    return Dataset(x=x, y=y, task_id=task_id, meta=spec.model_dump())


def noise_schedule(t: int, base: float) -> float:
    if t < 0:
        raise ValueError(f"task index must be >= 0, got {t}")
    return base * t


def split(ds: Dataset, train_frac: float, seed) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; both halves keep at least one row when n >= 2"""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    n = len(ds)
    n_train = int(math.floor(train_frac * n))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return ds.subset(order[:n_train]), ds.subset(order[n_train:])


def digit_groups(n_tasks: int) -> list[tuple[int, ...]]:
    if not 1 <= n_tasks <= 10:
        raise ValueError(f"digit tasks need 1 <= T <= 10, got {n_tasks}")
    return [tuple(int(d) for d in g) for g in np.array_split(np.arange(10), n_tasks)]


def sine_specs(
    n_tasks: int,
    seed: int,
    *,
    ranges: SineRanges | None = None,
    n_samples: int = 2560,
    noise_base: float = 0.0,
) -> list[SineTaskSpec]:
    ranges = ranges or SineRanges()
    rng = np.random.default_rng([seed, 0x51E])
    specs = []
    for t in range(n_tasks):
        specs.append(
            SineTaskSpec(
                amplitude=float(rng.uniform(*ranges.amplitude)),
                frequency=ranges.frequency,
                phase=float(rng.uniform(*ranges.phase)),
                noise=noise_schedule(t, noise_base),
                n_samples=n_samples,
                domain=ranges.domain,
            )
        )
    return specs


def image_specs(kind: TaskKind, n_tasks: int, seed: int) -> list[ImageTaskSpec]:
    rng = np.random.default_rng([seed, 0x1A6])
    specs = []
    for t, group in enumerate(digit_groups(n_tasks)):
        angle = float(rng.uniform(0.0, 180.0)) if kind == "image_rotated" and t > 0 else 0.0
        specs.append(ImageTaskSpec(digits=group, angle=angle))
    return specs


def make_task_sequence(
    kind: TaskKind,
    n_tasks: int,
    seed: int,
    *,
    samples_per_task: int = 2560,
    ranges: SineRanges | None = None,
    noise_base: float = 0.02,
    data_dir: Path | None = None,
) -> list[Dataset]:
    """Network-ready datasets for every task; a pure function of the arguments"""
    if n_tasks < 1:
        raise ValueError(f"need at least one task, got {n_tasks}")
    ranges = ranges or SineRanges()

    if kind in ("sine", "sine_noisy"):
        base = noise_base if kind == "sine_noisy" else 0.0
        specs = sine_specs(n_tasks, seed, ranges=ranges, n_samples=samples_per_task, noise_base=base)
        tasks = []
        for t, spec in enumerate(specs):
            raw = gen_sine_task(spec, [seed, t], task_id=t)
            tasks.append(Dataset(x=raw.x / ranges.input_scale, y=raw.y, task_id=t, meta=raw.meta))
        return tasks

    if kind in ("image_digits", "image_rotated"):
        specs = image_specs(kind, n_tasks, seed)
        pool_x, pool_y = image_io.load_digits(data_dir, n_per_class=max(1, samples_per_task // 2), seed=seed)
        tasks = []
        for t, spec in enumerate(specs):
            idx = np.flatnonzero(np.isin(pool_y, spec.digits))
            rng = np.random.default_rng([seed, t])
            if idx.size > samples_per_task:
                idx = np.sort(rng.choice(idx, size=samples_per_task, replace=False))
            x = pool_x[idx]
            if spec.angle > 0.0:
                x = image_io.transform_rotate_shear(x, spec.angle)
            tasks.append(
                Dataset(x=x, y=pool_y[idx].astype(np.float64).reshape(-1, 1), task_id=t, meta=spec.model_dump())
            )
        return tasks

    raise ValueError(f"unknown task kind {kind!r}")


def split_sequence(tasks: list[Dataset], train_frac: float, seed: int) -> list[TaskSplit]:
    return [TaskSplit(*split(ds, train_frac, [seed, ds.task_id, 0x5B])) for ds in tasks]


def export_tasks_csv(tasks: list[Dataset], out_dir: Path, input_scale: float = 90.0) -> list[Path]:
    """One CSV per sine task with raw and scaled inputs"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ds in tasks:
        path = out_dir / f"task_{ds.task_id:02d}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "x_scaled", "y"])
            for xs, y in zip(ds.x[:, 0], ds.y[:, 0]):
                writer.writerow([repr(float(xs * input_scale)), repr(float(xs)), repr(float(y))])
        paths.append(path)
    logger.info("exported %d tasks to %s", len(paths), out_dir)
    return paths
