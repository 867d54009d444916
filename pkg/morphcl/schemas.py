from __future__ import annotations

import math
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from morphcl.exceptions import ArchitectureError


# --- Enumerations ---
class ActivationKind(str, Enum):
    RELU = "relu"
    ELU = "elu"
    SOFTSIGN = "softsign"
    ISRLU = "isrlu"
    ISRU = "isru"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    IDENTITY = "identity"


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy_with_logits"


class Condition(str, Enum):
    C1 = "C1"  # fixed architecture, constant lr
    C2 = "C2"  # + warmup, cosine lr, adaptive weights, balanced replay
    C3 = "C3"  # + architecture search with Glorot reinit
    C4 = "C4"  # + architecture search with AWB transfer

    @property
    def uses_heuristics(self) -> bool:
        return self is not Condition.C1

    @property
    def uses_search(self) -> bool:
        return self in (Condition.C3, Condition.C4)


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"
    STEP = "step"
    EXPONENTIAL = "exponential"
    LINEAR = "linear"


class ExperimentKind(str, Enum):
    SINE2 = "sine2"
    SINE10 = "sine10"
    SINE_NOISY5 = "sine_noisy5"
    IMAGE2 = "image2"
    IMAGE10 = "image10"
    IMAGE10_ROTATED = "image10_rotated"

    @property
    def task_kind(self) -> str:
        return {
            ExperimentKind.SINE2: "sine",
            ExperimentKind.SINE10: "sine",
            ExperimentKind.SINE_NOISY5: "sine_noisy",
            ExperimentKind.IMAGE2: "image_digits",
            ExperimentKind.IMAGE10: "image_digits",
            ExperimentKind.IMAGE10_ROTATED: "image_rotated",
        }[self]

    @property
    def n_tasks(self) -> int:
        return {
            ExperimentKind.SINE2: 2,
            ExperimentKind.SINE10: 10,
            ExperimentKind.SINE_NOISY5: 5,
            ExperimentKind.IMAGE2: 2,
            ExperimentKind.IMAGE10: 10,
            ExperimentKind.IMAGE10_ROTATED: 10,
        }[self]

    @property
    def is_image(self) -> bool:
        return self.task_kind.startswith("image")


class Polarity(str, Enum):
    ERROR = "error"
    ACCURACY = "accuracy"


# --- Architecture ---
class Architecture(BaseModel):
    """Layer widths (input, hidden..., output) plus an optional conv filter side"""

    model_config = ConfigDict(frozen=True)

    widths: tuple[int, ...]
    filter_size: Optional[int] = None

    @field_validator("widths")
    def _check_widths(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if len(v) < 2:
            raise ValueError(f"an architecture needs at least input and output widths, got {list(v)}")
        bad = [w for w in v if w < 1]
        if bad:
            raise ValueError(f"every width must be >= 1, got {list(v)}")
        return v

    @field_validator("filter_size")
    def _check_filter(cls, v: int | None) -> int | None:
        if v is not None and (v < 1 or v % 2 == 0):
            raise ValueError(f"filter_size must be odd and >= 1, got {v}")
        return v

    @classmethod
    def parse(cls, widths, filter_size: int | None = None) -> "Architecture":
        try:
            return cls(widths=tuple(int(w) for w in widths), filter_size=filter_size)
        except ValidationError as exc:
            raise ArchitectureError(f"invalid architecture {list(widths)}: {exc.errors()[0]['msg']}") from exc

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.widths[1:-1]

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) per layer"""
        return [(self.widths[i + 1], self.widths[i]) for i in range(self.depth)]

    def shifted(self, delta) -> "Architecture":
        return Architecture.parse([w + int(d) for w, d in zip(self.widths, delta)], self.filter_size)

    def __str__(self) -> str:
        return "[" + ",".join(str(w) for w in self.widths) + "]"


# --- Engine knobs ---
class GradWeights(BaseModel):
    """Blend of current-task, replay and perturbation gradients"""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=0.4, ge=0.0, le=1.0)
    beta: float = Field(default=0.4, ge=0.0, le=1.0)
    gamma: float = Field(default=0.1, ge=0.0, le=1.0)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


class Schedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ScheduleKind = ScheduleKind.COSINE
    eta0: float = Field(default=1e-4, gt=0.0)
    eta_min: float = Field(default=1e-6, gt=0.0)
    horizon: int = Field(default=500, ge=1)
    # step / exponential constants
    step_size: int = Field(default=100, ge=1)
    gamma: float = Field(default=0.5, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_order(self) -> "Schedule":
        if self.eta0 < self.eta_min:
            raise ValueError(f"eta0 ({self.eta0}) must be >= eta_min ({self.eta_min})")
        return self


class ReplayQuotas(BaseModel):
    model_config = ConfigDict(frozen=True)

    recent: float = Field(default=0.1, ge=0.0, le=1.0)
    older: float = Field(default=0.8, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_sum(self) -> "ReplayQuotas":
        if self.recent + self.older > 1.0 + 1e-12:
            raise ValueError("recent + older quotas must not exceed 1")
        return self

    @property
    def random(self) -> float:
        return max(0.0, 1.0 - self.recent - self.older)


class SearchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    step_size: int = Field(default=16, ge=0)
    threshold_ratio: float = Field(default=0.9, gt=0.0, le=1.0)
    max_rounds: int = Field(default=5, ge=1)
    eval_epochs: int = Field(default=100, ge=0)
    eval_subset_size: int = Field(default=512, ge=1)
    eval_lr: float = Field(default=1e-3, gt=0.0)
    directions: Literal["unit", "signed_multiples"] = "signed_multiples"
    multiples: tuple[int, ...] = (1, 2, 3)
    workers: int = Field(default=1, ge=1)
    # share of the search subset held out to score candidates
    holdout_frac: float = Field(default=0.25, ge=0.0, lt=1.0)
    # hidden widths never exceed this multiple of the run's starting widths; None lifts the cap
    max_width_factor: Optional[float] = Field(default=4.0, ge=1.0)


class SineRanges(BaseModel):
    model_config = ConfigDict(frozen=True)

    amplitude: tuple[float, float] = (0.5, 2.0)
    phase: tuple[float, float] = (0.0, 2.0 * math.pi)
    frequency: float = 1.0
    domain: tuple[float, float] = (-90.0, 90.0)
    input_scale: float = Field(default=90.0, gt=0.0)


# --- Experiment configuration ---
class RunConfig(BaseModel):
    """Harness configuration; every default is the full-scale setting"""

    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentKind = ExperimentKind.SINE10
    conditions: list[Condition] = Field(default_factory=lambda: list(Condition))
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    n_tasks: Optional[int] = Field(default=None, ge=1)
    epochs_per_task: int = Field(default=500, ge=1)
    batch_size: int = Field(default=1024, ge=1)
    samples_per_task: int = Field(default=2560, ge=2)
    train_frac: float = Field(default=0.8, gt=0.0, lt=1.0)

    # network
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    image_hidden: list[int] = Field(default_factory=lambda: [512, 64])
    activation: ActivationKind = ActivationKind.RELU

    # optimizer
    lr: float = Field(default=1e-4, gt=0.0)
    lr_min: float = Field(default=1e-6, gt=0.0)
    schedule: ScheduleKind = ScheduleKind.COSINE
    schedule_step_size: int = Field(default=100, ge=1)
    schedule_gamma: float = Field(default=0.5, gt=0.0, le=1.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    clip_norm: float = Field(default=1.0, gt=0.0)

    # hamiltonian gradient
    grad_weights: GradWeights = Field(default_factory=GradWeights)
    sigma_x2: float = Field(default=1e-4, ge=0.0)
    sigma_w2: float = Field(default=1e-8, ge=0.0)

    # warmup / adaptivity
    warmup_epochs: int = Field(default=25, ge=0)
    warmup_lr_factor: float = Field(default=0.1, gt=0.0, le=1.0)
    theta_loss: float = Field(default=1.1, gt=0.0)
    loss_window: int = Field(default=10, ge=1)

    # replay
    buffer_size: int = Field(default=200_000, ge=1)
    quotas: ReplayQuotas = Field(default_factory=ReplayQuotas)

    # search / transfer
    search: SearchConfig = Field(default_factory=SearchConfig)
    ab_epochs: int = Field(default=500, ge=0)
    ab_lr: float = Field(default=1e-3, gt=0.0)
    ab_batch_size: int = Field(default=128, ge=1)

    # data
    sine: SineRanges = Field(default_factory=SineRanges)
    noise_base: float = Field(default=0.02, ge=0.0)
    divergence_bins: int = Field(default=16, ge=1)

    # harness
    eval_every: int = Field(default=10, ge=1)
    out_dir: Optional[Path] = None

    @field_validator("conditions", "seeds")
    def _non_empty(cls, v: list) -> list:
        if not v:
            raise ValueError("must not be empty")
        return v

    @field_validator("hidden", "image_hidden")
    def _positive_widths(cls, v: list[int]) -> list[int]:
        if any(w < 1 for w in v):
            raise ValueError(f"hidden widths must be >= 1, got {v}")
        return v

    @property
    def task_count(self) -> int:
        return self.n_tasks if self.n_tasks is not None else self.experiment.n_tasks

    @property
    def loss_kind(self) -> LossKind:
        return LossKind.CROSS_ENTROPY if self.experiment.is_image else LossKind.MSE

    @property
    def polarity(self) -> Polarity:
        return Polarity.ACCURACY if self.experiment.is_image else Polarity.ERROR

    def initial_architecture(self) -> Architecture:
        if self.experiment.is_image:
            return Architecture.parse([784, *self.image_hidden, 10])
        return Architecture.parse([1, *self.hidden, 1])

    def lr_schedule(self) -> Schedule:
        return Schedule(
            kind=self.schedule,
            eta0=self.lr,
            eta_min=min(self.lr_min, self.lr),
            horizon=self.epochs_per_task,
            step_size=self.schedule_step_size,
            gamma=self.schedule_gamma,
        )


# --- Task specs ---
class SineTaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    amplitude: float = 1.0
    frequency: float = 1.0
    phase: float = 0.0
    noise: float = Field(default=0.0, ge=0.0)
    n_samples: int = Field(default=2560, ge=1)
    domain: tuple[float, float] = (-90.0, 90.0)

    @field_validator("domain")
    def _check_domain(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not v[0] < v[1]:
            raise ValueError(f"domain lower bound must be below upper bound, got {v}")
        return v


class ImageTaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    digits: tuple[int, ...]
    angle: float = Field(default=0.0, ge=0.0, le=180.0)


# --- Network serialization ---
class LayerDocument(BaseModel):
    w: list[list[float]]
    b: list[float]


class NetworkDocument(BaseModel):
    arch: list[int]
    filter_size: Optional[int] = None
    activation: ActivationKind
    layers: list[LayerDocument]


# --- Run log records (one JSONL object each) ---
class EpochRecord(BaseModel):
    type: Literal["epoch"] = "epoch"
    task: int
    epoch: int
    phase: Literal["warmup", "train"] = "train"
    hamiltonian_loss: float
    current_loss: float
    replay_loss: Optional[float] = None
    replay_test_metric: Optional[float] = None
    grad_norm: float
    lr: float
    arch: list[int]


class SearchRecord(BaseModel):
    type: Literal["search"] = "search"
    task: int
    round: int
    candidate: list[int]
    loss: float
    accepted: bool


class MorphRecord(BaseModel):
    type: Literal["morph"] = "morph"
    task: int
    mode: Literal["awb", "reinit", "kept"]
    arch_old: list[int]
    arch_new: list[int]
    pre_loss: float
    post_loss: float
    loss_gap: float
    n_ab: int = 0
    transfer_norm: Optional[float] = None
    diverged: bool = False


class TaskEndRecord(BaseModel):
    type: Literal["task_end"] = "task_end"
    task: int
    arch: list[int]
    grad_weights: list[float]
    arch_changed: bool
    perf: list[float]


class EventRecord(BaseModel):
    type: Literal["event"] = "event"
    task: int
    message: str


class RunSummary(BaseModel):
    experiment: ExperimentKind
    condition: Condition
    seed: int
    status: Literal["ok", "failed"] = "ok"
    n_tasks: int
    polarity: Polarity = Polarity.ERROR
    perf_matrix: list[list[Optional[float]]] = []
    avg: Optional[float] = None
    bwt: Optional[float] = None
    fwt: Optional[float] = None
    forgetting: Optional[float] = None
    final_arch: list[int] = []
    final_hamiltonian: Optional[float] = None
    morphs: list[MorphRecord] = []
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    error: Optional[str] = None
