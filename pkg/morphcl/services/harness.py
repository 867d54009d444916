"""Condition x seed sweeps: per-run JSONL logs, summaries, checkpoints, metrics CSV and run registry."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import orjson
from pydantic import BaseModel, ValidationError
from sqlalchemy import select

from morphcl.database import get_session
from morphcl.exceptions import ConfigError
from morphcl.models import MorphEventRecord, RunRecord
from morphcl.schemas import Condition, RunConfig, RunSummary, TaskEndRecord
from morphcl.services import metrics
from morphcl.services.engine import INIT, REPLAY, condition_config, derive_seed, train_task
from morphcl.services.netcore import init_network, save_network, score
from morphcl.services.replay import ReplayBuffer
from morphcl.services.tasks import make_task_sequence, split_sequence

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["condition", "seed", "avg", "bwt", "fwt", "forgetting"]
LOG_NAME = "log.jsonl"
SUMMARY_NAME = "summary.json"
CHECKPOINT_NAME = "final_network.json"
METRICS_NAME = "metrics.csv"


# --- Configuration ---
def desk_overrides() -> dict[str, Any]:
    raw = resources.files("morphcl").joinpath("configs/desk.json").read_bytes()
    return orjson.loads(raw)


def _deep_merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[Path] = None, *, desk: bool = False, overrides: Optional[dict] = None) -> RunConfig:
    """desk preset < config file < explicit overrides"""
    doc: dict[str, Any] = desk_overrides() if desk else {}
    if path is not None:
        try:
            doc = _deep_merge(doc, orjson.loads(Path(path).read_bytes()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except orjson.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    doc = _deep_merge(doc, {k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"invalid config at {where}: {first['msg']}") from exc


# --- JSONL ---
class JsonlWriter:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = None

    def __enter__(self) -> "JsonlWriter":
        self._fh = self.path.open("wb")
        return self

    def __exit__(self, *exc) -> None:
        self._fh.close()

    def write(self, record: BaseModel) -> None:
        self._fh.write(orjson.dumps(record.model_dump(mode="json")) + b"\n")

    def write_all(self, records: Iterable[BaseModel]) -> None:
        for record in records:
            self.write(record)


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    with Path(path).open("rb") as fh:
        return [orjson.loads(line) for line in fh if line.strip()]


# --- Single run ---
def run_dir(out_dir: Path, cfg: RunConfig, cond: Condition, seed: int) -> Path:
    return Path(out_dir) / f"{cfg.experiment.value}_{cond.value}_seed{seed}"


def run_single(cfg: RunConfig, cond: Condition, seed: int, out_dir: Path, data_dir: Optional[Path] = None) -> RunSummary:
    """Train every task under one (condition, seed); failures come back as a failed summary"""
    rdir = run_dir(out_dir, cfg, cond, seed)
    rdir.mkdir(parents=True, exist_ok=True)
    log_path = rdir / LOG_NAME
    summary = RunSummary(
        experiment=cfg.experiment,
        condition=cond,
        seed=seed,
        n_tasks=cfg.task_count,
        polarity=cfg.polarity,
        log_path=str(log_path),
    )
    try:
        summary = _train_run(cfg, cond, seed, rdir, data_dir, summary)
    except Exception as exc:
        logger.exception("run %s seed %d failed", cond.value, seed)
        summary = summary.model_copy(update={"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    (rdir / SUMMARY_NAME).write_bytes(orjson.dumps(summary.model_dump(mode="json"), option=orjson.OPT_INDENT_2))
    return summary


def _train_run(cfg: RunConfig, cond: Condition, seed: int, rdir: Path, data_dir: Optional[Path], summary: RunSummary) -> RunSummary:
    kind = cfg.loss_kind
    tasks = make_task_sequence(
        cfg.experiment.task_kind,
        cfg.task_count,
        seed,
        samples_per_task=cfg.samples_per_task,
        ranges=cfg.sine,
        noise_base=cfg.noise_base,
        data_dir=data_dir,
    )
    splits = split_sequence(tasks, cfg.train_frac, seed)
    ccfg = condition_config(cfg, cond)
    net = init_network(cfg.initial_architecture(), cfg.activation, derive_seed(seed, INIT))
    buf = ReplayBuffer(cfg.buffer_size, derive_seed(seed, REPLAY), cfg.quotas)
    pm = metrics.PerfMatrix(cfg.task_count, cfg.polarity)
    morphs = []
    j_prev = None
    weights = None
    final_h = None

    with JsonlWriter(rdir / LOG_NAME) as sink:
        for t, task in enumerate(splits):
            seen = splits[: t + 1]
            result = train_task(
                cond,
                net,
                task,
                buf,
                ccfg,
                t,
                run_seed=seed,
                j_prev=j_prev,
                grad_weights=weights,
                eval_sets=[s.test for s in seen],
            )
            net = result.net
            sink.write_all(result.log.records)
            morphs.extend(result.log.morphs)

            perf = [score(net, s.test.x, s.test.y, kind) for s in seen]
            pm.record_row(t, perf)
            sink.write(
                TaskEndRecord(
                    task=t,
                    arch=list(net.arch.widths),
                    grad_weights=list(result.log.grad_weights.as_tuple()),
                    arch_changed=result.log.arch_changed,
                    perf=perf,
                )
            )
            j_prev = final_h = result.log.tail_mean(cfg.loss_window)
            weights = result.log.grad_weights
            logger.info("%s seed %d task %d arch %s perf %s", cond.value, seed, t, net.arch, [round(p, 5) for p in perf])

    checkpoint = save_network(net, rdir / CHECKPOINT_NAME)
    return summary.model_copy(
        update={
            "perf_matrix": pm.to_rows(),
            "avg": metrics.avg_perf(pm),
            "bwt": metrics.bwt(pm),
            "fwt": metrics.fwt(pm),
            "forgetting": metrics.forgetting(pm),
            "final_arch": list(net.arch.widths),
            "final_hamiltonian": final_h,
            "morphs": morphs,
            "checkpoint_path": str(checkpoint),
        }
    )


# --- Sweep ---
@dataclass
class SweepResult:
    out_dir: Path
    summaries: list[RunSummary] = field(default_factory=list)
    metrics_path: Optional[Path] = None

    @property
    def ok(self) -> bool:
        return all(s.status == "ok" for s in self.summaries)

    @property
    def failed(self) -> list[RunSummary]:
        return [s for s in self.summaries if s.status != "ok"]

    def by_condition(self, cond: Condition) -> list[RunSummary]:
        return [s for s in self.summaries if s.condition is cond]


def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(summaries: Sequence[RunSummary], path: Path) -> Path:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for s in summaries:
            writer.writerow([s.condition.value, s.seed, _cell(s.avg), _cell(s.bwt), _cell(s.fwt), _cell(s.forgetting)])
    return Path(path)


def register_runs(out_dir: Path, summaries: Sequence[RunSummary]) -> None:
    with get_session(out_dir) as session:
        for s in summaries:
            existing = session.execute(
                select(RunRecord).where(
                    RunRecord.experiment == s.experiment.value,
                    RunRecord.condition == s.condition.value,
                    RunRecord.seed == s.seed,
                )
            ).scalar_one_or_none()
            if existing is not None:
                session.delete(existing)
                session.flush()
            record = RunRecord(
                experiment=s.experiment.value,
                condition=s.condition.value,
                seed=s.seed,
                status=s.status,
                avg=s.avg,
                bwt=s.bwt,
                fwt=s.fwt,
                forgetting=s.forgetting,
                final_hamiltonian=s.final_hamiltonian,
                final_arch=str(s.final_arch),
                log_path=str(Path(s.log_path).resolve()) if s.log_path else None,
                summary_path=str(Path(s.log_path).resolve().with_name(SUMMARY_NAME)) if s.log_path else None,
                error=s.error,
            )
            record.morphs = [
                MorphEventRecord(
                    task=m.task,
                    mode=m.mode,
                    arch_old=str(m.arch_old),
                    arch_new=str(m.arch_new),
                    pre_loss=m.pre_loss,
                    post_loss=m.post_loss,
                    n_ab=m.n_ab,
                    transfer_norm=m.transfer_norm,
                )
                for m in s.morphs
            ]
            session.add(record)


def run_experiment(
    cfg: RunConfig,
    *,
    out_dir: Optional[Path] = None,
    data_dir: Optional[Path] = None,
    workers: int = 1,
) -> SweepResult:
    """Every (condition, seed) run, reduced in job order"""
    out_dir = Path(out_dir or cfg.out_dir or "runs").resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cond, seed) for cond in cfg.conditions for seed in cfg.seeds]
    logger.info("sweep %s: %d runs into %s", cfg.experiment.value, len(jobs), out_dir)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_single, cfg, cond, seed, out_dir, data_dir) for cond, seed in jobs]
            summaries = [f.result() for f in futures]
    else:
        summaries = [run_single(cfg, cond, seed, out_dir, data_dir) for cond, seed in jobs]

    result = SweepResult(out_dir=out_dir, summaries=summaries)
    result.metrics_path = write_metrics_csv(summaries, out_dir / METRICS_NAME)
    register_runs(out_dir, summaries)
    for s in result.failed:
        logger.error("run %s seed %d failed: %s", s.condition.value, s.seed, s.error)
    return result


def ablation_ab_epochs(
    cfg: RunConfig,
    values: Sequence[int],
    *,
    out_dir: Path,
    data_dir: Optional[Path] = None,
    workers: int = 1,
) -> dict[int, list[Optional[float]]]:
    """Forgetting per seed of C4 runs at each A/B epoch budget"""
    table: dict[int, list[Optional[float]]] = {}
    for n_ab in values:
        sub = cfg.model_copy(update={"ab_epochs": int(n_ab), "conditions": [Condition.C4]})
        sweep = run_experiment(sub, out_dir=Path(out_dir) / f"ab_{n_ab}", data_dir=data_dir, workers=workers)
        table[int(n_ab)] = [s.forgetting for s in sweep.summaries]
        logger.info("ab_epochs=%d forgetting %s", n_ab, table[int(n_ab)])
    return table
