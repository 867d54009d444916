"""Sweep-level reports: aggregated metrics CSV, loss-curve SVGs and the morph table."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from jinja2 import Environment, PackageLoader, select_autoescape
from sqlalchemy import select

from morphcl.database import get_session, registry_url
from morphcl.models import RunRecord
from morphcl.schemas import RunSummary
from morphcl.services.harness import SUMMARY_NAME, read_jsonl
from morphcl.settings import settings

logger = logging.getLogger(__name__)

METRICS = ["avg", "bwt", "fwt", "forgetting"]
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

env = Environment(loader=PackageLoader("morphcl", "templates"), autoescape=select_autoescape(["svg", "j2"]))


@dataclass
class ConditionRow:
    condition: str
    n_runs: int
    mean: dict[str, Optional[float]]
    std: dict[str, Optional[float]]


@dataclass
class ReportResult:
    summary_csv: Path
    morph_csv: Path
    svgs: list[Path] = field(default_factory=list)
    rows: list[ConditionRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _relocate(stored: Path, in_dir: Path) -> Path:
    """A stored run path, or its run-dir twin under in_dir when the stored one does not resolve"""
    if stored.exists():
        return stored
    moved = in_dir / stored.parent.name / stored.name
    return moved if moved.exists() else stored


def find_summaries(in_dir: Path) -> list[Path]:
    """Registry entries first, then any summary on disk the registry does not list"""
    in_dir = Path(in_dir)
    on_disk = sorted(in_dir.glob(f"*/{SUMMARY_NAME}"))
    if not (in_dir / settings.registry_name).exists():
        return on_disk
    with get_session(in_dir) as session:
        stored = session.execute(select(RunRecord.summary_path).order_by(RunRecord.id)).scalars().all()
    found = [_relocate(Path(p), in_dir) for p in stored if p]
    listed = {p.resolve() for p in found if p.exists()}
    return found + [p for p in on_disk if p.resolve() not in listed]


def _stats(values: list[Optional[float]]) -> tuple[Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
    return float(np.mean(vals)), std


def aggregate(summaries: list[RunSummary]) -> list[ConditionRow]:
    grouped: dict[str, list[RunSummary]] = defaultdict(list)
    for s in summaries:
        if s.status == "ok":
            grouped[s.condition.value].append(s)
    rows = []
    for cond in sorted(grouped):
        runs = grouped[cond]
        mean, std = {}, {}
        for metric in METRICS:
            mean[metric], std[metric] = _stats([getattr(s, metric) for s in runs])
        rows.append(ConditionRow(condition=cond, n_runs=len(runs), mean=mean, std=std))
    return rows


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6g}"


def write_summary_csv(rows: list[ConditionRow], path: Path) -> Path:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["condition", "n_runs"]
        for metric in METRICS:
            header += [f"{metric}_mean", f"{metric}_std"]
        writer.writerow(header)
        for row in rows:
            line = [row.condition, row.n_runs]
            for metric in METRICS:
                line += [_fmt(row.mean[metric]), _fmt(row.std[metric])]
            writer.writerow(line)
    return Path(path)


def write_morph_table(summaries: list[RunSummary], path: Path) -> Path:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "seed", "task", "mode", "transition", "pre_loss", "post_loss", "n_ab"])
        for s in summaries:
            for m in s.morphs:
                transition = f"[{','.join(map(str, m.arch_old))}] -> [{','.join(map(str, m.arch_new))}]"
                writer.writerow([s.condition.value, s.seed, m.task, m.mode, transition, _fmt(m.pre_loss), _fmt(m.post_loss), m.n_ab])
    return Path(path)


def _curves(log_rows: list[dict]) -> tuple[dict[str, list[float]], list[int]]:
    series: dict[str, list[float]] = {"hamiltonian": [], "current task": []}
    boundaries, last_task = [], None
    for row in log_rows:
        if row.get("type") != "epoch" or row.get("phase") != "train":
            continue
        if last_task is not None and row["task"] != last_task:
            boundaries.append(len(series["hamiltonian"]))
        last_task = row["task"]
        series["hamiltonian"].append(row["hamiltonian_loss"])
        series["current task"].append(row["current_loss"])
    return series, boundaries


def render_curves(title: str, curves: dict[str, np.ndarray], boundaries: list[int], path: Path, width: int = 640, height: int = 360) -> Path:
    margin = 40
    values = np.concatenate([c for c in curves.values() if c.size]) if curves else np.zeros(1)
    log_scale = bool(np.all(values > 0))
    if log_scale:
        values = np.log10(values)
    y_min, y_max = float(values.min()), float(values.max())
    span = y_max - y_min or 1.0
    n_steps = max((c.size for c in curves.values()), default=1)

    def px(i: int) -> float:
        return margin + (width - 2 * margin) * i / max(n_steps - 1, 1)

    def py(v: float) -> float:
        return height - margin - (height - 2 * margin) * (v - y_min) / span

    drawn = []
    for k, (label, curve) in enumerate(curves.items()):
        ys = np.log10(curve) if log_scale else curve
        points = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(ys))
        drawn.append({"label": label, "color": COLORS[k % len(COLORS)], "points": points})

    svg = env.get_template("loss_curves.svg.j2").render(
        title=title + (" (log10)" if log_scale else ""),
        width=width,
        height=height,
        margin=margin,
        n_steps=n_steps,
        y_min=y_min,
        y_max=y_max,
        boundaries=[px(b) for b in boundaries],
        curves=drawn,
    )
    Path(path).write_text(svg)
    return Path(path)


def emit_reports(in_dir: Path) -> ReportResult:
    """Partial reports (with warnings) when logs or summaries are missing"""
    in_dir = Path(in_dir)
    warnings: list[str] = []
    summaries: list[RunSummary] = []
    for path in find_summaries(in_dir):
        if not path.exists():
            warnings.append(f"missing summary {path}")
            continue
        summaries.append(RunSummary.model_validate_json(path.read_bytes()))
    if not summaries:
        warnings.append(f"no run summaries under {in_dir}")

    rows = aggregate(summaries)
    result = ReportResult(
        summary_csv=write_summary_csv(rows, in_dir / "metrics_summary.csv"),
        morph_csv=write_morph_table(summaries, in_dir / "morph_table.csv"),
        rows=rows,
        warnings=warnings,
    )

    per_condition: dict[str, list[tuple[dict[str, list[float]], list[int]]]] = defaultdict(list)
    for s in summaries:
        log_path = _relocate(Path(s.log_path), in_dir) if s.log_path else None
        if log_path is None or not log_path.exists():
            warnings.append(f"missing log for {s.condition.value} seed {s.seed}")
            continue
        per_condition[s.condition.value].append(_curves(read_jsonl(log_path)))

    for cond in sorted(per_condition):
        runs = [r for r in per_condition[cond] if r[0]["hamiltonian"]]
        if not runs:
            continue
        n = min(len(r[0]["hamiltonian"]) for r in runs)
        mean_curves = {label: np.mean([r[0][label][:n] for r in runs], axis=0) for label in runs[0][0]}
        boundaries = [b for b in runs[0][1] if b < n]
        title = f"{summaries[0].experiment.value} {cond}: mean over {len(runs)} seeds"
        result.svgs.append(render_curves(title, mean_curves, boundaries, in_dir / f"loss_curves_{cond}.svg"))

    for w in warnings:
        logger.warning(w)
    logger.info("reports written to %s (registry %s)", in_dir, registry_url(in_dir))
    return result
