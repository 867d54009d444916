import logging
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.table import Table

from morphcl.exceptions import ConfigError, MorphCLError, RunFailure
from morphcl.schemas import ExperimentKind
from morphcl.services.harness import ablation_ab_epochs, load_config, run_experiment
from morphcl.services.reports import emit_reports
from morphcl.services.tasks import export_tasks_csv, make_task_sequence
from morphcl.settings import settings

logger = logging.getLogger(__name__)
console = Console()

router = typer.Typer(no_args_is_help=True)


def _csv_list(raw: Optional[str], name: str, cast=str) -> Optional[list]:
    if raw is None:
        return None
    try:
        items = [cast(part.strip()) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--{name} must be a comma-separated list: {raw!r}") from exc
    if not items:
        raise ConfigError(f"--{name} must not be empty")
    return items


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.5g}"


@router.command()
def run(
    config: Optional[Path] = typer.Option(None, "--config", help="JSON run configuration"),
    experiment: Optional[ExperimentKind] = typer.Option(None, "--experiment"),
    conditions: Optional[str] = typer.Option(None, "--conditions", help="e.g. C1,C4"),
    seeds: Optional[str] = typer.Option(None, "--seeds", help="e.g. 0,1,2"),
    out: Optional[Path] = typer.Option(None, "--out", help="artifact directory"),
    ab_epochs: Optional[str] = typer.Option(
        None, "--ab-epochs", help="A/B epochs; a comma list runs the C4 ablation over those values"
    ),
    desk: bool = typer.Option(False, "--desk", help="merge the bundled desk-scale preset under the config"),
):
    """Run every (condition, seed) of an experiment."""
    try:
        ab_values = _csv_list(ab_epochs, "ab-epochs", int)
        overrides = {
            "experiment": experiment.value if experiment else None,
            "conditions": _csv_list(conditions, "conditions"),
            "seeds": _csv_list(seeds, "seeds", int),
            "ab_epochs": ab_values[0] if ab_values and len(ab_values) == 1 else None,
        }
        cfg = load_config(config, desk=desk, overrides=overrides)
        out_dir = out or cfg.out_dir or settings.out_dir

        if ab_values and len(ab_values) > 1:
            table = ablation_ab_epochs(cfg, ab_values, out_dir=out_dir, data_dir=settings.data, workers=settings.workers)
            grid = Table(title=f"{cfg.experiment.value} C4 forgetting by A/B epochs")
            grid.add_column("N_AB")
            for seed in cfg.seeds:
                grid.add_column(f"seed {seed}", justify="right")
            for n_ab, values in table.items():
                grid.add_row(str(n_ab), *(_fmt(v) for v in values))
            console.print(grid)
            return

        sweep = run_experiment(cfg, out_dir=out_dir, data_dir=settings.data, workers=settings.workers)
    except MorphCLError as exc:
        logger.error(exc.detail)
        raise typer.Exit(code=exc.exit_code)

    grid = Table(title=f"{cfg.experiment.value}: {len(sweep.summaries)} runs in {sweep.out_dir}")
    for column in ("condition", "seed", "status", "Avg", "BWT", "FWT", "Forgetting", "final arch"):
        grid.add_column(column)
    for s in sweep.summaries:
        grid.add_row(
            s.condition.value, str(s.seed), s.status, _fmt(s.avg), _fmt(s.bwt), _fmt(s.fwt), _fmt(s.forgetting),
            str(s.final_arch) if s.final_arch else "-",
        )
    console.print(grid)

    if not sweep.ok:
        failure = RunFailure(f"{len(sweep.failed)} of {len(sweep.summaries)} runs failed")
        logger.error(failure.detail)
        raise typer.Exit(code=failure.exit_code)


@router.command()
def report(in_dir: Path = typer.Option(..., "--in", help="sweep output directory")):
    """Aggregate metrics, loss curves and the morph table for a finished sweep."""
    if not in_dir.is_dir():
        logger.error("%s is not a directory", in_dir)
        raise typer.Exit(code=ConfigError.exit_code)
    result = emit_reports(in_dir)

    grid = Table(title=f"metrics per condition ({in_dir})")
    grid.add_column("condition")
    grid.add_column("runs", justify="right")
    for metric in ("Avg", "BWT", "FWT", "Forgetting"):
        grid.add_column(metric, justify="right")
    for row in result.rows:
        cells = [
            f"{_fmt(row.mean[m])} ± {_fmt(row.std[m])}" for m in ("avg", "bwt", "fwt", "forgetting")
        ]
        grid.add_row(row.condition, str(row.n_runs), *cells)
    console.print(grid)
    for path in [result.summary_csv, result.morph_csv, *result.svgs]:
        console.print(f"wrote {path}")


@router.command("export-tasks")
def export_tasks(
    experiment: ExperimentKind = typer.Option(ExperimentKind.SINE10, "--experiment"),
    seed: int = typer.Option(0, "--seed"),
    out: Path = typer.Option(Path("tasks"), "--out"),
    config: Optional[Path] = typer.Option(None, "--config"),
):
    """Write the generated sine tasks of an experiment as CSV."""
    try:
        cfg = load_config(config, overrides={"experiment": experiment.value})
        if cfg.experiment.is_image:
            raise ConfigError(f"export-tasks only covers sine experiments, got {cfg.experiment.value}")
        tasks = make_task_sequence(
            cfg.experiment.task_kind,
            cfg.task_count,
            seed,
            samples_per_task=cfg.samples_per_task,
            ranges=cfg.sine,
            noise_base=cfg.noise_base,
        )
    except MorphCLError as exc:
        logger.error(exc.detail)
        raise typer.Exit(code=exc.exit_code)
    paths = export_tasks_csv(tasks, out, cfg.sine.input_scale)
    console.print(f"wrote {len(paths)} task files to {out}")
