import logging
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.table import Table

from morphcl.exceptions import AcceptanceFailure, ConfigError
from morphcl.services.acceptance import SUITES, run_suite
from morphcl.settings import settings

logger = logging.getLogger(__name__)
console = Console()

router = typer.Typer(no_args_is_help=True)


@router.command()
def verify(
    suite: str = typer.Option("acceptance", "--suite", help=f"one of {', '.join(SUITES)}"),
    out: Optional[Path] = typer.Option(None, "--out", help="where experiment checks write their runs"),
):
    """Run a verification suite and exit 3 if any check fails."""
    if suite not in SUITES:
        logger.error("unknown suite %r; expected one of %s", suite, ", ".join(SUITES))
        raise typer.Exit(code=ConfigError.exit_code)

    results = run_suite(
        suite, out_dir=out or settings.out_dir / "verify", data_dir=settings.data, workers=settings.workers
    )

    grid = Table(title=f"{suite} suite")
    grid.add_column("check")
    grid.add_column("result")
    grid.add_column("seconds", justify="right")
    grid.add_column("detail")
    for r in results:
        grid.add_row(r.name, "[green]PASS[/green]" if r.passed else "[red]FAIL[/red]", f"{r.seconds:.1f}", r.detail)
    console.print(grid)

    failed = [r.name for r in results if not r.passed]
    if failed:
        failure = AcceptanceFailure(f"failed checks: {', '.join(failed)}")
        logger.error(failure.detail)
        raise typer.Exit(code=failure.exit_code)
