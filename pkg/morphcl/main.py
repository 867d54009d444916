import logging

import typer
from rich.logging import RichHandler

from morphcl.routers.experiment_router import router as experiment_router
from morphcl.routers.verify_router import router as verify_router
from morphcl.settings import LogFormat, settings

app = typer.Typer(
    name="morphcl",
    help="Continual learning with architecture search and low-rank weight transfer.",
    no_args_is_help=True,
)


# --- Logging ---
def configure_logging(level: str = settings.log_level, fmt: LogFormat = settings.log_format) -> None:
    if fmt is LogFormat.RICH:
        handler: logging.Handler = RichHandler(rich_tracebacks=True, show_path=False)
        formatter = logging.Formatter("%(name)s: %(message)s")
    else:
        handler = logging.StreamHandler()
        formatter = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handler.setFormatter(formatter)
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="debug logging")):
    configure_logging("DEBUG" if verbose else settings.log_level)


# Register the command routers
app.add_typer(experiment_router)
app.add_typer(verify_router)


if __name__ == "__main__":
    app()
