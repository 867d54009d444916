from __future__ import annotations


class MorphCLError(Exception):
    """Base error; `exit_code` is what the CLI exits with when this escapes a command"""

    exit_code: int = 2

    def __init__(self, detail: str, *, exit_code: int | None = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


# --- Model / numeric errors ---
class ArchitectureError(MorphCLError, ValueError):
    pass


class ShapeMismatchError(MorphCLError, ValueError):
    pass


class NonFiniteError(MorphCLError, ValueError):
    pass


class TransferPlanError(MorphCLError, ValueError):
    pass


# --- Data errors ---
class ReplayError(MorphCLError, ValueError):
    pass


class EmptyBufferError(ReplayError):
    pass


class IdxFormatError(MorphCLError, ValueError):
    pass


# --- Harness errors ---
class ConfigError(MorphCLError, ValueError):
    exit_code = 1


class RunFailure(MorphCLError):
    exit_code = 2


class AcceptanceFailure(MorphCLError):
    exit_code = 3
