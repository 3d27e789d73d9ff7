"""Exception types. Each carries a short machine-readable ``code`` used by the CLI."""


class DysiError(Exception):
    code = "E_DYSI"


class ShapeError(DysiError, ValueError):
    code = "E_SHAPE"


class ConfigError(DysiError, ValueError):
    code = "E_CONFIG"


class NumericError(DysiError, FloatingPointError):
    code = "E_NUMERIC"


class InputError(DysiError, ValueError):
    code = "E_INPUT"


class DegenerateInputError(InputError):
    code = "E_DEGENERATE"


class ParseError(InputError):
    code = "E_PARSE"

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CheckpointError(DysiError):
    code = "E_CHECKPOINT"


class LockError(DysiError):
    code = "E_LOCKED"
