"""Error hierarchy shared by every posekey module.

Each class carries a short ``category`` string; the CLI prints it as
``error: <category>: <message>`` and maps it to an exit code.
"""


class PosekeyError(Exception):
    category = "runtime"


class ArgumentError(PosekeyError, ValueError):
    """Invalid argument: bad shape, range or mismatched layout."""

    category = "argument"


class ConfigError(ArgumentError):
    """Malformed or unknown configuration value (usage error)."""

    category = "usage"


class DegeneratePoseError(ArgumentError):
    category = "degenerate-pose"


class GenerationError(PosekeyError):
    category = "generation"


class DatasetError(PosekeyError):
    """Dataset I/O failure or inconsistent manifest; message names the path."""

    category = "dataset"


class DetectorError(PosekeyError):
    category = "detector"

    def __init__(self, message: str, raw_line: str = ""):
        super().__init__(message)
        self.raw_line = raw_line


class DivergenceError(PosekeyError):
    """A loss or gradient became non-finite during training."""

    category = "divergence"

    def __init__(self, component: str, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {component}{where}")
        self.component = component
        self.step = step


class CheckpointError(PosekeyError):
    category = "checkpoint"


class NumericError(PosekeyError):
    category = "numeric"
