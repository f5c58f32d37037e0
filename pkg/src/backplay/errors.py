"""Exception types shared across the package.

Every error raised by library code derives from BackplayError so the CLI
can map failures to exit codes (2 for configuration problems, 3 for run
failures) without string matching.
"""


class BackplayError(Exception):
    """Base class for all package errors."""


class ConfigError(BackplayError):
    """Invalid configuration file, schedule block, or CLI arguments."""


class MazeGenerationError(BackplayError):
    """Rejection sampling could not produce a valid maze."""


class MazeParseError(ConfigError):
    """Malformed maze file; carries a 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvalidCellError(BackplayError):
    """Reset target is a wall or out of bounds."""


class InvalidStateError(BackplayError):
    """Environment state violates maze invariants (corrupted snapshot)."""


class DemoGenerationError(BackplayError):
    """Noisy demo rejection sampling exhausted its attempt budget."""


class DemoParseError(ConfigError):
    """Malformed demo file; carries a 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DemoValidationError(BackplayError):
    """Demo fails an invariant against its maze; names the failed check."""

    def __init__(self, check: str, message: str):
        super().__init__(f"{check}: {message}")
        self.check = check


class EmptyPoolError(BackplayError):
    """Reverse-curriculum sampler used before its pool was expanded."""


class TrainingDivergedError(BackplayError):
    """Non-finite loss encountered during an update."""


class CheckpointError(BackplayError):
    """Checkpoint file is corrupt or does not match the architecture."""
