# Error hierarchy shared across the package. Every error carries a short
# machine-parsable category that the CLI prints on failure.


class MarsError(Exception):
    category = "internal"


class InvalidInputError(MarsError):
    category = "invalid-input"


class InvalidConfigError(MarsError):
    category = "invalid-config"


class MissingPrerequisiteError(MarsError):
    category = "missing-prerequisite"


class IoError(MarsError):
    category = "io-error"


class StageError(MarsError):
    """Failure inside a named pipeline stage; wraps the original error."""

    category = "stage-failure"

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
