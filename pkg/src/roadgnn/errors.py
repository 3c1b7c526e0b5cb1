"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class ConfigError(ValidationError):
    """Raised when a configuration is internally inconsistent."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss goes non-finite.

    The last good checkpoint (if any) is left on disk; its path is
    carried in ``checkpoint``.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
