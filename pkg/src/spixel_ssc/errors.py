"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class ConfigError(ValueError):
    """A run or command was configured inconsistently."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared in a numerical stage."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"non-finite values in stage '{stage}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)
