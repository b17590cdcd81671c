"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidSplit(ValueError):
    """A split was requested on a cell that cannot be split."""


class InvalidSplitVector(ValueError):
    pass


class ConfigError(ValueError):
    """Configuration validation failure; message carries the field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class CapacityError(RuntimeError):
    """A requested computation exceeds what the dense oracles can hold."""
