"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad input data, config, or artifact; the CLI maps this to exit code 1."""


class CheckpointError(ValidationError):
    """Corrupt or incompatible checkpoint file."""
