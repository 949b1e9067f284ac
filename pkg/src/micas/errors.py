"""Exception types shared across the package."""


class FormatError(ValueError):
    """A binary or text file does not match its declared layout."""


class ConfigurationError(ValueError):
    """A run is missing a prerequisite artifact or has inconsistent settings."""


class TrainingDiverged(RuntimeError):
    """A loss or parameter became non-finite during optimization."""
