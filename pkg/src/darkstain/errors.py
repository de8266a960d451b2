"""Exception types shared across the staining pipeline."""


class ConfigError(ValueError):
    """Bad or inconsistent configuration. CLI exit code 2."""


class MissingArtifactError(FileNotFoundError):
    """A required checkpoint, LUT, or model file is absent. CLI exit code 3."""


class NumericalError(RuntimeError):
    """Training or evaluation produced non-finite values. CLI exit code 4."""
