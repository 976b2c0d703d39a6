"""Exception types shared across the package.

The CLI maps these onto its exit codes, so every failure a user can trigger
should surface as one of them.
"""


class DimensionError(ValueError):
    """Tensor shapes do not line up."""


class ConfigError(ValueError):
    """An invalid model, training or data configuration."""


class FormatError(ValueError):
    """A file does not follow its binary or text format."""


class ManifestParseError(FormatError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ValidationError(ValueError):
    """Input parsed fine but violates a semantic rule (duplicates, overlaps)."""


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite values."""
