"""Exception hierarchy shared across the package.

Every error carries a stable ``code`` slug; the CLI prints it as the first,
machine-parseable line of any failure.
"""


class McblockError(Exception):
    code = "internal-error"


class DimensionError(McblockError):
    """Tensor shapes incompatible with the requested operation."""

    code = "dimension-error"


class ContractError(McblockError):
    """An operation was called outside its documented contract."""

    code = "contract-error"


class ConfigError(McblockError):
    """Invalid configuration value or combination."""

    code = "config-error"


class ConstructionError(McblockError):
    """Block tiling is impossible for the given shapes."""

    code = "construction-error"


class DegenerateMaskError(McblockError):
    """Mask sampling kept zero cells after the retry budget."""

    code = "degenerate-mask"


class TrainingError(McblockError):
    """Training aborted, e.g. on a non-finite loss."""

    code = "loss-not-finite"


class WeightsError(McblockError):
    """Weight file malformed or incompatible with the configuration."""

    code = "weights-error"


class DataError(McblockError):
    """Dataset missing or malformed on disk."""

    code = "data-error"


class ReportError(McblockError):
    """Metrics report file malformed."""

    code = "report-error"
