"""Exception types shared across the toolkit."""


class QlwaError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QlwaError):
    """Tensor dimensions incompatible with an operation."""


class FormatError(QlwaError):
    """Malformed on-disk artifact (tensor file, model, dataset, config)."""


class GraphError(QlwaError):
    """Structurally invalid network graph."""


class ConfigError(QlwaError):
    """Invalid quantization or analysis configuration."""
