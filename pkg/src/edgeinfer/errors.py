"""Exception hierarchy shared across the toolkit.

Every error carries a stable machine-readable ``code`` so the CLI and the
HTTP gateway can map failures without string matching.
"""


class EdgeInferError(Exception):
    code = "internal-error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class UnsupportedCastError(EdgeInferError):
    code = "unsupported-cast"


class InvalidQuantParamsError(EdgeInferError):
    code = "invalid-quant-params"


class InvalidTensorError(EdgeInferError):
    code = "invalid-tensor"


class GraphError(EdgeInferError):
    """Structural graph defects: unknown ops, dangling ids, arity violations."""

    code = "invalid-graph"


class BundleError(EdgeInferError):
    """Bundle container defects: bad manifest, checksum mismatch, version skew."""

    code = "invalid-bundle"


class ShapeMismatchError(EdgeInferError):
    code = "shape-mismatch"


class DTypeMismatchError(EdgeInferError):
    code = "dtype-mismatch"


class ImageDecodeError(EdgeInferError):
    code = "undecodable-image"


class CalibrationError(EdgeInferError):
    code = "missing-calibration"


class DataError(EdgeInferError):
    code = "invalid-dataset"


class MetricsError(EdgeInferError):
    code = "invalid-metrics-input"


class BenchError(EdgeInferError):
    code = "bench-failed"


class PowerLogError(EdgeInferError):
    code = "invalid-power-log"


class ConfigError(EdgeInferError):
    code = "invalid-config"
