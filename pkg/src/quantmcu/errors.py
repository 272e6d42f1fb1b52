"""Exception types shared across the package."""


class QuantMCUError(Exception):
    """Base class for all quantmcu errors."""


class NetworkFormatError(QuantMCUError):
    """Network description file is malformed or has unknown keys."""


class NonPositiveShape(QuantMCUError):
    """A layer produced a feature map with a non-positive dimension."""


class SpatialOnly(QuantMCUError):
    """Receptive-field arithmetic hit a non-spatial (fc) layer."""


class UnevenGrid(QuantMCUError):
    """Patch grid does not tile the split feature map evenly (strict mode)."""


class UnknownBitwidth(QuantMCUError):
    """Bitwidth outside the supported set."""


class ShapeMismatch(QuantMCUError):
    """Tensor shape inconsistent with the network."""


class MissingRange(QuantMCUError):
    """Quantized forward pass lacks a calibration range for a feature map."""


class EmptyCalibration(QuantMCUError):
    """Calibration set has no samples."""


class TooFewSamples(QuantMCUError):
    """Not enough samples for a Gaussian fit."""


class DegenerateSigma(QuantMCUError):
    """Outlier classification requested with sigma == 0."""


class BadRange(QuantMCUError):
    """Quantization range with lo >= hi."""


class EmptyValues(QuantMCUError):
    """Histogram over an empty value pool."""


class EmptyPatch(QuantMCUError):
    """Patch classification over an empty patch."""


class ZeroBitops(QuantMCUError):
    """Score normalization over a branch with zero MACs."""


class TensorFormatError(QuantMCUError):
    """Tensor file is not a valid QMTN record."""


class Infeasible(QuantMCUError):
    """No bitwidth assignment can satisfy the memory constraint.

    ``branch_id`` identifies the offending dataflow branch when the error
    surfaces from the pipeline ("post" for the shared post-stage chain).
    """

    def __init__(self, message, branch_id=None):
        super().__init__(message)
        self.branch_id = branch_id
