"""Bidirectional diagonal quantization toolkit.

Outlier-aware post-training quantization at desk scale: an affine quantizer
and analytic error model, the Flatness metric with its optimal diagonal
scaling, rotation/diagonal transform pairs, and a small calibration loop.
"""

from bdq.numerics import OutlierProfile, frobenius_normalize, sample_matrix, shannon_entropy
from bdq.quantizer import QuantSpec, QuantizedTensor, bin_occupancy, dequantize, quant_error, quantize
from bdq.flatness import BiDiagonalTransform, FlatnessState, apply_bidiagonal, flatness_value, optimize_flatness
from bdq.transforms import KroneckerTransform, TransformPair, apply_pair_forward, hadamard, random_rotation
from bdq.error_model import ErrorReport, monte_carlo_report, total_error_decomposition
from bdq.calibration import CalibrationConfig, calibrate, rce_loss, toy_network
from bdq.harness import CompareConfig, compare, run_validation

__version__ = "0.1.0"

__all__ = [
    "OutlierProfile",
    "sample_matrix",
    "shannon_entropy",
    "frobenius_normalize",
    "QuantSpec",
    "QuantizedTensor",
    "quantize",
    "dequantize",
    "quant_error",
    "bin_occupancy",
    "FlatnessState",
    "BiDiagonalTransform",
    "flatness_value",
    "optimize_flatness",
    "apply_bidiagonal",
    "TransformPair",
    "KroneckerTransform",
    "hadamard",
    "random_rotation",
    "apply_pair_forward",
    "ErrorReport",
    "total_error_decomposition",
    "monte_carlo_report",
    "CalibrationConfig",
    "calibrate",
    "rce_loss",
    "toy_network",
    "CompareConfig",
    "compare",
    "run_validation",
]
