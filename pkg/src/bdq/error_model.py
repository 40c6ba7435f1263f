"""Analytic quantization-error predictors and a Monte-Carlo check against them.

Conventions: a quantizer with step ``Δ`` covering ``[-c, c]`` has
``c = (2^b - 1) Δ``. Values inside the range are rounded to the nearest
multiple of ``Δ``, and values outside are clipped to ``±c``. The scalar ``x``
is a nonnegative input-magnitude factor that multiplies the squared errors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from bdq.errors import ParameterError
from bdq.numerics import OutlierProfile, make_rng, outlier_mask, sample_matrix
from bdq.quantizer import round_half_away

OUTLIER_MODELS = ("point", "gaussian")
MC_REL_TOL = 0.15


def _check_bits(b: int) -> int:
    if int(b) != b or b < 2:
        raise ParameterError(f"bits must be an integer >= 2, got {b}")
    return int(b)


def _check_x(x: float) -> float:
    if not (x >= 0 and math.isfinite(x)):
        raise ParameterError(f"x must be a finite value >= 0, got {x}")
    return float(x)


def _span(b: int) -> int:
    return 2 ** _check_bits(b) - 1


def scale_from_range(c: float, b: int) -> float:
    if not (c > 0 and math.isfinite(c)):
        raise ParameterError(f"range c must be > 0, got {c}")
    return c / _span(b)


def scale_from_outlier(w_outlier: float, b: int) -> float:
    if w_outlier == 0 or not math.isfinite(w_outlier):
        raise ParameterError("outlier magnitude must be nonzero and finite")
    return abs(w_outlier) / _span(b)


def single_outlier_bound(w_outlier: float, b: int, x: float) -> float:
    """Per-element error bound once an outlier sets the step: ``|w| x / (2^b - 1)``.

    This is the full step times ``x``; the rounding argument alone gives half
    of it, see :func:`half_bound`.
    """
    return abs(w_outlier) * _check_x(x) / _span(b)


def half_bound(w_outlier: float, b: int, x: float) -> float:
    return 0.5 * single_outlier_bound(w_outlier, b, x)


def normal_term_variance(k: float, sigma: float, b: int) -> float:
    """Rounding variance ``Δ'^2 / 12`` when the step is stretched to ``k sigma``."""
    if not (k > 0 and sigma > 0):
        raise ParameterError("k and sigma must be > 0")
    return (k * sigma) ** 2 / (12.0 * _span(b) ** 2)


def outlier_clip_error(w_outlier: float, delta: float, b: int) -> float:
    """Squared truncation error of a single value against the range ``(2^b - 1) Δ'``."""
    if not delta > 0:
        raise ParameterError(f"step must be > 0, got {delta}")
    excess = abs(w_outlier) - _span(b) * delta
    return excess * excess if excess > 0 else 0.0


def expected_clip_error(scale: float, c: float) -> float:
    """``E[(|W| - c)_+^2]`` for ``W ~ N(0, scale^2)``, in closed form."""
    if not (scale > 0 and c >= 0):
        raise ParameterError("scale must be > 0 and c >= 0")
    t = c / scale
    tail = norm.sf(t)
    return float(2.0 * ((scale**2 + c**2) * tail - scale * c * norm.pdf(t)))


def dominance_approx(p: float, w_outlier: float, x: float) -> float:
    if not 0 < p < 1:
        raise ParameterError(f"p must be in (0, 1), got {p}")
    return p * w_outlier**2 * _check_x(x)


@dataclass
class ErrorReport:
    empirical_mse: float
    predicted_normal: float
    predicted_outlier: float
    outlier_frac: float
    total_predicted: float
    dominance_ratio: float
    empirical_normal: float = float("nan")
    empirical_outlier: float = float("nan")
    samples: int = 0

    def __post_init__(self):
        for name in ("predicted_normal", "predicted_outlier", "total_predicted", "dominance_ratio"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if not 0 <= self.outlier_frac < 1:
            raise ParameterError(f"outlier_frac must be in [0, 1), got {self.outlier_frac}")

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no NaN; unmeasured fields become null.
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def relative_gaps(self) -> dict:
        """Relative difference between measured and predicted values, per term."""
        out = {}
        for meas, pred in (
            ("empirical_mse", "total_predicted"),
            ("empirical_normal", "predicted_normal"),
            ("empirical_outlier", "predicted_outlier"),
        ):
            m, p = getattr(self, meas), getattr(self, pred)
            if not math.isnan(m) and p > 0:
                out[pred] = abs(m - p) / p
        return out


def total_error_decomposition(
    profile: OutlierProfile,
    b: int,
    x: float,
    delta: float,
    outlier_model: str = "point",
) -> ErrorReport:
    """Predicted error for a normal/outlier mixture quantized with step ``delta``.

    Normal entries contribute the rounding variance ``delta^2 / 12``. Outliers
    contribute their clipping error against ``c = (2^b - 1) delta``: with the
    ``"point"`` model every outlier has magnitude ``k sigma``, with
    ``"gaussian"`` it is drawn from ``N(0, (k sigma)^2)`` as
    :func:`~bdq.numerics.sample_matrix` does.
    """
    if outlier_model not in OUTLIER_MODELS:
        raise ParameterError(f"outlier_model must be one of {OUTLIER_MODELS}")
    if not delta > 0:
        raise ParameterError(f"step must be > 0, got {delta}")
    x = _check_x(x)
    p = profile.outlier_frac
    c = _span(b) * delta
    normal = delta**2 / 12.0
    scale = profile.k * profile.sigma
    if outlier_model == "point":
        outlier = outlier_clip_error(scale, delta, b)
    else:
        outlier = expected_clip_error(scale, c)
    total = x * ((1 - p) * normal + p * outlier)
    ratio = (x * p * outlier / total) if total > 0 else 0.0
    return ErrorReport(
        empirical_mse=float("nan"),
        predicted_normal=normal,
        predicted_outlier=outlier,
        outlier_frac=p,
        total_predicted=total,
        dominance_ratio=ratio,
    )


def range_quantize(w, c: float, b: int) -> np.ndarray:
    """Round to multiples of ``Δ = c / (2^b - 1)`` and clip to ``[-c, c]``."""
    delta = scale_from_range(c, b)
    n = _span(b)
    return np.clip(round_half_away(np.asarray(w, dtype=np.float64) / delta), -n, n) * delta


def rounding_ratio(b: int, n_samples: int = 10**6, seed: int = 0) -> float:
    """Measured MSE over ``Δ^2 / 12`` for N(0, 1) data with ``c = max |sample|``."""
    w = make_rng(seed).standard_normal(n_samples)
    c = float(np.max(np.abs(w)))
    delta = scale_from_range(c, b)
    mse = float(np.mean((range_quantize(w, c, b) - w) ** 2))
    return mse / (delta**2 / 12.0)


def monte_carlo_report(
    profile: OutlierProfile,
    b: int,
    x: float = 1.0,
    c_clip: float | None = None,
    n_samples: int = 10**6,
) -> ErrorReport:
    """Sample ``profile``, quantize on ``[-c_clip, c_clip]`` and compare with prediction.

    ``c_clip`` defaults to ``4 sigma``. Sampling draws Gaussian outliers, so
    the prediction uses the ``"gaussian"`` outlier model.
    """
    if c_clip is None:
        c_clip = 4.0 * profile.sigma
    delta = scale_from_range(c_clip, b)
    report = total_error_decomposition(profile, b, x, delta, outlier_model="gaussian")
    W = sample_matrix(profile, 1, n_samples)
    mask = outlier_mask(profile, 1, n_samples)
    err2 = (range_quantize(W, c_clip, b) - W) ** 2
    report.empirical_mse = float(np.mean(err2)) * x
    report.empirical_normal = float(np.mean(err2[~mask])) if (~mask).any() else float("nan")
    report.empirical_outlier = float(np.mean(err2[mask])) if mask.any() else float("nan")
    report.samples = int(n_samples)
    return report
