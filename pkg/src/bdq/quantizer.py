"""Uniform affine quantization, reconstruction error and code-bin occupancy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bdq import io
from bdq.errors import ParameterError
from bdq.numerics import as_matrix, shannon_entropy

MODES = ("paper_max_abs", "min_max_affine", "symmetric_signed")
GRANULARITIES = ("per_tensor", "per_row")


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole  # exact in binary floating point
    return whole + np.sign(x) * (np.abs(frac) >= 0.5)


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    mode: str = "paper_max_abs"
    granularity: str = "per_tensor"
    clip: float | None = None

    def __post_init__(self):
        if int(self.bits) != self.bits or not 2 <= self.bits <= 16:
            raise ParameterError(f"bits must be an integer in [2, 16], got {self.bits}")
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.granularity not in GRANULARITIES:
            raise ParameterError(f"unknown granularity {self.granularity!r}")
        if self.clip is not None and not self.clip > 0:
            raise ParameterError(f"clip must be > 0, got {self.clip}")

    @property
    def code_range(self) -> tuple[int, int]:
        if self.mode == "symmetric_signed":
            return -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        return 0, 2**self.bits - 1

    @property
    def levels(self) -> int:
        return 2**self.bits

    def to_dict(self) -> dict:
        return {"bits": self.bits, "mode": self.mode, "granularity": self.granularity, "clip": self.clip}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(bits=int(d["bits"]), mode=d["mode"], granularity=d["granularity"], clip=d.get("clip"))


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus one (scale, zero point) per group.

    Groups are the whole tensor (``per_tensor``) or each row (``per_row``).
    ``degenerate`` marks all-zero groups, stored with scale 1 and codes == z.
    ``n_clamped`` counts codes that hit the end of the code range and
    ``n_clipped`` counts inputs cut by ``spec.clip`` before scaling.
    """

    codes: np.ndarray
    scale: np.ndarray
    zero_point: np.ndarray
    spec: QuantSpec
    degenerate: np.ndarray = field(default=None)
    n_clamped: int = 0
    n_clipped: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def group_view(self, a: np.ndarray) -> np.ndarray:
        return a if self.spec.granularity == "per_row" else a.reshape(1, -1)

    def header(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "shape": list(self.shape),
            "scales": [float(s) for s in self.scale],
            "zero_points": [int(z) for z in self.zero_point],
            "degenerate": [bool(d) for d in self.degenerate],
            "n_clamped": self.n_clamped,
            "n_clipped": self.n_clipped,
        }


def _group_params(groups: np.ndarray, spec: QuantSpec):
    b = spec.bits
    amax = np.abs(groups).max(axis=1)
    if spec.mode == "paper_max_abs":
        degenerate = amax == 0
        scale = amax / (2**b - 1)
        # unsigned groups keep z = 0; signed ones shift by half the code range
        zp = np.where(groups.min(axis=1) < 0, 2 ** (b - 1), 0)
    elif spec.mode == "symmetric_signed":
        degenerate = amax == 0
        scale = amax / (2 ** (b - 1) - 1)
        zp = np.zeros(len(groups), dtype=np.int64)
    else:
        lo = np.minimum(groups.min(axis=1), 0.0)
        hi = np.maximum(groups.max(axis=1), 0.0)
        degenerate = hi == lo
        scale = (hi - lo) / (2**b - 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            zp = round_half_away(np.where(degenerate, 0.0, -lo / np.where(degenerate, 1.0, scale)))
        zp = np.clip(zp, 0, 2**b - 1)
    scale = np.where(degenerate, 1.0, scale)
    return scale.astype(np.float64), np.asarray(zp, dtype=np.int64), degenerate


def quantize(W, spec: QuantSpec) -> QuantizedTensor:
    W = as_matrix(W, "W")
    n_clipped = 0
    if spec.clip is not None:
        n_clipped = int(np.count_nonzero(np.abs(W) > spec.clip))
        W = np.clip(W, -spec.clip, spec.clip)
    groups = W if spec.granularity == "per_row" else W.reshape(1, -1)
    scale, zp, degenerate = _group_params(groups, spec)
    raw = round_half_away(groups / scale[:, None]) + zp[:, None]
    lo, hi = spec.code_range
    codes = np.clip(raw, lo, hi)
    n_clamped = int(np.count_nonzero(raw != codes))
    return QuantizedTensor(
        codes=codes.astype(np.int64).reshape(W.shape),
        scale=scale,
        zero_point=zp,
        spec=spec,
        degenerate=degenerate,
        n_clamped=n_clamped,
        n_clipped=n_clipped,
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    codes = q.group_view(q.codes)
    out = (codes - q.zero_point[:, None]) * q.scale[:, None]
    return out.reshape(q.shape).astype(np.float64)


@dataclass(frozen=True)
class ResidualStats:
    """Elementwise statistics of the residual (W - W') x."""

    mean: float
    mse: float
    max_abs: float
    count: int
    degenerate_groups: int = 0

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "mse": self.mse,
            "max_abs": self.max_abs,
            "count": self.count,
            "degenerate_groups": self.degenerate_groups,
        }


def quant_error(W, q: QuantizedTensor, x=None) -> ResidualStats:
    """Residual of ``W x`` against ``W' x`` where ``W'`` is the dequantized ``q``.

    ``x`` may be ``None`` (weight-space residual), a scalar input magnitude,
    or a matrix with ``W.shape[1]`` rows.
    """
    W = as_matrix(W, "W")
    if W.shape != q.shape:
        raise ParameterError(f"W shape {W.shape} does not match quantized shape {q.shape}")
    diff = W - dequantize(q)
    if x is None:
        res = diff
    elif np.ndim(x) == 0:
        res = diff * float(x)
    else:
        x = as_matrix(x, "x")
        if x.shape[0] != W.shape[1]:
            raise ParameterError(f"cannot multiply W {W.shape} by x {x.shape}")
        res = diff @ x
    return ResidualStats(
        mean=float(res.mean()),
        mse=float(np.mean(res**2)),
        max_abs=float(np.abs(res).max()),
        count=int(res.size),
        degenerate_groups=int(np.count_nonzero(q.degenerate)),
    )


def bin_occupancy(q: QuantizedTensor) -> tuple[np.ndarray, float]:
    """Histogram over every code level and its entropy relative to ln(levels)."""
    lo, hi = q.spec.code_range
    hist = np.bincount((q.codes - lo).ravel(), minlength=hi - lo + 1)
    return hist, shannon_entropy(hist) / np.log(q.spec.levels)


def fake_quantize(W, spec: QuantSpec):
    """Quantize-dequantize ``W``; returns the values and a context for :func:`fake_quantize_grad`."""
    W = np.asarray(W, dtype=np.float64)
    q = quantize(W, spec)
    return dequantize(q), (W, q)


def fake_quantize_grad(grad: np.ndarray, ctx) -> np.ndarray:
    """Straight-through gradient of :func:`fake_quantize`.

    Rounding passes gradients unchanged inside the code range and blocks them
    where codes saturate or ``spec.clip`` cuts. For the max-abs modes the scale
    is a function of the largest magnitude, and its gradient is routed back to
    that element; affine scales and zero points are treated as constants.
    """
    W, q = ctx
    spec = q.spec
    Wc = np.clip(W, -spec.clip, spec.clip) if spec.clip is not None else W
    codes = q.group_view(q.codes).astype(np.float64)
    g = q.group_view(np.asarray(grad, dtype=np.float64))
    wg = q.group_view(Wc)
    lo, hi = spec.code_range
    raw = round_half_away(wg / q.scale[:, None]) + q.zero_point[:, None]
    inside = (raw >= lo) & (raw <= hi)
    out = np.where(inside, g, 0.0)

    if spec.mode in ("paper_max_abs", "symmetric_signed"):
        denom = (2**spec.bits - 1) if spec.mode == "paper_max_abs" else (2 ** (spec.bits - 1) - 1)
        d_out_d_scale = (codes - q.zero_point[:, None]) - np.where(inside, wg / q.scale[:, None], 0.0)
        g_scale = np.sum(g * d_out_d_scale, axis=1)
        arg = np.argmax(np.abs(wg), axis=1)
        rows = np.arange(len(wg))
        peak = wg[rows, arg]
        live = ~q.degenerate
        if spec.clip is not None:
            live &= np.abs(peak) < spec.clip
        out[rows[live], arg[live]] += g_scale[live] * np.sign(peak[live]) / denom

    out = out.reshape(W.shape)
    if spec.clip is not None:
        out = np.where(np.abs(W) > spec.clip, 0.0, out)
    return out


def save_quantized(path, q: QuantizedTensor) -> None:
    """Write ``<path>.json`` (header) and ``<path>.bdqi`` (codes)."""
    base = Path(path)
    payload = base.with_suffix(".bdqi")
    header = q.header()
    header["payload"] = payload.name
    base.with_suffix(".json").write_text(io.dumps_json(header))
    payload.write_bytes(io.codes_to_bytes(q.codes))


def load_quantized(path) -> QuantizedTensor:
    base = Path(path)
    header = json.loads(base.with_suffix(".json").read_text())
    codes = io.codes_from_bytes((base.parent / header["payload"]).read_bytes())
    if list(codes.shape) != header["shape"]:
        raise ParameterError("code payload shape does not match header")
    return QuantizedTensor(
        codes=codes,
        scale=np.array(header["scales"], dtype=np.float64),
        zero_point=np.array(header["zero_points"], dtype=np.int64),
        spec=QuantSpec.from_dict(header["spec"]),
        degenerate=np.array(header["degenerate"], dtype=bool),
        n_clamped=header["n_clamped"],
        n_clipped=header["n_clipped"],
    )
