"""Toy network, CE/RCE losses and a gradient-descent calibration loop.

Calibration learns each layer's diagonals (in log space) and optionally the
skew parameters of its rotation, so that the quantized network's softmax
output tracks the full-precision network's. Backprop is written out by hand
and the quantizer uses the straight-through estimator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from bdq.errors import DivergenceError, DomainError, ParameterError
from bdq.numerics import as_matrix, make_rng, xlogx
from bdq.quantizer import QuantSpec, fake_quantize, fake_quantize_grad
from bdq.transforms import TransformPair, cayley, hadamard, is_power_of_two

ACTIVATIONS = ("none", "relu")
LOSSES = ("ce", "rce")
TRACE_COLUMNS = ("epoch", "train_loss", "heldout_loss", "mean_flatness", "max_abs_weight")


# ---------------------------------------------------------------- losses


def _check_dist(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise DomainError(f"{name} must be finite and nonnegative")
    s = v.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-9):
        raise DomainError(f"{name} must sum to 1")
    return v


def _check_delta(delta: float) -> float:
    if not 0.0 <= delta <= 1.0:
        raise ParameterError(f"delta must be in [0, 1], got {delta}")
    return float(delta)


def _safe_log(v: np.ndarray, where: np.ndarray, what: str) -> np.ndarray:
    if np.any((v <= 0) & where):
        raise DomainError(what)
    return np.log(np.where(where, v, 1.0))


def cross_entropy(q, p) -> float:
    """``-Σ q ln p``."""
    q = _check_dist(q, "q")
    p = _check_dist(p, "p")
    lp = _safe_log(p, q > 0, "p must be positive wherever q is")
    return float(-np.sum(q * lp))


def entropy(p) -> float:
    return float(-np.sum(xlogx(_check_dist(p, "p"))))


def _mixture(q, p, delta, p_bar=None):
    return delta * (p if p_bar is None else p_bar) + (1.0 - delta) * q


def rce_loss(q, p, delta: float = 0.5, p_bar=None) -> float:
    """``-Σ (q ln p - p ln(δ p + (1-δ) q))``, natural log.

    ``p_bar`` replaces ``p`` inside the mixture (a running prediction);
    by default the current prediction is used.
    """
    q = _check_dist(q, "q")
    p = _check_dist(p, "p")
    delta = _check_delta(delta)
    m = _mixture(q, p, delta, p_bar)
    lp = _safe_log(p, q > 0, "p must be positive wherever q is")
    lm = _safe_log(m, p > 0, "mixture is zero where p is positive")
    return float(-np.sum(q * lp - p * lm))


def rce_gradient(q, p, delta: float = 0.5, p_bar=None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`rce_loss` with respect to ``p`` and to the logits of ``p``.

    The logit gradient assumes ``p = softmax(z)``. Works row-wise on batches.
    """
    q = _check_dist(q, "q")
    p = _check_dist(p, "p")
    delta = _check_delta(delta)
    m = _mixture(q, p, delta, p_bar)
    if np.any((p <= 0) & (q > 0)):
        raise DomainError("p must be positive wherever q is")
    lm = _safe_log(m, p > 0, "mixture is zero where p is positive")
    gp = -np.divide(q, p, out=np.zeros_like(q), where=q > 0) + lm
    if p_bar is None:
        gp = gp + np.divide(delta * p, m, out=np.zeros_like(p), where=p > 0)
    return gp, _softmax_backward(p, gp)


def ce_gradient(q, p) -> tuple[np.ndarray, np.ndarray]:
    q = _check_dist(q, "q")
    p = _check_dist(p, "p")
    if np.any((p <= 0) & (q > 0)):
        raise DomainError("p must be positive wherever q is")
    gp = -np.divide(q, p, out=np.zeros_like(q), where=q > 0)
    return gp, p - q


def _softmax_backward(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    return p * (gp - np.sum(p * gp, axis=-1, keepdims=True))


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- network


@dataclass
class Layer:
    W: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {ACTIVATIONS}")


@dataclass
class ToyNetwork:
    """A chain ``x -> act(x W_1) -> ... -> x W_L`` with one transform pair per layer.

    Each layer undoes its output diagonal right after the matmul, so the
    pairs cancel exactly when nothing is quantized.
    """

    layers: list[Layer]
    pairs: list[TransformPair] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ParameterError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[1] != b.W.shape[0]:
                raise ParameterError(f"layer shapes {a.W.shape} and {b.W.shape} do not chain")
        if not self.pairs:
            self.pairs = [TransformPair.identity(*L.W.shape) for L in self.layers]
        self._check_pairs(self.pairs)

    def _check_pairs(self, pairs):
        if len(pairs) != len(self.layers):
            raise ParameterError("one pair per layer is required")
        for L, P in zip(self.layers, pairs):
            if (P.n_in, P.n_out) != L.W.shape:
                raise ParameterError(f"pair {P.n_in}x{P.n_out} does not fit layer {L.W.shape}")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].W.shape[0]] + [L.W.shape[1] for L in self.layers]

    def with_pairs(self, pairs) -> "ToyNetwork":
        return ToyNetwork(self.layers, list(pairs))

    def forward(self, x, spec: QuantSpec | None = None, act_spec: QuantSpec | None = None, pairs=None) -> np.ndarray:
        """Network output; ``spec``/``act_spec`` quantize weights/activations when given."""
        pairs = self.pairs if pairs is None else pairs
        self._check_pairs(pairs)
        act_spec = spec if act_spec is None else act_spec
        h = as_matrix(x, "x")
        for L, P in zip(self.layers, pairs):
            u = P.transform_input(h)
            V = P.transform_weight(L.W)
            if act_spec is not None:
                u = fake_quantize(u, act_spec)[0]
            if spec is not None:
                V = fake_quantize(V, spec)[0]
            h = (u @ V) / P.lambda2
            if L.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def transformed_weights(self, pairs=None) -> list[np.ndarray]:
        pairs = self.pairs if pairs is None else pairs
        return [P.transform_weight(L.W) for L, P in zip(self.layers, pairs)]


def plant_weight_outliers(W: np.ndarray, count: int, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Copy of ``W`` with ``count`` random entries set to ``±magnitude``."""
    W = np.array(W, dtype=np.float64)
    idx = rng.choice(W.size, size=count, replace=False)
    W.flat[idx] = magnitude * rng.choice([-1.0, 1.0], size=count)
    return W


def toy_network(
    dims=(16, 16, 8),
    seed: int = 0,
    n_outliers: int = 2,
    outlier_scale: float = 20.0,
) -> ToyNetwork:
    """Random relu chain with ``n_outliers`` weights per layer planted at ``±outlier_scale`` std."""
    rng = make_rng(seed)
    layers = []
    for i, (n, m) in enumerate(zip(dims, dims[1:])):
        std = 1.0 / math.sqrt(n)
        W = rng.standard_normal((n, m)) * std
        if n_outliers:
            W = plant_weight_outliers(W, n_outliers, outlier_scale * std, rng)
        layers.append(Layer(W, "relu" if i < len(dims) - 2 else "none"))
    return ToyNetwork(layers)


# ---------------------------------------------------------------- calibration


@dataclass
class CalibrationConfig:
    learning_rate: float = 5e-3
    epochs: int = 300
    delta: float = 0.5
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    loss: str = "ce"
    calib_set_size: int = 128
    learn_rotation: bool = False
    ema: float = 0.0  # > 0 feeds a running prediction into the RCE mixture
    heldout_size: int = 256

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        _check_delta(self.delta)
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {LOSSES}")
        if self.epochs < 0 or self.batch_size < 0:
            raise ParameterError("epochs and batch_size must be >= 0")
        if self.calib_set_size < 1:
            raise ParameterError("calib_set_size must be >= 1")
        if not 0.0 <= self.ema < 1.0:
            raise ParameterError("ema must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    heldout_loss: float
    mean_flatness: float
    max_abs_weight: float


@dataclass
class CalibrationResult:
    pairs: list[TransformPair]
    trace: list[TraceRow]

    def heldout_curve(self) -> np.ndarray:
        return np.array([r.heldout_loss for r in self.trace])

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.trace:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.heldout_loss), repr(r.mean_flatness), repr(r.max_abs_weight)])


class _Params:
    """Trainable state of one layer: log-diagonals and an optional skew generator."""

    def __init__(self, pair: TransformPair, learn_rotation: bool):
        self.a = np.log(pair.lambda1)
        self.c = np.log(pair.lambda2)
        self.learn_rotation = learn_rotation
        n = pair.n_in
        self.H = hadamard(n) if (pair.with_hadamard and is_power_of_two(n)) else np.eye(n)
        # Recover the Cayley factor so rotation learning starts from the given R.
        C0 = self.H.T @ pair.R
        eye = np.eye(n)
        # C = (I - S)(I + S)^{-1}  =>  S = (I + C)^{-1}(I - C)
        if learn_rotation:
            self.S = np.linalg.solve(eye + C0, eye - C0)
            self.S = (self.S - self.S.T) / 2
        else:
            self.S = None
        self.R_fixed = pair.R
        self.template = pair

    @property
    def R(self) -> np.ndarray:
        if self.S is None:
            return self.R_fixed
        return self.H @ cayley(self.S)

    def to_pair(self) -> TransformPair:
        t = self.template
        return TransformPair(np.exp(self.a), np.exp(self.c), self.R, seed=t.seed, with_hadamard=t.with_hadamard, meta=dict(t.meta))


def _forward_train(net: ToyNetwork, params, x, spec, act_spec):
    cache = []
    h = x
    for L, P in zip(net.layers, params):
        la, lc = np.exp(P.a), np.exp(P.c)
        R = P.R
        s = h * la
        t = s @ R
        M = L.W / la[:, None]
        N = R.T @ M
        Pm = N * lc[None, :]
        u, ctx_u = fake_quantize(t, act_spec) if act_spec is not None else (t, None)
        V, ctx_v = fake_quantize(Pm, spec) if spec is not None else (Pm, None)
        z = (u @ V) / lc
        out = np.maximum(z, 0.0) if L.activation == "relu" else z
        cache.append((h, s, M, Pm, u, V, z, ctx_u, ctx_v, R))
        h = out
    return h, cache


def _backward(net: ToyNetwork, params, cache, g_out):
    grads = [None] * len(params)
    g = g_out
    for i in range(len(params) - 1, -1, -1):
        L, P = net.layers[i], params[i]
        h, s, M, Pm, u, V, z, ctx_u, ctx_v, R = cache[i]
        la, lc = np.exp(P.a), np.exp(P.c)
        if L.activation == "relu":
            g = g * (z > 0)
        gz0 = g / lc
        gc = -np.sum(g * z, axis=0)
        gu = gz0 @ V.T
        gV = u.T @ gz0
        gt = fake_quantize_grad(gu, ctx_u) if ctx_u is not None else gu
        gP = fake_quantize_grad(gV, ctx_v) if ctx_v is not None else gV
        gc = gc + np.sum(gP * Pm, axis=0)
        gN = gP * lc[None, :]
        gM = R @ gN
        ga = -np.sum(gM * M, axis=1)
        gs = gt @ R.T
        ga = ga + np.sum(gs * s, axis=0)
        gS = None
        if P.S is not None:
            gR = s.T @ gt + M @ gN.T
            gC = P.H.T @ gR
            eye = np.eye(len(P.a))
            C = cayley(P.S)
            # dC = -(I + C) dS (I + S)^{-1}
            gSf = -(eye + C).T @ gC @ np.linalg.inv(eye + P.S).T
            gS = (gSf - gSf.T) / 2
        grads[i] = (ga, gc, gS)
        g = gs * la
    return grads


def _loss_and_grad(cfg: CalibrationConfig, q, logits, p_bar=None):
    p = softmax(logits)
    p = np.clip(p, 1e-300, None)
    p = p / p.sum(axis=1, keepdims=True)
    n = len(q)
    if cfg.loss == "ce":
        loss = cross_entropy(q, p) / n
        _, gz = ce_gradient(q, p)
    else:
        loss = rce_loss(q, p, cfg.delta, p_bar) / n
        _, gz = rce_gradient(q, p, cfg.delta, p_bar)
    return loss, gz / n, p


def _flatness_of(V: np.ndarray) -> float:
    e = V * V
    return float(np.sum(xlogx(e / e.sum())))


def calibrate(
    net: ToyNetwork,
    calib_inputs,
    spec: QuantSpec | None,
    cfg: CalibrationConfig,
    act_spec: QuantSpec | None = None,
    heldout_inputs=None,
) -> CalibrationResult:
    """Fit the network's pairs so the quantized output matches the full-precision one.

    The teacher runs with identity pairs and no quantization. ``spec``
    quantizes weights and ``act_spec`` (defaulting to ``spec``) activations;
    ``None`` for both disables quantization. Plain gradient descent with a
    cosine-decayed step size; raises :class:`DivergenceError` on a non-finite
    loss.
    """
    X = np.asarray(calib_inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ParameterError("calibration set must be a non-empty 2-D batch")
    act_spec = spec if act_spec is None else act_spec
    teacher = net.forward(X, pairs=[TransformPair.identity(*L.W.shape) for L in net.layers])
    q_all = softmax(teacher)
    if heldout_inputs is not None:
        Xh = np.asarray(heldout_inputs, dtype=np.float64)
        qh = softmax(net.forward(Xh, pairs=[TransformPair.identity(*L.W.shape) for L in net.layers]))
    params = [_Params(P, cfg.learn_rotation) for P in net.pairs]
    rng = make_rng(cfg.seed)
    bs = cfg.batch_size or len(X)
    p_bar = softmax(net.forward(X, spec, act_spec)) if cfg.ema > 0 else None
    trace: list[TraceRow] = []

    def heldout_loss():
        if heldout_inputs is None:
            return float("nan")
        out, _ = _forward_train(net, params, Xh, spec, act_spec)
        return _loss_and_grad(cfg, qh, out)[0]

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / max(cfg.epochs, 1)))
        order = rng.permutation(len(X)) if bs < len(X) else np.arange(len(X))
        total = 0.0
        for start in range(0, len(X), bs):
            idx = order[start : start + bs]
            out, cache = _forward_train(net, params, X[idx], spec, act_spec)
            pb = p_bar[idx] if p_bar is not None else None
            loss, gz, p = _loss_and_grad(cfg, q_all[idx], out, pb)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}", trace=trace)
            total += loss * len(idx)
            grads = _backward(net, params, cache, gz)
            for P, (ga, gc, gS) in zip(params, grads):
                P.a -= lr * ga
                P.c -= lr * gc
                if gS is not None:
                    P.S -= lr * gS
            if p_bar is not None:
                p_bar[idx] = cfg.ema * p_bar[idx] + (1.0 - cfg.ema) * p
        Vs = [P.to_pair().transform_weight(L.W) for L, P in zip(net.layers, params)]
        trace.append(
            TraceRow(
                epoch=epoch,
                train_loss=total / len(X),
                heldout_loss=heldout_loss(),
                mean_flatness=float(np.mean([_flatness_of(V) for V in Vs])),
                max_abs_weight=float(max(np.max(np.abs(V)) for V in Vs)),
            )
        )
    return CalibrationResult([P.to_pair() for P in params], trace)


def output_mse(net: ToyNetwork, x, spec, act_spec=None, pairs=None) -> float:
    """MSE between the quantized network output and the full-precision reference."""
    ref = net.forward(x, pairs=[TransformPair.identity(*L.W.shape) for L in net.layers])
    return float(np.mean((net.forward(x, spec, act_spec, pairs) - ref) ** 2))
