"""Flatness of a matrix and the diagonal row/column scaling that minimizes it.

For positive row weights alpha and column weights beta the matrix induces
``p_ij = W_ij^2 / (alpha_i beta_j)`` and Flatness is ``F = sum p ln p``. Lower F
means the energy is spread more evenly.

Minimizing F under ``sum p = 1`` is block-separable. With beta fixed, write
each row's share as ``r_k`` and its normalized profile as ``P_k`` with entropy
``H_k``; then ``-F = H(r) + sum_k r_k H_k``, which is maximized by
``r_k ∝ exp(H_k)``. That gives the row update ``alpha_k ∝ S_k exp(-H_k)`` with
``S_k = sum_j W_kj^2 / beta_j``, a function of row k alone. Columns are
symmetric. Alternating the two exact block updates never increases F.

The problem is not convex: small matrices already have several local optima,
so :func:`optimize_flatness` runs the alternation from several starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bdq.errors import DegenerateInputError, DomainError, ParameterError
from bdq.numerics import as_matrix, frobenius_normalize, make_rng, xlogx


def _check_weights(alpha, beta, shape):
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if alpha.shape != (shape[0],) or beta.shape != (shape[1],):
        raise ParameterError(f"alpha/beta lengths {alpha.size}/{beta.size} do not match W {shape}")
    if np.any(~(alpha > 0)) or np.any(~(beta > 0)):
        raise DomainError("alpha and beta must be strictly positive")
    return alpha, beta


def induced_distribution(W, alpha, beta) -> np.ndarray:
    W = as_matrix(W, "W")
    alpha, beta = _check_weights(alpha, beta, W.shape)
    return W**2 / np.outer(alpha, beta)


@dataclass
class FlatnessState:
    """Row/column energy weights of ``W`` with the quantities they induce.

    All fields refer to the matrix the state was built from, which for
    :func:`optimize_flatness` is the Frobenius-normalized input.
    """

    alpha: np.ndarray
    beta: np.ndarray
    F: float
    norm_residual: float
    energy_residual: float
    C: float = 1.0
    lambda1: float = float("nan")
    lambda2: float = float("nan")
    stationarity: float = float("nan")
    iterations: int = 0
    converged: bool = False
    history: list = field(default_factory=list)

    @classmethod
    def from_weights(cls, W, alpha, beta, C: float = 1.0) -> "FlatnessState":
        W = as_matrix(W, "W")
        alpha, beta = _check_weights(alpha, beta, W.shape)
        p = W**2 / np.outer(alpha, beta)
        energy = float(np.sum(np.outer(alpha, beta) * W**2))
        state = cls(
            alpha=alpha,
            beta=beta,
            F=float(xlogx(p).sum()),
            norm_residual=abs(float(p.sum()) - 1.0),
            energy_residual=abs(energy - C),
            C=C,
        )
        state.lambda1, state.lambda2, state.stationarity = fit_multipliers(W, state)
        return state

    def to_dict(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "beta": [float(b) for b in self.beta],
            "F": self.F,
            "norm_residual": self.norm_residual,
            "energy_residual": self.energy_residual,
            "C": self.C,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "stationarity": self.stationarity,
            "iterations": self.iterations,
            "converged": self.converged,
        }


@dataclass(frozen=True)
class BiDiagonalTransform:
    """Row scales ``d1`` and column scales ``d2``; flattening divides by ``d1_i d2_j``."""

    d1: np.ndarray
    d2: np.ndarray

    def __post_init__(self):
        d1 = np.asarray(self.d1, dtype=np.float64).ravel()
        d2 = np.asarray(self.d2, dtype=np.float64).ravel()
        if np.any(~(d1 > 0)) or np.any(~(d2 > 0)) or not (np.all(np.isfinite(d1)) and np.all(np.isfinite(d2))):
            raise DomainError("diagonal scales must be finite and strictly positive")
        object.__setattr__(self, "d1", d1)
        object.__setattr__(self, "d2", d2)

    @classmethod
    def from_state(cls, state: FlatnessState) -> "BiDiagonalTransform":
        return cls(np.sqrt(state.alpha), np.sqrt(state.beta))

    @classmethod
    def identity(cls, m: int, n: int) -> "BiDiagonalTransform":
        return cls(np.ones(m), np.ones(n))


def flatness_value(W, state: FlatnessState) -> float:
    return float(xlogx(induced_distribution(W, state.alpha, state.beta)).sum())


def constraint_residuals(W, state: FlatnessState) -> tuple[float, float]:
    """Deviation from ``sum p = 1`` and from ``sum alpha W^2 beta = C``."""
    W = as_matrix(W, "W")
    alpha, beta = _check_weights(state.alpha, state.beta, W.shape)
    ab = np.outer(alpha, beta)
    norm = abs(float(np.sum(W**2 / ab)) - 1.0)
    energy = abs(float(np.sum(ab * W**2)) - state.C)
    return norm, energy


def _stationarity_system(W, alpha, beta):
    W2 = W**2
    p = W2 / np.outer(alpha, beta)
    t = xlogx(p) + p  # p (ln p + 1)
    # Lagrangian gradients scaled by alpha_k (beta_l) so the residual is unitless:
    #   sum_j p (ln p + 1) - lambda1 r_k + lambda2 e_k = 0
    rows = np.column_stack([p.sum(axis=1), -alpha * (W2 @ beta)])
    cols = np.column_stack([p.sum(axis=0), -beta * (alpha @ W2)])
    A = np.vstack([rows, cols])
    b = np.concatenate([t.sum(axis=1), t.sum(axis=0)])
    return A, b


def fit_multipliers(W, state: FlatnessState) -> tuple[float, float, float]:
    """Least-squares ``(lambda1, lambda2)`` and the max stationarity violation."""
    W = as_matrix(W, "W")
    alpha, beta = _check_weights(state.alpha, state.beta, W.shape)
    A, b = _stationarity_system(W, alpha, beta)
    lam, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = float(np.max(np.abs(A @ lam - b)))
    return float(lam[0]), float(lam[1]), resid


def stationarity_residual(W, state: FlatnessState) -> float:
    return fit_multipliers(W, state)[2]


def _profile_entropy(M: np.ndarray):
    # Row sums and entropies of the row-normalized profiles of a non-negative matrix.
    s = M.sum(axis=1)
    h = -xlogx(M / s[:, None]).sum(axis=1)
    return s, h


def update_row_weights(W2: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Optimal (unnormalized) row weights for fixed ``beta``; row k uses row k only."""
    s, h = _profile_entropy(W2 / beta[None, :])
    return s * np.exp(-h)


def update_column_weights(W2: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return update_row_weights(W2.T, alpha)


def _fix_gauge(W2, alpha, beta):
    # sum p = 1, then split the reciprocal (t alpha, beta / t) freedom evenly
    alpha = alpha * np.sum(W2 / np.outer(alpha, beta))
    t = np.exp(0.5 * (np.mean(np.log(beta)) - np.mean(np.log(alpha))))
    return alpha * t, beta / t


def sinkhorn_init(W2: np.ndarray):
    """Balance row energies, then column energies."""
    alpha = W2.sum(axis=1)
    beta = (W2 / alpha[:, None]).sum(axis=0)
    return alpha, beta


def _ascend(W2, alpha, beta, tol, max_iters):
    history = []
    prev = np.inf
    stalls = 0
    resid = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        alpha = update_row_weights(W2, beta)
        beta = update_column_weights(W2, alpha)
        alpha, beta = _fix_gauge(W2, alpha, beta)
        p = W2 / np.outer(alpha, beta)
        F = float(xlogx(p).sum())
        history.append(F)
        A, b = _stationarity_system(np.sqrt(W2), alpha, beta)
        lam, *_ = np.linalg.lstsq(A, b, rcond=None)
        resid = float(np.max(np.abs(A @ lam - b)))
        if resid < tol:
            return alpha, beta, history, resid, it, True
        stalls = stalls + 1 if F >= prev else 0
        if stalls >= 3:
            return alpha, beta, history, resid, it, True
        prev = F
    return alpha, beta, history, resid, it, False


def optimize_flatness(
    W,
    tol: float = 1e-10,
    max_iters: int = 10_000,
    restarts: int = 16,
    seed: int = 0,
) -> tuple[FlatnessState, BiDiagonalTransform]:
    """Minimize Flatness of ``W / ||W||_F`` over positive row/column weights.

    Each start alternates exact row and column block updates until the
    stationarity residual drops below ``tol`` or F stops decreasing. The first
    start is the Sinkhorn-style energy balance; the others perturb it by
    seeded random log-scales as wide as the spread of ``log W^2``. The best
    final F wins.

    The returned state has ``sum p = 1``, geometric means of alpha and beta
    equal, and ``C`` set to the energy ``sum alpha W^2 beta`` at the optimum.
    The transform is ``d1 = sqrt(alpha)``, ``d2 = sqrt(beta)`` in units of
    the normalized matrix; flattening the raw ``W`` with it preserves
    ``||W||_F`` and gives ``V^2 = ||W||_F^2 p``.
    """
    W = as_matrix(W, "W")
    if np.any(~np.any(W != 0, axis=1)) or np.any(~np.any(W != 0, axis=0)):
        raise DegenerateInputError("W has an all-zero row or column")
    if restarts < 1 or max_iters < 1:
        raise ParameterError("restarts and max_iters must be >= 1")
    Wn, _ = frobenius_normalize(W)
    W2 = Wn**2
    logs = np.log(W2[W2 > 0])
    spread = min(float(logs.max() - logs.min()), 30.0)
    rng = make_rng(seed)

    best = None
    a0, b0 = sinkhorn_init(W2)
    for r in range(restarts):
        a, b = a0, b0
        if r:
            a = a0 * np.exp(rng.uniform(-spread, spread, a0.size))
            b = b0 * np.exp(rng.uniform(-spread, spread, b0.size))
        run = _ascend(W2, a, b, tol, max_iters)
        if best is None or run[2][-1] < best[2][-1] - 1e-13:
            best = run

    alpha, beta, history, resid, iters, settled = best
    energy = float(np.sum(np.outer(alpha, beta) * W2))
    state = FlatnessState.from_weights(Wn, alpha, beta, C=energy)
    state.iterations = iters
    state.history = history
    state.converged = settled
    return state, BiDiagonalTransform.from_state(state)


def apply_bidiagonal(W, t: BiDiagonalTransform, direction: str = "flatten") -> np.ndarray:
    W = as_matrix(W, "W")
    if W.shape != (t.d1.size, t.d2.size):
        raise ParameterError(f"transform sizes {t.d1.size}x{t.d2.size} do not match W {W.shape}")
    scale = np.outer(t.d1, t.d2)
    if direction == "flatten":
        return W / scale
    if direction == "restore":
        return W * scale
    raise ParameterError(f"direction must be 'flatten' or 'restore', got {direction!r}")


def grid_search_flatness(
    W,
    points: int = 41,
    span: float = 15.0,
    levels: int = 8,
    keep: int = 5,
) -> float:
    """Brute-force minimum of F over a log-space lattice, for small matrices.

    The first row weight and first column weight are pinned to 1 (the rest of
    the scale freedom is absorbed by normalizing ``p``). A coarse lattice of
    ``points`` values per free coordinate on ``[-span, span]`` is followed by
    local 11-point refinements around the ``keep`` best nodes.
    """
    W = as_matrix(W, "W")
    m, n = W.shape
    d = m + n - 2
    if d > 4:
        raise ParameterError(f"grid search is exponential in m+n; {m}x{n} is too large")
    W2 = W * W

    def batch_F(X):
        la = np.concatenate([np.zeros((len(X), 1)), X[:, : m - 1]], axis=1)
        lb = np.concatenate([np.zeros((len(X), 1)), X[:, m - 1 :]], axis=1)
        p = W2[None] * np.exp(-la[:, :, None] - lb[:, None, :])
        p /= p.sum(axis=(1, 2), keepdims=True)
        return np.sum(xlogx(p), axis=(1, 2))

    def lattice(axes):
        return np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)

    ax = np.linspace(-span, span, points)
    X = lattice([ax] * d)
    f = batch_F(X)
    best = float(f.min())
    step = ax[1] - ax[0]
    for i in np.argsort(f)[:keep]:
        c, s = X[i], step
        for _ in range(levels):
            Y = lattice([np.linspace(ci - s, ci + s, 11) for ci in c])
            g = batch_F(Y)
            j = int(np.argmin(g))
            c = Y[j]
            best = min(best, float(g[j]))
            s /= 4
    return best
