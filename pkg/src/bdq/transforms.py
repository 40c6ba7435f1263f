"""Rotations, diagonal/rotation transform pairs and the Kronecker baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from bdq import io
from bdq.errors import DomainError, ParameterError, UnsupportedDimensionError
from bdq.flatness import BiDiagonalTransform, apply_bidiagonal
from bdq.numerics import as_matrix, make_rng, shannon_entropy
from bdq.quantizer import QuantSpec, dequantize, quantize

ORTHO_TOL = 1e-10


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hadamard(n: int) -> np.ndarray:
    """Orthonormal Sylvester-Hadamard matrix of size ``n`` (a power of two)."""
    if not is_power_of_two(n):
        raise UnsupportedDimensionError(f"Hadamard size must be a power of two, got {n}")
    H = np.ones((1, 1))
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H / math.sqrt(n)


def cayley(S: np.ndarray) -> np.ndarray:
    """``(I - S)(I + S)^{-1}`` for skew-symmetric ``S``."""
    S = np.asarray(S, dtype=np.float64)
    if not np.allclose(S, -S.T, atol=1e-12):
        raise ParameterError("Cayley parameter must be skew-symmetric")
    eye = np.eye(S.shape[0])
    # I + S is never singular for real skew S (eigenvalues 1 + i theta)
    return np.linalg.solve((eye + S).T, (eye - S).T).T


def random_skew(n: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((n, n)) * scale
    return (A - A.T) / 2


def orthogonality_error(R: np.ndarray) -> float:
    R = np.asarray(R, dtype=np.float64)
    return float(np.max(np.abs(R.T @ R - np.eye(R.shape[1]))))


def _check_orthogonal(R, name="R"):
    R = as_matrix(R, name)
    if R.shape[0] != R.shape[1]:
        raise ParameterError(f"{name} must be square, got {R.shape}")
    err = orthogonality_error(R)
    if err > ORTHO_TOL:
        raise DomainError(f"{name} is not orthogonal (max|R^T R - I| = {err:.3g})")
    return R


def random_rotation(n: int, seed: int = 0, with_hadamard: bool = True, skew_scale: float = 1.0) -> np.ndarray:
    """``H @ C`` with ``C`` the Cayley map of a seeded random skew matrix.

    The Hadamard factor is dropped when ``n`` is not a power of two; use
    :func:`rotation_uses_hadamard` to record which construction was used.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    C = cayley(random_skew(n, make_rng(seed), skew_scale))
    if with_hadamard and is_power_of_two(n):
        return hadamard(n) @ C
    return C


def rotation_uses_hadamard(n: int, with_hadamard: bool) -> bool:
    return with_hadamard and is_power_of_two(n)


@dataclass(frozen=True)
class TransformPair:
    """Input-channel diagonal, output-channel diagonal and input rotation of one layer.

    For ``y = x W`` with ``W`` of shape ``(n, m)`` the pair stores
    ``lambda1`` (length n), ``lambda2`` (length m) and ``R`` (n x n). The
    transformed operands are ``x diag(lambda1) R`` and
    ``R^T diag(1/lambda1) W diag(lambda2)``; their product is ``x W diag(lambda2)``,
    so the output-channel scale is undone afterwards (or folded into the next
    layer's input diagonal).
    """

    lambda1: np.ndarray
    lambda2: np.ndarray
    R: np.ndarray
    seed: int | None = None
    with_hadamard: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        l1 = np.asarray(self.lambda1, dtype=np.float64).ravel()
        l2 = np.asarray(self.lambda2, dtype=np.float64).ravel()
        for name, v in (("lambda1", l1), ("lambda2", l2)):
            if np.any(~(v > 0)) or not np.all(np.isfinite(v)):
                raise DomainError(f"{name} must be finite and strictly positive")
        R = _check_orthogonal(self.R)
        if R.shape[0] != l1.size:
            raise ParameterError(f"R is {R.shape}, lambda1 has {l1.size} entries")
        object.__setattr__(self, "lambda1", l1)
        object.__setattr__(self, "lambda2", l2)
        object.__setattr__(self, "R", R)

    @property
    def n_in(self) -> int:
        return self.lambda1.size

    @property
    def n_out(self) -> int:
        return self.lambda2.size

    @classmethod
    def identity(cls, n_in: int, n_out: int) -> "TransformPair":
        return cls(np.ones(n_in), np.ones(n_out), np.eye(n_in))

    @classmethod
    def rotation(cls, n_in: int, n_out: int, seed: int, with_hadamard: bool = True) -> "TransformPair":
        R = random_rotation(n_in, seed, with_hadamard)
        return cls(
            np.ones(n_in),
            np.ones(n_out),
            R,
            seed=seed,
            with_hadamard=rotation_uses_hadamard(n_in, with_hadamard),
        )

    def with_diagonals(self, lambda1=None, lambda2=None) -> "TransformPair":
        return TransformPair(
            self.lambda1 if lambda1 is None else lambda1,
            self.lambda2 if lambda2 is None else lambda2,
            self.R,
            seed=self.seed,
            with_hadamard=self.with_hadamard,
            meta=dict(self.meta),
        )

    def transform_input(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) * self.lambda1) @ self.R

    def transform_weight(self, W: np.ndarray) -> np.ndarray:
        W = np.asarray(W, dtype=np.float64)
        return (self.R.T @ (W / self.lambda1[:, None])) * self.lambda2[None, :]

    def to_dict(self, r_payload: str | None = None) -> dict:
        return {
            "lambda1": [float(v) for v in self.lambda1],
            "lambda2": [float(v) for v in self.lambda2],
            "R": r_payload,
            "shape": [self.n_in, self.n_out],
            "seed": self.seed,
            "with_hadamard": self.with_hadamard,
            "meta": self.meta,
        }


def save_pair(path, pair: TransformPair) -> None:
    """JSON at ``<path>.json`` with R stored next to it as a BDQ1 file."""
    from pathlib import Path

    base = Path(path)
    r_path = base.with_name(base.stem + "_R.bdq")
    io.write_matrix(r_path, pair.R)
    io.write_json(base.with_suffix(".json"), pair.to_dict(r_path.name))


def load_pair(path) -> TransformPair:
    import json
    from pathlib import Path

    base = Path(path)
    d = json.loads(base.with_suffix(".json").read_text())
    R = io.read_matrix(base.parent / d["R"])
    return TransformPair(d["lambda1"], d["lambda2"], R, seed=d["seed"], with_hadamard=d["with_hadamard"], meta=d["meta"])


def _fq(a: np.ndarray, spec: QuantSpec | None) -> np.ndarray:
    return a if spec is None else dequantize(quantize(a, spec))


def apply_pair_forward(
    x,
    W,
    pair: TransformPair,
    spec: QuantSpec | None = None,
    act_spec: QuantSpec | None = None,
    compensate: bool = True,
) -> np.ndarray:
    """``Q(x Λ1 R) · Q(Rᵀ Λ1⁻¹ W Λ2)``, followed by ``Λ2⁻¹`` when ``compensate``.

    ``spec`` quantizes the weight side and ``act_spec`` (defaulting to
    ``spec``) the activation side; with both ``None`` the result equals
    ``x W`` up to rounding.
    """
    x = as_matrix(x, "x")
    W = as_matrix(W, "W")
    if x.shape[1] != W.shape[0]:
        raise ParameterError(f"x {x.shape} and W {W.shape} are not conformable")
    if W.shape != (pair.n_in, pair.n_out):
        raise ParameterError(f"pair is {pair.n_in}x{pair.n_out}, W is {W.shape}")
    act_spec = spec if act_spec is None else act_spec
    y = _fq(pair.transform_input(x), act_spec) @ _fq(pair.transform_weight(W), spec)
    return y / pair.lambda2 if compensate else y


@dataclass(frozen=True)
class KroneckerTransform:
    P1: np.ndarray
    P2: np.ndarray

    def __post_init__(self):
        for name in ("P1", "P2"):
            P = as_matrix(getattr(self, name), name)
            if P.shape[0] != P.shape[1]:
                raise ParameterError(f"{name} must be square")
            object.__setattr__(self, name, P)

    @property
    def dim(self) -> int:
        return self.P1.shape[0] * self.P2.shape[0]

    @property
    def n_params(self) -> int:
        return self.P1.size + self.P2.size

    def materialize(self) -> np.ndarray:
        return np.kron(self.P1, self.P2)


def _kron_right(W, P1, P2):
    # W @ kron(P1, P2) via (m, r, s) reshape: row block i maps to P1^T X_i P2
    m = W.shape[0]
    X = W.reshape(m, P1.shape[0], P2.shape[0])
    return np.matmul(np.matmul(P1.T, X), P2).reshape(m, -1)


def kronecker_apply(W, kt: KroneckerTransform, side: str = "right") -> np.ndarray:
    """``W (P1 ⊗ P2)`` or ``(P1 ⊗ P2) W`` without forming the Kronecker product."""
    W = as_matrix(W, "W")
    if side == "right":
        if W.shape[1] != kt.dim:
            raise ParameterError(f"W has {W.shape[1]} columns, transform acts on {kt.dim}")
        return _kron_right(W, kt.P1, kt.P2)
    if side == "left":
        if W.shape[0] != kt.dim:
            raise ParameterError(f"W has {W.shape[0]} rows, transform acts on {kt.dim}")
        return _kron_right(W.T, kt.P1.T, kt.P2.T).T
    raise ParameterError(f"side must be 'left' or 'right', got {side!r}")


def numerical_rank(M) -> int:
    M = np.asarray(M, dtype=np.float64)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    tol = max(M.shape) * np.finfo(np.float64).eps * s[0]
    return int(np.count_nonzero(s > tol))


@dataclass(frozen=True)
class RankReport:
    rank_before: int
    rank_after: int
    preserved: bool
    zero_pattern_preserved: bool

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def rank_preservation_check(W, t, side: str = "right") -> RankReport:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if isinstance(t, BiDiagonalTransform):
        after = apply_bidiagonal(W, t, "flatten")
    elif isinstance(t, KroneckerTransform):
        after = kronecker_apply(W, t, side)
    else:
        raise ParameterError(f"unsupported transform type {type(t).__name__}")
    before_rank = numerical_rank(W)
    after_rank = numerical_rank(after)
    return RankReport(
        rank_before=before_rank,
        rank_after=after_rank,
        preserved=before_rank == after_rank,
        zero_pattern_preserved=bool(np.array_equal(W == 0, after == 0)),
    )


@dataclass(frozen=True)
class GramReport:
    gram_after: np.ndarray
    eigen_max_abs_diff: float
    frobenius_rel_diff: float
    entropy_before: float
    entropy_after: float
    offdiag_max_after: float
    spectrum_preserved: bool
    norm_preserved: bool

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["gram_after"] = self.gram_after.tolist()
        return d


def energy_entropy(V) -> float:
    """Entropy of the squared entries of ``V`` (its energy distribution)."""
    return shannon_entropy(np.asarray(V, dtype=np.float64) ** 2)


def gram_spectrum_check(V1, R, eig_tol: float = 1e-8, norm_tol: float = 1e-12) -> GramReport:
    """Compare ``Gram(V1)`` with ``Gram(V1 R) = Rᵀ Gram(V1) R`` for orthogonal ``R``."""
    V1 = as_matrix(V1, "V1")
    R = _check_orthogonal(R)
    V2 = V1 @ R
    G1 = V1.T @ V1
    G2 = V2.T @ V2
    e1 = np.linalg.eigvalsh(G1)
    e2 = np.linalg.eigvalsh(G2)
    eig_diff = float(np.max(np.abs(e1 - e2)))
    n1 = np.linalg.norm(V1)
    rel = float(abs(np.linalg.norm(V2) - n1) / n1) if n1 > 0 else 0.0
    off = G2 - np.diag(np.diag(G2))
    return GramReport(
        gram_after=G2,
        eigen_max_abs_diff=eig_diff,
        frobenius_rel_diff=rel,
        entropy_before=energy_entropy(V1) if n1 > 0 else 0.0,
        entropy_after=energy_entropy(V2) if n1 > 0 else 0.0,
        offdiag_max_after=float(np.max(np.abs(off))) if off.size else 0.0,
        spectrum_preserved=eig_diff <= eig_tol * max(1.0, float(np.max(np.abs(e1)))),
        norm_preserved=rel <= norm_tol,
    )


def plant_outliers(W, k: int, magnitude: float, seed: int = 0):
    """Overwrite ``k`` entries in distinct rows and columns with ``±magnitude·(1+U)``.

    Returns the new matrix and the ``(rows, cols)`` index arrays.
    """
    W = as_matrix(W, "W").copy()
    m, n = W.shape
    if k > min(m, n):
        raise ParameterError(f"cannot place {k} outliers in distinct rows/cols of {W.shape}")
    rng = make_rng(seed)
    rows = rng.permutation(m)[:k]
    cols = rng.permutation(n)[:k]
    signs = rng.choice([-1.0, 1.0], size=k)
    W[rows, cols] = signs * magnitude * (1.0 + rng.uniform(0.0, 1.0, size=k))
    return W, (rows, cols)


def suppress_outliers_diagonal(W, positions) -> BiDiagonalTransform:
    """Per-outlier closed form: ``d1_i = d2_j = sqrt|W_ij|`` at each outlier, 1 elsewhere.

    Flattening then maps every outlier to magnitude exactly 1. Outliers must
    sit in distinct rows and columns.
    """
    W = as_matrix(W, "W")
    rows, cols = (np.asarray(a, dtype=int) for a in positions)
    if len(set(rows.tolist())) != rows.size or len(set(cols.tolist())) != cols.size:
        raise ParameterError("outliers must occupy distinct rows and columns")
    mags = np.abs(W[rows, cols])
    if np.any(mags == 0):
        raise DomainError("outlier positions hold zeros")
    d1 = np.ones(W.shape[0])
    d2 = np.ones(W.shape[1])
    d1[rows] = np.sqrt(mags)
    d2[cols] = np.sqrt(mags)
    return BiDiagonalTransform(d1, d2)


def _split_outliers(W, positions):
    O = np.zeros_like(W)
    O[positions] = W[positions]
    return W - O, O


def kronecker_budget_factors(m: int, n: int) -> tuple[int, int]:
    """``(r, s)`` with ``r s = n`` and ``r² + s² = m + n`` (parameter parity with a diagonal pair)."""
    for r in range(1, n + 1):
        if n % r == 0:
            s = n // r
            if r <= s and r * r + s * s == m + n:
                return r, s
    raise ParameterError(f"no Kronecker factorization of {n} matches the {m}+{n} parameter budget")


def transform_condition(t) -> float:
    """Condition number of the linear map a diagonal pair or Kronecker transform applies."""
    if isinstance(t, BiDiagonalTransform):
        return float((t.d1.max() / t.d1.min()) * (t.d2.max() / t.d2.min()))
    return float(np.linalg.cond(t.P1) * np.linalg.cond(t.P2))


def fit_kronecker_suppression(
    W,
    positions,
    r: int,
    s: int,
    steps: int = 2000,
    lr: float = 1e-2,
    cond_budget: float = math.inf,
):
    """Gradient descent on ``log ||T(O)||² - log ||T(B)||²`` for ``T = · (P1 ⊗ P2)``.

    ``O`` holds the planted outliers and ``B`` the rest, so the objective is
    the outlier energy relative to how much the transform scales the
    background. Starts from identity factors and stops before a step would
    push ``cond(P1 ⊗ P2)`` past ``cond_budget``: a scale-free objective can
    otherwise be driven down by making the transform nearly singular.

    Returns the transform and the objective trace (one value per accepted step).
    """
    B, O = _split_outliers(W, positions)
    m = W.shape[0]
    XO = O.reshape(m, r, s)
    XB = B.reshape(m, r, s)
    P1 = np.eye(r)
    P2 = np.eye(s)
    trace = []
    for _ in range(steps):
        ZO = np.matmul(XO, P2)
        ZB = np.matmul(XB, P2)
        YO = np.matmul(P1.T, ZO)
        YB = np.matmul(P1.T, ZB)
        eo = float(np.sum(YO**2))
        eb = float(np.sum(YB**2))
        trace.append(math.log(eo) - math.log(eb))
        GO = 2.0 * YO / eo
        GB = -2.0 * YB / eb
        gP1 = np.einsum("iab,icb->ac", ZO, GO) + np.einsum("iab,icb->ac", ZB, GB)
        gP2 = np.einsum("iab,iac->bc", np.matmul(P1.T, XO), GO) + np.einsum("iab,iac->bc", np.matmul(P1.T, XB), GB)
        new1 = P1 - lr * gP1
        new2 = P2 - lr * gP2
        if np.linalg.cond(new1) * np.linalg.cond(new2) > cond_budget:
            break
        P1, P2 = new1, new2
    return KroneckerTransform(P1, P2), trace


@dataclass(frozen=True)
class BudgetReport:
    k: int
    params_diagonal: int
    params_kronecker: int
    residual_diagonal_raw: float
    residual_diagonal: float
    residual_kronecker_raw: float
    residual_kronecker: float
    kronecker_rank: int
    kronecker_cond: float
    cond_budget: float
    kronecker_steps: int

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def suppression_budget_comparison(W, positions, steps: int = 2000, lr: float = 1e-2) -> BudgetReport:
    """Outlier energy left by a diagonal pair versus a budget-matched Kronecker transform.

    The transformed outlier component ``T(O)`` is tracked wherever a transform
    moves it; for a diagonal pair its energy is exactly ``Σ_S Ŵ²``. ``*_raw``
    is that energy, and the unsuffixed residual divides it by the transform's
    gain on the non-outlier background ``||T(B)||² / ||B||²``.

    Both transforms get the same number of parameters and the same condition
    number: the Kronecker fit may not exceed the conditioning of the
    closed-form diagonal pair.
    """
    W = as_matrix(W, "W")
    positions = tuple(np.asarray(a, dtype=int) for a in positions)
    m, n = W.shape
    r, s = kronecker_budget_factors(m, n)
    B, O = _split_outliers(W, positions)
    b0 = float(np.sum(B**2))

    diag = suppress_outliers_diagonal(W, positions)
    d_raw = float(np.sum(apply_bidiagonal(O, diag) ** 2))
    d_gain = float(np.sum(apply_bidiagonal(B, diag) ** 2)) / b0

    budget = transform_condition(diag)
    kt, trace = fit_kronecker_suppression(W, positions, r, s, steps=steps, lr=lr, cond_budget=budget)
    k_raw = float(np.sum(kronecker_apply(O, kt) ** 2))
    k_gain = float(np.sum(kronecker_apply(B, kt) ** 2)) / b0
    P = kt.materialize()
    return BudgetReport(
        k=int(positions[0].size),
        params_diagonal=m + n,
        params_kronecker=kt.n_params,
        residual_diagonal_raw=d_raw,
        residual_diagonal=d_raw / d_gain,
        residual_kronecker_raw=k_raw,
        residual_kronecker=k_raw / k_gain,
        kronecker_rank=numerical_rank(P),
        kronecker_cond=float(np.linalg.cond(P)),
        cond_budget=budget,
        kronecker_steps=len(trace) - 1 if len(trace) < steps else steps,
    )
