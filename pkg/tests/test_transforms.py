import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdq.errors import DomainError, ParameterError, UnsupportedDimensionError
from bdq.flatness import BiDiagonalTransform, apply_bidiagonal
from bdq.quantizer import QuantSpec
from bdq.transforms import (
    KroneckerTransform,
    TransformPair,
    apply_pair_forward,
    suppression_budget_comparison,
    cayley,
    energy_entropy,
    fit_kronecker_suppression,
    gram_spectrum_check,
    hadamard,
    kronecker_apply,
    kronecker_budget_factors,
    load_pair,
    numerical_rank,
    orthogonality_error,
    plant_outliers,
    random_rotation,
    random_skew,
    rank_preservation_check,
    rotation_uses_hadamard,
    save_pair,
    suppress_outliers_diagonal,
    transform_condition,
)


@pytest.mark.parametrize("n", [1, 2, 4, 8, 64])
def test_hadamard_is_orthonormal_with_equal_magnitudes(n):
    H = hadamard(n)
    assert orthogonality_error(H) < 1e-12
    assert np.allclose(np.abs(H), 1 / np.sqrt(n))


def test_hadamard_rejects_other_sizes():
    with pytest.raises(UnsupportedDimensionError):
        hadamard(12)


def test_hadamard_spreads_a_spike():
    x = np.zeros(16)
    x[3] = 4.0
    assert np.allclose(np.abs(x @ hadamard(16)), 1.0)


def test_cayley_orthogonal_and_rejects_non_skew():
    S = random_skew(7, np.random.default_rng(0))
    assert orthogonality_error(cayley(S)) < 1e-12
    assert np.allclose(cayley(np.zeros((3, 3))), np.eye(3))
    with pytest.raises(ParameterError):
        cayley(np.ones((2, 2)))


@pytest.mark.parametrize("n", [6, 8, 16])
def test_random_rotation_seeded(n):
    a, b = random_rotation(n, 5), random_rotation(n, 5)
    assert np.array_equal(a, b)
    assert orthogonality_error(a) < 1e-10
    assert rotation_uses_hadamard(n, True) == (n in (8, 16))


def test_pair_rejects_bad_parameters():
    with pytest.raises(DomainError):
        TransformPair(np.array([1.0, 0.0]), np.ones(2), np.eye(2))
    with pytest.raises(ParameterError):
        TransformPair(np.ones(2), np.ones(2), np.eye(3))
    with pytest.raises(Exception):
        TransformPair(np.ones(2), np.ones(2), np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([8, 16, 64]), st.integers(1, 12), st.integers(1, 6), st.integers(0, 10**6))
def test_equivalence_without_quantization(n, m, batch, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, n))
    W = rng.standard_normal((n, m))
    P = TransformPair.rotation(n, m, seed).with_diagonals(np.exp(rng.normal(0, 1, n)), np.exp(rng.normal(0, 1, m)))
    y = apply_pair_forward(x, W, P)
    assert np.max(np.abs(y - x @ W)) <= 1e-10 * np.max(np.abs(x @ W))


def test_forward_shape_errors():
    P = TransformPair.identity(4, 3)
    with pytest.raises(ParameterError):
        apply_pair_forward(np.ones((2, 5)), np.ones((5, 3)), P)
    with pytest.raises(ParameterError):
        apply_pair_forward(np.ones((2, 4)), np.ones((4, 2)), P)


def test_forward_hadamard_helps_outlier_channel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((128, 16))
    x[:, 3] *= 50
    W = rng.standard_normal((16, 8))
    spec = QuantSpec(8, "symmetric_signed")  # fine weights isolate the activation effect
    per_token = QuantSpec(4, "symmetric_signed", "per_row")
    H = TransformPair(np.ones(16), np.ones(8), hadamard(16))
    plain = np.mean((apply_pair_forward(x, W, TransformPair.identity(16, 8), spec, per_token) - x @ W) ** 2)
    rot = np.mean((apply_pair_forward(x, W, H, spec, per_token) - x @ W) ** 2)
    assert rot < 0.7 * plain


def test_pair_save_load(tmp_path):
    P = TransformPair.rotation(8, 3, 4).with_diagonals(np.arange(1, 9.0), np.ones(3) * 2)
    save_pair(tmp_path / "pair", P)
    Q = load_pair(tmp_path / "pair")
    assert np.array_equal(Q.R, P.R) and np.array_equal(Q.lambda1, P.lambda1)
    assert Q.seed == 4 and Q.with_hadamard


@pytest.mark.parametrize("side", ["left", "right"])
def test_kronecker_apply_matches_dense(side):
    rng = np.random.default_rng(2)
    kt = KroneckerTransform(rng.normal(size=(2, 2)), rng.normal(size=(3, 3)))
    W = rng.normal(size=(6, 6))
    K = kt.materialize()
    expected = W @ K if side == "right" else K @ W
    np.testing.assert_allclose(kronecker_apply(W, kt, side), expected, atol=1e-12)
    assert kt.n_params == 13 and kt.dim == 6


def test_kronecker_apply_errors():
    kt = KroneckerTransform(np.eye(2), np.eye(2))
    with pytest.raises(ParameterError):
        kronecker_apply(np.ones((3, 3)), kt)
    with pytest.raises(ParameterError):
        kronecker_apply(np.ones((4, 4)), kt, "middle")
    with pytest.raises(ParameterError):
        KroneckerTransform(np.ones((2, 3)), np.eye(2))


def test_diagonal_scaling_preserves_rank_and_zero_pattern():
    rng = np.random.default_rng(4)
    W = np.outer(rng.normal(size=5), rng.normal(size=4))
    W[1, 2] = 0.0
    t = BiDiagonalTransform(np.exp(rng.normal(0, 3, 5)), np.exp(rng.normal(0, 3, 4)))
    rep = rank_preservation_check(W, t)
    assert rep.preserved and rep.zero_pattern_preserved
    assert rep.rank_before == numerical_rank(W)


def test_rank_one_kronecker_factor_collapses_rank():
    A = np.random.default_rng(5).normal(size=(4, 4))
    kt = KroneckerTransform(np.outer([1.0, 3.0], [2.0, -1.0]), np.eye(2))
    rep = rank_preservation_check(A, kt)
    assert rep.rank_before == 4 and rep.rank_after == 2
    assert np.linalg.matrix_rank(A @ kt.materialize()) == 2
    with pytest.raises(ParameterError):
        rank_preservation_check(A, "not a transform")


def test_gram_spectrum_preserved_by_rotation():
    rng = np.random.default_rng(6)
    V = rng.normal(size=(10, 8))
    rep = gram_spectrum_check(V, random_rotation(8, 1))
    assert rep.spectrum_preserved and rep.norm_preserved
    assert rep.to_dict()["gram_after"][0][0] == pytest.approx(rep.gram_after[0, 0])


def test_rotation_spreads_concentrated_energy():
    V = np.zeros((4, 16))
    V[:, 0] = 1.0
    rep = gram_spectrum_check(V, hadamard(16))
    assert rep.entropy_after > rep.entropy_before
    assert energy_entropy(V) == pytest.approx(np.log(4))


def test_closed_form_diagonal_suppresses_outliers_to_one():
    W0 = np.random.default_rng(7).normal(size=(32, 32))
    W, pos = plant_outliers(W0, 6, 40.0, seed=3)
    t = suppress_outliers_diagonal(W, pos)
    V = apply_bidiagonal(W, t)
    np.testing.assert_allclose(np.abs(V[pos]), 1.0, rtol=0, atol=1e-14)
    assert np.sum(V[pos] ** 2) == pytest.approx(6.0)


def test_suppression_requires_distinct_rows():
    with pytest.raises(ParameterError):
        suppress_outliers_diagonal(np.ones((3, 3)), (np.array([0, 0]), np.array([1, 2])))
    with pytest.raises(ParameterError):
        plant_outliers(np.ones((2, 3)), 3, 10.0)


def test_budget_factors():
    assert kronecker_budget_factors(64, 64) == (8, 8)
    assert kronecker_budget_factors(16, 16) == (4, 4)
    with pytest.raises(ParameterError):
        kronecker_budget_factors(10, 12)


def test_kronecker_fit_respects_condition_budget():
    W0 = np.random.default_rng(8).normal(size=(16, 16))
    W, pos = plant_outliers(W0, 3, 30.0, seed=1)
    budget = transform_condition(suppress_outliers_diagonal(W, pos))
    kt, trace = fit_kronecker_suppression(W, pos, 4, 4, steps=500, cond_budget=budget)
    assert transform_condition(kt) <= budget
    assert trace[0] >= min(trace)


def test_budget_comparison_report():
    W0 = np.random.default_rng(9).normal(size=(16, 16))
    W, pos = plant_outliers(W0, 3, 30.0, seed=2)
    rep = suppression_budget_comparison(W, pos, steps=300)
    assert rep.params_diagonal == rep.params_kronecker == 32
    assert rep.residual_diagonal_raw == pytest.approx(3.0)
    assert rep.kronecker_cond <= rep.cond_budget
    assert rep.residual_kronecker >= rep.residual_diagonal
