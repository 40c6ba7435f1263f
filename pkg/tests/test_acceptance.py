"""Acceptance suite: one printed PASS/FAIL line per criterion, with runtime."""

import math
import time

import numpy as np
import pytest

from bdq import calibration as cal
from bdq import error_model as em
from bdq import harness
from bdq.cli import main
from bdq.flatness import (
    BiDiagonalTransform,
    apply_bidiagonal,
    grid_search_flatness,
    optimize_flatness,
    stationarity_residual,
)
from bdq.numerics import OutlierProfile, make_rng
from bdq.quantizer import QuantSpec, dequantize, quantize
from bdq.transforms import (
    KroneckerTransform,
    TransformPair,
    suppression_budget_comparison,
    kronecker_apply,
    numerical_rank,
    plant_outliers,
    rank_preservation_check,
    suppress_outliers_diagonal,
)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def report(capsys, n: int, ok: bool, detail: str, elapsed: float, limit: float):
    fast = elapsed < limit
    verdict = "PASS" if ok and fast else "FAIL"
    with capsys.disabled():
        print(f"\n[criterion {n:>2}] {verdict}  {detail}  runtime {elapsed:.2f}s < {limit:g}s")
    assert ok, detail
    assert fast, f"runtime {elapsed:.2f}s over {limit}s"


def test_c01_equivalence_without_quantization(capsys):
    rng = make_rng(101)
    worst = 0.0
    with Timer() as t:
        for i in range(100):
            n = (8, 16, 64)[i % 3]
            m = int(rng.integers(1, 65))
            x = rng.standard_normal((int(rng.integers(1, 17)), n))
            W = rng.standard_normal((n, m))
            pair = TransformPair.rotation(n, m, seed=i).with_diagonals(
                np.exp(rng.normal(0, 1, n)), np.exp(rng.normal(0, 1, m))
            )
            y = x @ W
            got = pair.transform_input(x) @ pair.transform_weight(W) / pair.lambda2
            worst = max(worst, float(np.max(np.abs(got - y)) / np.max(np.abs(y))))
    report(capsys, 1, worst <= 1e-10, f"max rel deviation {worst:.2e} <= 1e-10", t.elapsed, 5)


def test_c02_unclipped_error_within_half_step(capsys):
    rng = make_rng(102)
    worst = -np.inf
    with Timer() as t:
        for _ in range(10_000):
            v = rng.standard_normal(int(rng.integers(1, 65))) * rng.uniform(1e-3, 1e3)
            mode = ("symmetric_signed", "min_max_affine")[int(rng.integers(2))]
            q = quantize(v, QuantSpec(int(rng.integers(2, 9)), mode))
            assert q.n_clamped == 0
            bound = q.scale[0] / 2 + 4 * np.spacing(np.max(np.abs(v)))
            worst = max(worst, float(np.max(np.abs(dequantize(q)[0] - v) - bound)))
    report(capsys, 2, worst <= 0, f"max(err - (Δ/2 + 4ulp)) = {worst:.3e} <= 0", t.elapsed, 5)


def test_c03_rounding_variance(capsys):
    with Timer() as t:
        ratios = {b: em.rounding_ratio(b, n_samples=10**6, seed=103) for b in (4, 8)}
    ok = all(0.8 <= r <= 1.2 for r in ratios.values())
    detail = ", ".join(f"b={b}: MSE/(Δ²/12)={r:.4f}" for b, r in ratios.items()) + " in [0.8, 1.2]"
    report(capsys, 3, ok, detail, t.elapsed, 30)


def test_c04_outlier_dominance(capsys):
    with Timer() as t:
        rep = em.monte_carlo_report(OutlierProfile(1.0, 100.0, 0.01, 104), 4, x=1.0)
        approx = em.dominance_approx(0.01, 100.0, 1.0)
    ratio = rep.empirical_mse / approx
    ok = 0.5 <= ratio <= 2.0 and rep.dominance_ratio > 0.95
    detail = f"measured/(p w² x) = {ratio:.3f} in [0.5, 2]; outlier share {rep.dominance_ratio:.5f} > 0.95"
    report(capsys, 4, ok, detail, t.elapsed, 30)


def test_c05_flatness_oracle(capsys):
    rng = make_rng(105)
    gap = stat = rank1 = 0.0
    with Timer() as t:
        for i in range(50):
            W = rng.standard_normal((2, 2) if i % 2 == 0 else (2, 3))
            state, _ = optimize_flatness(W, seed=i)
            assert state.converged
            gap = max(gap, abs(state.F - grid_search_flatness(W)))
            stat = max(stat, stationarity_residual(W / np.linalg.norm(W), state))
        for _ in range(10):
            m, n = (int(v) for v in rng.integers(2, 9, 2))
            W = np.outer(rng.uniform(0.1, 10, m), rng.uniform(0.1, 10, n)) * rng.choice([-1, 1], (m, n))
            rank1 = max(rank1, abs(optimize_flatness(W)[0].F + math.log(m * n)))
    ok = gap <= 1e-3 and stat <= 1e-6 and rank1 <= 1e-9
    detail = f"grid gap {gap:.1e} <= 1e-3; stationarity {stat:.1e} <= 1e-6; rank-1 gap {rank1:.1e} <= 1e-9"
    report(capsys, 5, ok, detail, t.elapsed, 60)


def test_c06_diagonal_vs_kronecker_suppression(capsys):
    exact = 0.0
    residual_is_k = True
    wins = 0
    with Timer() as t:
        for sd in range(20):
            W, pos = plant_outliers(make_rng(sd).standard_normal((64, 64)), 8, 50.0, sd)
            V = apply_bidiagonal(W, suppress_outliers_diagonal(W, pos), "flatten")
            exact = max(exact, float(np.max(np.abs(np.abs(V[pos]) - 1.0))))
            rep = suppression_budget_comparison(W, pos)
            residual_is_k &= abs(rep.residual_diagonal_raw - 8) < 1e-9
            wins += rep.residual_kronecker >= rep.residual_diagonal
    ok = exact <= 1e-12 and residual_is_k and wins >= 18
    detail = f"| |outlier| - 1 | <= {exact:.1e}; diagonal residual == k: {residual_is_k}; kron >= diag in {wins}/20 (need 18)"
    report(capsys, 6, ok, detail, t.elapsed, 120)


def test_c07_rank_preservation(capsys):
    rng = make_rng(107)
    kept = 0
    with Timer() as t:
        for i in range(100):
            m, n = (int(v) for v in rng.integers(1, 13, 2))
            W = rng.standard_normal((m, n))
            if i % 5 == 0 and min(m, n) > 1:
                W[:, -1] = W[:, 0]
            d = BiDiagonalTransform(np.exp(rng.normal(0, 2, m)), np.exp(rng.normal(0, 2, n)))
            kept += rank_preservation_check(W, d).preserved
        A = rng.standard_normal((4, 4))
        collapsed = numerical_rank(kronecker_apply(A, KroneckerTransform(np.outer([1.0, 2.0], [1.0, -1.0]), np.eye(2))))
    ok = kept == 100 and numerical_rank(A) == 4 and collapsed < 4
    report(capsys, 7, ok, f"diagonal keeps rank {kept}/100; rank-1 factor gives rank {collapsed} < 4", t.elapsed, 10)


def test_c08_rce_identity_and_gradient(capsys):
    rng = make_rng(108)
    ident = 0.0
    with Timer() as t:
        for _ in range(100):
            n = int(rng.integers(2, 16))
            q, p = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
            ident = max(ident, abs(cal.rce_loss(q, p, 1.0) - (cal.cross_entropy(q, p) - cal.entropy(p))))
        grad = harness._rce_fd_error(rng, trials=100)
    ok = ident <= 1e-12 and grad <= 1e-5
    report(capsys, 8, ok, f"δ=1 identity gap {ident:.1e} <= 1e-12; gradient rel err {grad:.1e} <= 1e-5", t.elapsed, 5)


def test_c09_toy_network_ordering(capsys):
    with Timer() as t:
        rows = harness.map_seeds(harness.toy_study, range(20))
    med = {k: float(np.median([r[k] for r in rows])) for k in ("none", "rot", "bdq")}
    beats = sum(r["bdq"] < r["none"] for r in rows)
    ok = med["bdq"] < med["rot"] < med["none"] and beats >= 18
    detail = (
        f"median MSE bdq {med['bdq']:.4g} < rot {med['rot']:.4g} < none {med['none']:.4g}; "
        f"bdq beats identity in {beats}/20 (need 18)"
    )
    report(capsys, 9, ok, detail, t.elapsed, 300)


def test_c10_compare_is_byte_identical(tmp_path, capsys):
    m = tmp_path / "w.bdq"
    assert main(["gen", "64", "64", "--k", "20", "--outlier-frac", "0.005", "--seed", "110", "--out", str(m)]) == 0
    with Timer() as t:
        for name in ("a.json", "b.json"):
            assert main(["compare", str(m), "--seed", "110", "--out", str(tmp_path / name)]) == 0
    same_json = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    same_csv = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    report(capsys, 10, same_json and same_csv, f"JSON identical {same_json}; CSV identical {same_csv}", t.elapsed, 60)


def test_soft_overfitting_probe(capsys):
    """Report-only: long CE training on 8 samples, plus an RCE run on the same seeds."""
    seeds = range(5)
    ce = harness.map_seeds(lambda s: harness.overfitting_probe(s, epochs=1000), seeds)
    rce = harness.map_seeds(lambda s: harness.overfitting_probe(s, epochs=1000, loss="rce"), seeds)
    early = sum(r["early_minimum"] for r in ce)
    with capsys.disabled():
        print(f"\n[soft] CE held-out minimum before final epoch in {early}/{len(ce)} seeds")
        for a, b in zip(ce, rce):
            print(f"[soft] seed {a['seed']}: held-out MSE CE {a['heldout_mse']:.4g}, RCE {b['heldout_mse']:.4g}")


@pytest.mark.parametrize("suite", ["error_model", "flatness", "transforms", "losses"])
def test_validate_suites_green(suite):
    assert harness.run_validation(suite).passed
