import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_ntc import (
    FactorSet, NmcConfig, SparseTensor, build_mode_views, power_method, row_gradient,
    row_hessian, row_step, s_nmc, sample_row,
)
from sparse_ntc._rng import substream_key
from sparse_ntc.nmc import entries_accessed, momentum

from conftest import random_tensor
from oracles import nmc_gradient, nmc_hessian, nmc_minimizer


def matrix_problem(rng, P, Q, R, density=0.6):
    X = rng.random((P, Q))
    M = (rng.random((P, Q)) < density).astype(float)
    subs = np.argwhere(M)
    t = SparseTensor(subs, X[tuple(subs.T)], (P, Q))
    A = rng.random((P, R))
    B = rng.random((Q, R))
    return t, X, M, A, B


class TestSampleRow:
    def view_with_counts(self, counts):
        entries = [((p + 1, q + 1), 1.0) for p, n in enumerate(counts) for q in range(n)]
        t = SparseTensor.from_entries(entries, dims=(len(counts), max(counts)))
        return build_mode_views(t)[0]

    def test_blocksize_floor(self):
        v = self.view_with_counts([5, 3])
        assert sample_row(v, 1, 0.5).blocksize == 2
        assert sample_row(v, 2, 0.2).blocksize == 0
        assert sample_row(v, 2, 0.2).skipped

    def test_full_sample_keeps_order(self):
        v = self.view_with_counts([5, 3])
        s = sample_row(v, 1, 1.0)
        np.testing.assert_array_equal(s.entries, v.slice(1))

    def test_floor_is_robust_to_rounding(self):
        v = self.view_with_counts([100])
        assert sample_row(v, 1, 0.29).blocksize == 29

    def test_subset_without_duplicates(self):
        v = self.view_with_counts([40])
        for j in range(50):
            s = sample_row(v, 1, 0.3, key=substream_key(7, 0, j, 0))
            assert s.blocksize == 12
            assert len(set(s.entries.tolist())) == 12
            assert set(s.entries.tolist()) <= set(v.slice(1).tolist())

    def test_roughly_uniform(self):
        v = self.view_with_counts([10])
        hits = np.zeros(10)
        n = 4000
        for j in range(n):
            hits[sample_row(v, 1, 0.3, key=substream_key(1, 2, j, 0)).positions] += 1
        # each position is picked with probability 0.3
        assert np.all(np.abs(hits / n - 0.3) < 0.03)

    def test_deterministic_per_key(self):
        v = self.view_with_counts([30])
        a = sample_row(v, 1, 0.5, key=substream_key(3, 1, 4, 0))
        b = sample_row(v, 1, 0.5, key=substream_key(3, 1, 4, 0))
        c = sample_row(v, 1, 0.5, key=substream_key(3, 1, 5, 0))
        np.testing.assert_array_equal(a.positions, b.positions)
        assert not np.array_equal(a.positions, c.positions)


class TestRowGradient:
    def test_empty_sample(self, rng):
        t = SparseTensor.from_entries([((2, 1), 1.0)], dims=(2, 3))
        f = FactorSet([rng.random((2, 2)), rng.random((3, 2))])
        s = sample_row(build_mode_views(t)[0], 1, 1.0)
        y = np.array([0.3, 0.7])
        ws = row_gradient(s, f, 1, y, 0.25)
        np.testing.assert_array_equal(ws.grad, 0.25 * y)
        np.testing.assert_array_equal(ws.w, 0.0)

    def test_exact_fit_zero_gradient(self, rng):
        B = rng.random((4, 2))
        y = np.array([0.4, 0.9])
        subs = np.array([[0, 0], [0, 2], [0, 3]])
        t = SparseTensor(subs, B[[0, 2, 3]] @ y, (1, 4))
        f = FactorSet([y[None, :], B])
        s = sample_row(build_mode_views(t)[0], 1, 1.0)
        ws = row_gradient(s, f, 1, y, 0.0)
        np.testing.assert_allclose(ws.grad, 0.0, atol=1e-15)
        np.testing.assert_allclose(ws.w, -ws.z, rtol=1e-14)

    def test_matches_dense_gradient(self, rng):
        t, X, M, A, B = matrix_problem(rng, 3, 4, 2, density=1.0)
        f = FactorSet([A, B])
        view = build_mode_views(t)[0]
        G = np.array([row_gradient(sample_row(view, p, 1.0), f, 1, A[p - 1], 0.2).grad for p in (1, 2, 3)])
        np.testing.assert_allclose(G, nmc_gradient(X, M, A, B, 0.2), rtol=1e-12)

    def test_mode_two_uses_other_factor(self, rng):
        # the transposed problem: update B against A
        t, X, M, A, B = matrix_problem(rng, 5, 4, 3)
        f = FactorSet([A, B])
        view = build_mode_views(t)[1]
        G = np.array([row_gradient(sample_row(view, q, 1.0), f, 2, B[q - 1], 0.1).grad for q in range(1, 5)])
        np.testing.assert_allclose(G, nmc_gradient(X.T, M.T, B, A, 0.1), rtol=1e-12, atol=1e-14)


class TestRowHessian:
    def test_empty_sample(self):
        t = SparseTensor.from_entries([((2, 1), 1.0)], dims=(2, 3))
        f = FactorSet([np.ones((2, 3)), np.ones((3, 3))])
        H = row_hessian(sample_row(build_mode_views(t)[0], 1, 1.0), f, 1, 0.7)
        np.testing.assert_array_equal(H, 0.7 * np.eye(3))

    def test_single_entry(self):
        t = SparseTensor.from_entries([((1, 1), 1.0)], dims=(1, 1))
        f = FactorSet([np.zeros((1, 2)), np.array([[1.0, 0.0]])])
        H = row_hessian(sample_row(build_mode_views(t)[0], 1, 1.0), f, 1, 0.5)
        np.testing.assert_array_equal(H, [[1.5, 0.0], [0.0, 0.5]])

    def test_matches_dense_block(self, rng):
        t, X, M, A, B = matrix_problem(rng, 4, 5, 3)
        f = FactorSet([A, B])
        view = build_mode_views(t)[0]
        full = nmc_hessian(M, B, 0.3)
        for p in range(4):
            blk = full[p::4, p::4]
            H = row_hessian(sample_row(view, p + 1, 1.0), f, 1, 0.3)
            np.testing.assert_allclose(H, blk, rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10))
    def test_eigenvalue_bounds(self, seed, lam):
        rng = np.random.default_rng(seed)
        t = random_tensor(rng, (3, 4, 5), 0.5)
        f = FactorSet([rng.random((d, 3)) for d in t.dims])
        view = build_mode_views(t)[1]
        for p in range(1, 5):
            s = sample_row(view, p, 0.6, key=substream_key(seed, 0, 0, p - 1))
            H = row_hessian(s, f, 2, lam)
            np.testing.assert_array_equal(H, H.T)
            L = power_method(H, margin=0.0)
            assert lam * (1 - 1e-12) <= L <= np.trace(H) * (1 + 1e-12)
            eig = np.linalg.eigvalsh(H)
            assert eig[0] >= lam * (1 - 1e-10)


class TestPowerMethod:
    def test_diagonal(self):
        assert power_method(np.diag([3.0, 1.0]), margin=0.0) == pytest.approx(3.0, rel=1e-6)

    @pytest.mark.parametrize("R", [1, 2, 5, 10])
    def test_scaled_identity(self, R):
        assert power_method(0.4 * np.eye(R), margin=0.0) == pytest.approx(0.4, rel=1e-15)

    def test_margin_inflates(self):
        assert power_method(np.diag([2.0, 1.0]), 200, 1e-14) == pytest.approx(2.02, rel=1e-12)

    def test_random_psd_against_eigh(self, rng):
        for _ in range(20):
            G = rng.standard_normal((5, 7))
            H = G @ G.T
            L = power_method(H, 1000, 1e-12, margin=0.0)
            assert L == pytest.approx(np.linalg.eigvalsh(H)[-1], rel=1e-6)

    def test_deterministic(self, rng):
        G = rng.random((6, 6))
        H = G @ G.T
        assert power_method(H) == power_method(H)

    def test_rejects_nonfinite(self):
        with pytest.raises(FloatingPointError):
            power_method(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestRowStep:
    def test_fixed_point(self):
        y = np.array([0.2, 0.5])
        a, ynew = row_step(y, y, np.zeros(2), 3.0, 0.5)
        np.testing.assert_array_equal(a, y)
        np.testing.assert_array_equal(ynew, y)

    def test_no_momentum_when_L_equals_lam(self):
        assert momentum(0.5, 0.5) == 0.0
        a, ynew = row_step([0.3, 0.1], [1.0, 1.0], [0.2, -0.4], 0.5, 0.5)
        # (0.3 - 0.2/0.5, 0.1 + 0.4/0.5) projected
        np.testing.assert_allclose(a, [0.0, 0.9], rtol=1e-15)
        np.testing.assert_array_equal(ynew, a)

    def test_worked_example(self):
        a, ynew = row_step([0.1, 0.4], [0.0, 0.0], [1.0, -1.0], 2.0, 0.5)
        # independent scalar evaluation of the three formulas
        step = [max(0.1 - 1.0 / 2.0, 0.0), max(0.4 + 1.0 / 2.0, 0.0)]
        beta = (math.sqrt(2.0) - math.sqrt(0.5)) / (math.sqrt(2.0) + math.sqrt(0.5))
        assert beta == pytest.approx(1 / 3, rel=1e-15)
        np.testing.assert_allclose(a, [0.0, 0.9], rtol=1e-15)
        np.testing.assert_allclose(a, step, rtol=1e-15)
        np.testing.assert_allclose(ynew, [0.0, 1.2], rtol=1e-14)

    def test_invalid_constants(self):
        with pytest.raises(ValueError):
            row_step([0.0], [0.0], [0.0], 0.1, 0.5)
        with pytest.raises(ValueError):
            row_step([0.0], [0.0], [0.0], 1.0, 0.0)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-5, 5), min_size=1, max_size=6),
        st.floats(1e-4, 10), st.floats(1.0, 100.0), st.integers(0, 2**32 - 1),
    )
    def test_projection_and_beta_range(self, y, lam, ratio, seed):
        rng = np.random.default_rng(seed)
        y = np.array(y)
        L = lam * ratio
        a, _ = row_step(y, rng.random(y.size), rng.standard_normal(y.size), L, lam)
        assert np.all(a >= 0)
        beta = momentum(L, lam)
        assert 0 <= beta < 1
        assert (beta == 0) == (L == lam)


class TestSNmc:
    def test_zero_inner_returns_init(self, rng):
        t, X, M, A, B = matrix_problem(rng, 4, 5, 2)
        view = build_mode_views(t)[0]
        out = s_nmc(view, FactorSet([A, B]), 1, A, NmcConfig(lam=0.1, max_inner=0))
        np.testing.assert_array_equal(out, A)

    def test_no_observations_returns_init(self, rng):
        t = SparseTensor.from_entries([], dims=(3, 4))
        A, B = rng.random((3, 2)), rng.random((4, 2))
        out = s_nmc(build_mode_views(t)[0], FactorSet([A, B]), 1, A, NmcConfig(lam=0.1, max_inner=50))
        np.testing.assert_array_equal(out, A)

    def test_skipped_rows_untouched(self, rng):
        entries = [((1, q), 1.0) for q in range(1, 11)] + [((2, 1), 2.0), ((2, 2), 3.0)]
        t = SparseTensor.from_entries(entries, dims=(2, 10))
        A, B = rng.random((2, 2)), rng.random((10, 2))
        a, y = s_nmc(build_mode_views(t)[0], FactorSet([A, B]), 1, A,
                     NmcConfig(lam=0.1, c=0.3, max_inner=5), return_momentum=True)
        np.testing.assert_array_equal(a[1], A[1])
        np.testing.assert_array_equal(y[1], A[1])
        assert not np.array_equal(a[0], A[0])

    def test_converges_to_minimizer(self, rng):
        t, X, M, A, B = matrix_problem(rng, 5, 6, 3, density=0.7)
        view = build_mode_views(t)[0]
        out = s_nmc(view, FactorSet([A, B]), 1, A, NmcConfig(lam=0.1, max_inner=600))
        ref = nmc_minimizer(X, M, B, 0.1, A, iters=20_000)
        assert np.linalg.norm(out - ref) <= 1e-4 * np.linalg.norm(ref)

    def test_c_one_is_seed_free(self, rng):
        t = random_tensor(rng, (6, 5, 4), 0.5)
        f = FactorSet([rng.random((d, 3)) for d in t.dims])
        view = build_mode_views(t)[2]
        a = s_nmc(view, f, 3, f.factors[2], NmcConfig(lam=0.1, max_inner=3, seed=1))
        b = s_nmc(view, f, 3, f.factors[2], NmcConfig(lam=0.1, max_inner=3, seed=99), stream=5)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("chunksize", [None, 1, 3])
    def test_thread_invariance(self, rng, chunksize):
        t = random_tensor(rng, (40, 30, 20), 0.2)
        f = FactorSet([rng.random((d, 4)) for d in t.dims])
        view = build_mode_views(t)[0]
        cfg = NmcConfig(lam=0.05, c=0.4, max_inner=4, seed=11)
        ref = s_nmc(view, f, 1, f.factors[0], cfg, stream=2, threads=1)
        for threads in (2, 3, 4):
            out = s_nmc(view, f, 1, f.factors[0], cfg, stream=2, threads=threads, chunksize=chunksize)
            np.testing.assert_array_equal(out, ref)

    def test_matches_python_reference_loop(self, rng):
        # the jitted kernel against the public per-row helpers
        t = random_tensor(rng, (5, 6, 7), 0.4)
        f = FactorSet([rng.random((d, 3)) for d in t.dims])
        view = build_mode_views(t)[1]
        cfg = NmcConfig(lam=0.2, c=0.5, max_inner=3, seed=4)
        A = f.factors[1].copy()
        Y = A.copy()
        for it in range(cfg.max_inner):
            for p in range(1, view.n_rows + 1):
                s = sample_row(view, p, cfg.c, key=substream_key(cfg.seed, 7, it, p - 1))
                if s.skipped:
                    continue
                g = row_gradient(s, f, 2, Y[p - 1], cfg.lam).grad
                L = max(power_method(row_hessian(s, f, 2, cfg.lam)), cfg.lam)
                A[p - 1], Y[p - 1] = row_step(Y[p - 1], A[p - 1], g, L, cfg.lam)
        out = s_nmc(view, f, 2, f.factors[1], cfg, stream=7)
        np.testing.assert_allclose(out, A, rtol=1e-13, atol=1e-15)

    def test_overflow_aborts(self):
        t = SparseTensor.from_entries([((1, 1), 1.0)], dims=(1, 1))
        f = FactorSet([np.ones((1, 1)), np.array([[1e200]])])
        with pytest.raises(FloatingPointError, match="non-finite"):
            s_nmc(build_mode_views(t)[0], f, 1, np.ones((1, 1)), NmcConfig(lam=0.1))

    def test_entries_accessed(self):
        entries = [((p, q), 1.0) for p in (1, 2) for q in range(1, 6)]
        view = build_mode_views(SparseTensor.from_entries(entries))[0]
        assert entries_accessed(view, 0.5, 3) == 3 * (2 + 2)


class TestNmcConfig:
    @pytest.mark.parametrize("kw", [dict(lam=0.0), dict(lam=-1.0), dict(lam=0.1, c=0.0),
                                    dict(lam=0.1, c=1.5), dict(lam=0.1, max_inner=-1),
                                    dict(lam=0.1, power_tol=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            NmcConfig(**kw)
