"""Accelerated stochastic gradient for nonnegative matrix completion.

The subproblem solved for one mode is

    min_{A >= 0}  1/2 ||M * (X - A K^T)||_F^2 + lam/2 ||A||_F^2

where ``K`` is the Khatri-Rao product of the other factors. It is never
formed: every row of ``K`` that an observed entry needs is evaluated on the
fly from the stacked factor matrix. Each row of ``A`` is updated with its own
step size ``1/L_p``, where ``L_p`` is the top eigenvalue of the sampled row
Hessian, followed by a constant-step Nesterov extrapolation.

Rows are independent within an inner iteration and are processed by a
``numba.prange`` loop. Random sampling uses counter-based substreams keyed by
(seed, stream, inner iteration, row), so the output does not depend on the
number of worker threads.
"""
from __future__ import annotations

import math
import os
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from ._rng import row_key, substream_key, uniform
from .tensor import FactorSet, ModeView, stack_factors

if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # OpenMP first: avoids probing an outdated TBB on every start
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

# floor(c * n) guard against products such as 0.29 * 100 = 28.999999999999996
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class NmcConfig:
    lam: float
    c: float = 1.0
    max_inner: int = 1
    power_iters: int = 30
    power_tol: float = 1e-6
    power_margin: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lam must be a finite positive number, got {self.lam}")
        if not 0 < self.c <= 1:
            raise ValueError(f"sampling fraction c must be in (0, 1], got {self.c}")
        if int(self.max_inner) != self.max_inner or self.max_inner < 0:
            raise ValueError(f"max_inner must be a nonnegative integer, got {self.max_inner}")
        if self.power_iters < 1:
            raise ValueError(f"power_iters must be positive, got {self.power_iters}")
        if not self.power_tol > 0:
            raise ValueError(f"power_tol must be positive, got {self.power_tol}")
        if self.power_margin < 0:
            raise ValueError(f"power_margin must be nonnegative, got {self.power_margin}")


@dataclass
class SampledRow:
    """Sampled observed entries of one slice.

    ``positions`` index into the slice (0-based, ascending); ``entries`` are
    the matching entry ids of the source tensor.
    """

    row: int
    mode: int
    positions: np.ndarray
    entries: np.ndarray
    values: np.ndarray
    other_subs: np.ndarray

    @property
    def blocksize(self) -> int:
        return int(self.positions.shape[0])

    @property
    def skipped(self) -> bool:
        return self.blocksize == 0


@dataclass
class RowWorkspace:
    w: np.ndarray
    z: np.ndarray
    grad: np.ndarray
    H: np.ndarray | None = None
    L: float | None = None
    beta: float | None = None


# -- jitted kernels shared by the public helpers and the parallel loop --------


@njit(cache=True)
def _blocksize(n, c):
    return int(np.floor(c * n + _FLOOR_EPS))


@njit(cache=True)
def _sample_positions(n, b, key):
    if b >= n:
        return np.arange(n)
    pool = np.arange(n)
    # partial Fisher-Yates
    for j in range(b):
        t = j + int(uniform(key, np.uint64(j)) * (n - j))
        if t >= n:
            t = n - 1
        tmp = pool[j]
        pool[j] = pool[t]
        pool[t] = tmp
    return np.sort(pool[:b])


@njit(cache=True)
def _grad_hess(cat, gidx, vals, pos, y, lam, w, z, grad, H):
    rank = y.shape[0]
    k = np.empty(rank)
    w[:] = 0.0
    z[:] = 0.0
    H[:, :] = 0.0
    for t in range(pos.shape[0]):
        e = pos[t]
        for r in range(rank):
            prod = 1.0
            for n in range(gidx.shape[1]):
                prod *= cat[gidx[e, n], r]
            k[r] = prod
        x = vals[e]
        yk = 0.0
        for r in range(rank):
            yk += y[r] * k[r]
        for r in range(rank):
            w[r] -= x * k[r]
            z[r] += yk * k[r]
            kr = k[r]
            for s in range(r, rank):
                H[r, s] += kr * k[s]
    for r in range(rank):
        grad[r] = w[r] + z[r] + lam * y[r]
        H[r, r] += lam
        for s in range(r + 1, rank):
            H[s, r] = H[r, s]


@njit(cache=True)
def _power(H, max_iters, tol):
    rank = H.shape[0]
    v = np.full(rank, 1.0 / np.sqrt(rank))
    rq = 0.0
    prev = 0.0
    for it in range(max_iters):
        hv = H @ v
        rq = v @ hv
        if it > 0 and abs(rq - prev) <= tol * abs(rq):
            break
        nrm = np.sqrt(hv @ hv)
        if nrm == 0.0:
            break
        v = hv / nrm
        prev = rq
    return rq


@njit(cache=True)
def _momentum(L, lam):
    sl = np.sqrt(L)
    sm = np.sqrt(lam)
    return (sl - sm) / (sl + sm)


@njit(cache=True)
def _step(y, a_prev, grad, L, lam):
    a_new = np.maximum(y - grad / L, 0.0)
    beta = _momentum(L, lam)
    return a_new, a_new + beta * (a_new - a_prev)


@njit(cache=True)
def _all_finite(a):
    for v in a.ravel():
        if not np.isfinite(v):
            return False
    return True


@njit(parallel=True, cache=True)
def _s_nmc_kernel(offsets, gidx, vals, cat, A, Y, lam, c, max_inner,
                  power_iters, power_tol, margin, seed, stream, bad):
    n_rows, rank = A.shape
    for it in range(max_inner):
        for p in prange(n_rows):
            start = offsets[p]
            stop = offsets[p + 1]
            b = _blocksize(stop - start, c)
            if b == 0:
                continue
            key = row_key(seed, stream, np.uint64(it), np.uint64(p))
            pos = _sample_positions(stop - start, b, key)
            w = np.empty(rank)
            z = np.empty(rank)
            grad = np.empty(rank)
            H = np.empty((rank, rank))
            _grad_hess(cat, gidx[start:stop], vals[start:stop], pos, Y[p], lam, w, z, grad, H)
            if not (_all_finite(H) and _all_finite(grad)):
                bad[p] = 1
                continue
            L = max(_power(H, power_iters, power_tol) * (1.0 + margin), lam)
            a_new, y_new = _step(Y[p].copy(), A[p].copy(), grad, L, lam)
            A[p] = a_new
            Y[p] = y_new


# -- public helpers -----------------------------------------------------------


def sample_row(view: ModeView, row: int, c: float, key=None) -> SampledRow:
    """Draw ``floor(c * nnz_row)`` entries of a slice uniformly without replacement.

    ``row`` is 1-based. ``key`` is a substream key from
    :func:`sparse_ntc._rng.substream_key`; the default is the stream of
    (seed 0, stream 0, inner 0, row). A blocksize of 0 means the row is skipped.
    """
    if not 0 < c <= 1:
        raise ValueError(f"sampling fraction c must be in (0, 1], got {c}")
    if key is None:
        key = substream_key(0, 0, 0, row - 1)
    start, stop = view.offsets[row - 1], view.offsets[row]
    n = int(stop - start)
    pos = _sample_positions(n, _blocksize(n, c), np.uint64(key))
    return SampledRow(
        row=row,
        mode=view.mode,
        positions=pos,
        entries=view.perm[start:stop][pos],
        values=view.values[start:stop][pos],
        other_subs=view.other_subs[start:stop][pos],
    )


def _sample_operands(sampled: SampledRow, factors: FactorSet, mode: int):
    if sampled.mode != mode:
        raise ValueError(f"sample was drawn for mode {sampled.mode}, not {mode}")
    cat, base = stack_factors(factors)
    others = [n for n in range(factors.order) if n != mode - 1]
    gidx = np.ascontiguousarray(sampled.other_subs + base[others][None, :])
    return cat, gidx, np.ascontiguousarray(sampled.values), np.arange(sampled.blocksize)


def _row_terms(sampled, factors, mode, y_row, lam):
    cat, gidx, vals, pos = _sample_operands(sampled, factors, mode)
    rank = factors.rank
    y = np.ascontiguousarray(y_row, dtype=np.float64)
    if y.shape != (rank,):
        raise ValueError(f"row vector must have length {rank}")
    w, z, grad, H = np.empty(rank), np.empty(rank), np.empty(rank), np.empty((rank, rank))
    _grad_hess(cat, gidx, vals, pos, y, float(lam), w, z, grad, H)
    return w, z, grad, H


def row_gradient(sampled: SampledRow, factors: FactorSet, mode: int, y_row, lam: float) -> RowWorkspace:
    """Gradient of the sampled row loss at ``y_row``.

    ``w = -sum x_e k_e``, ``z = sum (y . k_e) k_e`` and ``grad = w + z + lam*y``.
    """
    w, z, grad, _ = _row_terms(sampled, factors, mode, y_row, lam)
    return RowWorkspace(w=w, z=z, grad=grad)


def row_hessian(sampled: SampledRow, factors: FactorSet, mode: int, lam: float) -> np.ndarray:
    """``sum_e k_e k_e^T + lam I`` over the sampled entries."""
    return _row_terms(sampled, factors, mode, np.zeros(factors.rank), lam)[3]


def power_method(H, max_iters: int = 30, tol: float = 1e-6, margin: float = 0.01) -> float:
    """Largest eigenvalue of a symmetric PSD matrix, inflated by ``margin``.

    Starts from the normalized all-ones vector and stops once the Rayleigh
    quotient changes by less than ``tol`` (relative). Pass ``margin=0`` to get
    the raw Rayleigh quotient.
    """
    H = np.ascontiguousarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] == 0:
        raise ValueError(f"expected a nonempty square matrix, got shape {H.shape}")
    if not np.isfinite(H).all():
        raise FloatingPointError("matrix has non-finite entries")
    return float(_power(H, int(max_iters), float(tol))) * (1.0 + margin)


def momentum(L: float, lam: float) -> float:
    return float(_momentum(float(L), float(lam)))


def row_step(y_row, a_prev, grad, L: float, lam: float):
    """Projected gradient step from ``y_row`` followed by Nesterov extrapolation.

    Returns ``(a_new, y_new)``; ``a_new`` is nonnegative, ``y_new`` may not be.
    """
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    if not L >= lam:
        raise ValueError(f"step constant L={L} is below lam={lam}")
    return _step(
        np.asarray(y_row, dtype=np.float64),
        np.asarray(a_prev, dtype=np.float64),
        np.asarray(grad, dtype=np.float64),
        float(L),
        float(lam),
    )


def entries_accessed(view: ModeView, c: float, max_inner: int) -> int:
    """Observed entries touched by one ``s_nmc`` call."""
    counts = view.counts()
    per_iter = sum(_blocksize(int(n), c) for n in counts)
    return int(per_iter) * int(max_inner)


@contextmanager
def worker_threads(threads: int | None = None, chunksize: int | None = None):
    """Temporarily set the numba worker count and ``prange`` chunk size.

    ``chunksize=None`` keeps numba's static contiguous partitioning.
    """
    old_threads = numba.get_num_threads()
    if threads is not None:
        if threads < 1:
            raise ValueError(f"threads must be positive, got {threads}")
        limit = numba.config.NUMBA_NUM_THREADS
        if threads > limit:
            warnings.warn(
                f"requested {threads} threads but the pool has {limit}; "
                "set NUMBA_NUM_THREADS before import to raise the limit",
                RuntimeWarning,
                stacklevel=3,
            )
            threads = limit
        numba.set_num_threads(threads)
    old_chunk = numba.set_parallel_chunksize(chunksize) if chunksize else None
    try:
        yield
    finally:
        numba.set_num_threads(old_threads)
        if old_chunk is not None:
            numba.set_parallel_chunksize(old_chunk)


def s_nmc(view: ModeView, factors: FactorSet, mode: int, a_init, cfg: NmcConfig,
          stream: int = 0, threads: int | None = None, chunksize: int | None = None,
          return_momentum: bool = False):
    """Run ``cfg.max_inner`` accelerated stochastic iterations for one mode.

    Parameters
    ----------
    view : ModeView
        Slices of the tensor along ``mode``.
    factors : FactorSet
        Supplies the other modes' factors (the Khatri-Rao operand). The
        factor of ``mode`` itself is not read.
    mode : int
        1-based mode being updated.
    a_init : ndarray, shape (I_mode, R)
        Nonnegative starting point; both iterates start here.
    cfg : NmcConfig
    stream : int
        Identifies this call among all calls sharing ``cfg.seed``.
    threads, chunksize : int, optional
        Worker count and ``prange`` chunk size. Neither affects the result.
    return_momentum : bool
        Also return the final extrapolated iterate.

    Returns
    -------
    A : ndarray
        Updated nonnegative factor.
    """
    if view.mode != mode:
        raise ValueError(f"view is for mode {view.mode}, not {mode}")
    a = np.array(a_init, dtype=np.float64, order="C", copy=True)
    if a.shape != (view.n_rows, factors.rank):
        raise ValueError(f"a_init must have shape {(view.n_rows, factors.rank)}, got {a.shape}")
    if (a < 0).any():
        raise ValueError("a_init must be nonnegative")
    y = a.copy()
    if cfg.max_inner == 0 or view.values.shape[0] == 0:
        return (a, y) if return_momentum else a
    cat, base = stack_factors(factors)
    gidx = view.global_other_subs(base)
    bad = np.zeros(view.n_rows, dtype=np.int8)
    with worker_threads(threads, chunksize):
        _s_nmc_kernel(
            view.offsets, gidx, view.values, cat, a, y, float(cfg.lam), float(cfg.c),
            int(cfg.max_inner), int(cfg.power_iters), float(cfg.power_tol),
            float(cfg.power_margin), np.uint64(int(cfg.seed) & (2**64 - 1)),
            np.uint64(int(stream) & (2**64 - 1)), bad,
        )
    if bad.any():
        rows = np.flatnonzero(bad)[:5] + 1
        raise FloatingPointError(
            f"non-finite row Hessian in mode {mode} (rows {rows.tolist()}); factors overflowed"
        )
    return (a, y) if return_momentum else a
