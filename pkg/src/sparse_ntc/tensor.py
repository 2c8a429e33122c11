"""Sparse tensor storage, per-mode slice indexing and CPD model evaluation.

Index convention: every public function that takes or returns index tuples
uses 1-based indices (the FROSTT convention). Arrays named ``subs`` are the
0-based internal representation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit, prange


class SparseTensor:
    """N-way coordinate store of observed entries.

    Parameters
    ----------
    subs : array_like of int, shape (nnz, N)
        0-based indices of the observed cells.
    vals : array_like of float, shape (nnz,)
        Observed values. An entry with value 0 is still an observation.
    dims : sequence of int
        Tensor shape ``(I_1, ..., I_N)``.
    """

    def __init__(self, subs, vals, dims: Sequence[int]):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2:
            raise ValueError(f"tensor order must be >= 2, got {len(dims)}")
        if any(d <= 0 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        subs = np.asarray(subs, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if subs.size == 0:
            subs = subs.reshape(0, len(dims))
        if subs.ndim != 2 or subs.shape[1] != len(dims):
            raise ValueError(f"subs must have shape (nnz, {len(dims)}), got {subs.shape}")
        if vals.shape != (subs.shape[0],):
            raise ValueError(f"vals must have shape ({subs.shape[0]},), got {vals.shape}")
        if subs.size and ((subs < 0).any() or (subs >= np.asarray(dims)).any()):
            bad = np.flatnonzero(((subs < 0) | (subs >= np.asarray(dims))).any(axis=1))[0]
            raise IndexError(
                f"index {tuple(int(i) + 1 for i in subs[bad])} out of bounds for dims {dims}"
            )
        if not np.isfinite(vals).all():
            raise ValueError("tensor values must be finite")
        if (vals < 0).any():
            bad = int(np.flatnonzero(vals < 0)[0])
            raise ValueError(
                f"negative value {vals[bad]} at {tuple(int(i) + 1 for i in subs[bad])}"
            )
        dup = _first_duplicate(subs)
        if dup is not None:
            raise ValueError(f"duplicate index {tuple(int(i) + 1 for i in dup)}")
        self.subs = subs
        self.vals = vals
        self.dims = dims

    @classmethod
    def from_entries(cls, entries: Iterable, dims: Sequence[int] | None = None) -> "SparseTensor":
        """Build from ``(index_tuple, value)`` pairs with 1-based indices.

        When ``dims`` is omitted it is inferred as the componentwise maximum.
        """
        entries = list(entries)
        if not entries:
            if dims is None:
                raise ValueError("cannot infer dims of an empty tensor")
            return cls(np.empty((0, len(dims)), np.int64), np.empty(0), dims)
        subs = np.array([idx for idx, _ in entries], dtype=np.int64) - 1
        vals = np.array([v for _, v in entries], dtype=np.float64)
        if dims is None:
            dims = tuple(int(m) + 1 for m in subs.max(axis=0))
        return cls(subs, vals, dims)

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def nnz(self) -> int:
        return self.vals.shape[0]

    def entries(self) -> list[tuple[tuple[int, ...], float]]:
        """Observed entries as ``(1-based index tuple, value)`` pairs."""
        return [
            (tuple(int(i) + 1 for i in s), float(v)) for s, v in zip(self.subs, self.vals)
        ]

    def sorted(self) -> "SparseTensor":
        """Copy with entries in lexicographic index order."""
        order = np.lexsort(self.subs.T[::-1]) if self.nnz else np.arange(0)
        out = SparseTensor.__new__(SparseTensor)
        out.subs, out.vals, out.dims = self.subs[order], self.vals[order], self.dims
        return out

    def with_values(self, vals) -> "SparseTensor":
        """Same support, new values."""
        return SparseTensor(self.subs, vals, self.dims)

    def norm(self) -> float:
        return float(np.linalg.norm(self.vals))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTensor):
            return NotImplemented
        if self.dims != other.dims or self.nnz != other.nnz:
            return False
        a, b = self.sorted(), other.sorted()
        return bool(np.array_equal(a.subs, b.subs) and np.array_equal(a.vals, b.vals))

    def __repr__(self) -> str:
        return f"SparseTensor(dims={self.dims}, nnz={self.nnz})"


def _first_duplicate(subs: np.ndarray):
    if subs.shape[0] < 2:
        return None
    order = np.lexsort(subs.T[::-1])
    s = subs[order]
    same = (s[1:] == s[:-1]).all(axis=1)
    if same.any():
        return s[int(np.flatnonzero(same)[0])]
    return None


class ModeView:
    """Entries of a tensor grouped by their index along one mode.

    Slice ``p`` holds the observed entries of row ``p`` of the mode unfolding,
    ordered lexicographically by the remaining indices. Storage is CSR-like:
    ``perm[offsets[p]:offsets[p + 1]]`` are the entry ids of (0-based) slice p.
    """

    def __init__(self, tensor: SparseTensor, mode: int):
        if not 1 <= mode <= tensor.order:
            raise ValueError(f"mode must be in 1..{tensor.order}, got {mode}")
        m = mode - 1
        others = [n for n in range(tensor.order) if n != m]
        # np.lexsort sorts by the last key first
        keys = [tensor.subs[:, n] for n in reversed(others)] + [tensor.subs[:, m]]
        perm = np.lexsort(keys) if tensor.nnz else np.empty(0, np.int64)
        counts = np.bincount(tensor.subs[:, m], minlength=tensor.dims[m])
        self.mode = mode
        self.dims = tensor.dims
        self.perm = perm.astype(np.int64)
        self.offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        self.other_modes = tuple(n + 1 for n in others)
        self.other_subs = np.ascontiguousarray(tensor.subs[perm][:, others])
        self.values = np.ascontiguousarray(tensor.vals[perm])

    @property
    def n_rows(self) -> int:
        return self.offsets.shape[0] - 1

    def counts(self) -> np.ndarray:
        """Number of observed entries in every slice."""
        return np.diff(self.offsets)

    def slice(self, p: int) -> np.ndarray:
        """Entry ids (into the source tensor) of 1-based slice ``p``."""
        if not 1 <= p <= self.n_rows:
            raise IndexError(f"slice {p} out of range 1..{self.n_rows}")
        return self.perm[self.offsets[p - 1]:self.offsets[p]]

    @property
    def slices(self) -> list[np.ndarray]:
        return [self.slice(p) for p in range(1, self.n_rows + 1)]

    def global_other_subs(self, base: np.ndarray) -> np.ndarray:
        """Other-mode indices shifted into a stacked factor matrix (see ``stack_factors``)."""
        return np.ascontiguousarray(
            self.other_subs + base[[n - 1 for n in self.other_modes]][None, :]
        )


def build_mode_views(tensor: SparseTensor) -> list[ModeView]:
    return [ModeView(tensor, mode) for mode in range(1, tensor.order + 1)]


@dataclass
class FactorSet:
    """Nonnegative CPD factors ``U^(1..N)`` and their momentum companions ``Y``.

    Only ``factors`` are constrained to be nonnegative; momentum matrices
    can carry negative entries.
    """

    factors: list[np.ndarray]
    momentum: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.factors = [np.ascontiguousarray(f, dtype=np.float64) for f in self.factors]
        if len(self.factors) < 2:
            raise ValueError("need at least two factor matrices")
        ranks = {f.shape[1] for f in self.factors if f.ndim == 2}
        if len(ranks) != 1 or any(f.ndim != 2 for f in self.factors):
            raise ValueError("factor matrices must be 2-D with a common column count")
        for i, f in enumerate(self.factors):
            if (f < 0).any():
                raise ValueError(f"factor {i + 1} has negative entries")
        if not self.momentum:
            self.momentum = [f.copy() for f in self.factors]

    @classmethod
    def random(cls, dims: Sequence[int], rank: int, seed=None) -> "FactorSet":
        """I.i.d. Uniform[0, 1] factors."""
        rng = np.random.default_rng(seed)
        return cls([rng.random((d, rank)) for d in dims])

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def order(self) -> int:
        return len(self.factors)

    def copy(self) -> "FactorSet":
        return FactorSet([f.copy() for f in self.factors], [y.copy() for y in self.momentum])

    def full(self) -> np.ndarray:
        """Dense reconstruction. Only for small tensors and image output."""
        letters = "abcdefghijklmnopqrstuvwxy"[: self.order]
        expr = ",".join(f"{c}z" for c in letters) + "->" + letters
        return np.einsum(expr, *self.factors)


def stack_factors(factors: FactorSet):
    """Concatenate all factor matrices row-wise.

    Returns ``(cat, base)`` where row ``i`` of mode ``n`` (0-based) lives at
    ``cat[base[n] + i]``.
    """
    cat = np.ascontiguousarray(np.vstack(factors.factors))
    base = np.concatenate(([0], np.cumsum(factors.dims)[:-1])).astype(np.int64)
    return cat, base


def _check_compatible(tensor: SparseTensor, factors: FactorSet):
    if tuple(tensor.dims) != factors.dims:
        raise ValueError(f"factor dims {factors.dims} do not match tensor dims {tensor.dims}")


def _check_index(factors: FactorSet, index: Sequence[int], modes: Sequence[int]):
    for n, i in zip(modes, index):
        if not 1 <= i <= factors.dims[n - 1]:
            raise IndexError(f"index {i} out of bounds for mode {n} of size {factors.dims[n - 1]}")


def kr_row(factors: FactorSet, mode: int, other_indices: Sequence[int]) -> np.ndarray:
    """One row of the Khatri-Rao product of all factors except ``mode``.

    ``other_indices`` are 1-based and listed in increasing mode order with
    ``mode`` left out. The row is the Hadamard product of the selected factor
    rows.
    """
    modes = [n for n in range(1, factors.order + 1) if n != mode]
    if len(other_indices) != len(modes):
        raise ValueError(f"expected {len(modes)} indices, got {len(other_indices)}")
    _check_index(factors, other_indices, modes)
    k = np.ones(factors.rank)
    for n, i in zip(modes, other_indices):
        k = k * factors.factors[n - 1][i - 1]
    return k


def cpd_value(factors: FactorSet, index: Sequence[int]) -> float:
    """Model value at one 1-based cell."""
    if len(index) != factors.order:
        raise ValueError(f"expected {factors.order} indices, got {len(index)}")
    _check_index(factors, index, range(1, factors.order + 1))
    k = kr_row(factors, 1, index[1:])
    return float(factors.factors[0][index[0] - 1] @ k)


@njit(parallel=True, cache=True)
def _model_values(gsubs, cat):
    nnz, order = gsubs.shape
    rank = cat.shape[1]
    out = np.empty(nnz)
    for e in prange(nnz):
        acc = 0.0
        for r in range(rank):
            prod = 1.0
            for n in range(order):
                prod *= cat[gsubs[e, n], r]
            acc += prod
        out[e] = acc
    return out


def model_values(factors: FactorSet, subs: np.ndarray) -> np.ndarray:
    """Model values at many cells given as 0-based ``subs`` of shape (m, N)."""
    subs = np.asarray(subs, dtype=np.int64)
    if subs.shape[0] == 0:
        return np.empty(0)
    cat, base = stack_factors(factors)
    return _model_values(np.ascontiguousarray(subs + base[None, :]), cat)


def objective(tensor: SparseTensor, factors: FactorSet, lam: float) -> float:
    """Masked least-squares loss plus ``lam/2`` times the squared factor norms."""
    _check_compatible(tensor, factors)
    resid = tensor.vals - model_values(factors, tensor.subs)
    reg = sum(float(np.sum(f * f)) for f in factors.factors)
    return 0.5 * float(resid @ resid) + 0.5 * lam * reg


def relative_error(tensor: SparseTensor, factors: FactorSet) -> float:
    """``||M * (X - Y)||_F / ||M * X||_F`` over the observed entries."""
    _check_compatible(tensor, factors)
    denom = tensor.norm()
    if denom == 0.0:
        raise ZeroDivisionError("relative error undefined: all observed values are zero")
    resid = tensor.vals - model_values(factors, tensor.subs)
    return float(np.linalg.norm(resid)) / denom
