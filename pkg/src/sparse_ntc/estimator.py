"""scikit-learn style wrapper around the alternating solver.

Observed cells are samples: ``X`` holds their 1-based coordinates, one
column per mode, and ``y`` their values. ``predict`` evaluates the fitted
CPD model at any coordinates, which is how missing cells are completed.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .ao import AoConfig, ao_ntc
from .tensor import FactorSet, SparseTensor, model_values


def check_coords(X, dims=None) -> np.ndarray:
    """Validate 1-based integer coordinates and return them 0-based."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError(f"X must be 2-D with one column per mode (>= 2), got shape {X.shape}")
    if X.size and not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.mod(X, 1) == 0):
            raise ValueError("coordinates must be integers")
    subs = X.astype(np.int64) - 1
    if (subs < 0).any():
        raise ValueError("coordinates are 1-based; found an index < 1")
    if dims is not None:
        if len(dims) != subs.shape[1]:
            raise ValueError(f"X has {subs.shape[1]} columns, expected {len(dims)}")
        if (subs >= np.asarray(dims)).any():
            raise IndexError(f"coordinates exceed dims {tuple(dims)}")
    return subs


def check_tensor(X, y=None, dims=None) -> SparseTensor:
    """Coerce ``(coords, values)`` or a SparseTensor into a validated SparseTensor."""
    if isinstance(X, SparseTensor):
        if y is not None:
            raise ValueError("y must be None when X is a SparseTensor")
        if dims is not None and tuple(dims) != X.dims:
            raise ValueError(f"tensor dims {X.dims} differ from dims={tuple(dims)}")
        return X
    if y is None:
        raise ValueError("y is required when X holds coordinates")
    subs = check_coords(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != subs.shape[0]:
        raise ValueError(f"X has {subs.shape[0]} rows but y has {y.shape[0]}")
    if dims is None:
        dims = tuple(int(m) + 1 for m in subs.max(axis=0))
    return SparseTensor(subs, y, dims)


class NonnegativeTensorCompletion(RegressorMixin, BaseEstimator):
    """Nonnegative CPD completion of a sparsely observed tensor.

    Parameters
    ----------
    rank : int
    lam : float
        Ridge weight on the factors; must be positive.
    c : float
        Fraction of each row's observed entries sampled per inner iteration.
    max_inner : int
        Accelerated iterations per mode update.
    max_epochs : float
        Budget in passes over the observed entries.
    term_tol : float
        Relative-error plateau tolerance; 0 disables early stopping.
    dims : tuple of int, optional
        Tensor shape; inferred from the training coordinates if omitted.
    random_state : int
        Seeds both the initial factors and the row sampling.
    n_threads : int
    init : FactorSet, optional
        Starting factors; Uniform[0, 1] draws when omitted.
    """

    def __init__(self, rank=10, lam=1e-3, c=1.0, max_inner=1, max_epochs=100.0,
                 term_tol=0.0, dims=None, random_state=0, n_threads=1, init=None):
        self.rank = rank
        self.lam = lam
        self.c = c
        self.max_inner = max_inner
        self.max_epochs = max_epochs
        self.term_tol = term_tol
        self.dims = dims
        self.random_state = random_state
        self.n_threads = n_threads
        self.init = init

    def _config(self) -> AoConfig:
        return AoConfig(
            rank=self.rank, lam=self.lam, c=self.c, max_inner=self.max_inner,
            max_epochs=self.max_epochs, term_tol=self.term_tol,
            seed=int(self.random_state), threads=self.n_threads,
        )

    def fit(self, X, y=None):
        tensor = check_tensor(X, y, self.dims)
        cfg = self._config()
        if self.init is None:
            init = FactorSet.random(tensor.dims, cfg.rank, seed=cfg.seed)
        else:
            init = self.init
        factors, history = ao_ntc(tensor, init, cfg)
        self.factors_ = factors
        self.history_ = history
        self.dims_ = tensor.dims
        self.n_epochs_ = history[-1].epoch
        return self

    def predict(self, X):
        check_is_fitted(self, "factors_")
        subs = check_coords(X, self.dims_)
        return model_values(self.factors_, subs)

    def reconstruct(self) -> np.ndarray:
        """Dense model tensor. Only sensible for small shapes."""
        check_is_fitted(self, "factors_")
        return self.factors_.full()
