"""Alternating optimization over modes, with epoch accounting and metrics."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import nmc
from .tensor import FactorSet, SparseTensor, build_mode_views, objective, relative_error

PLATEAU_SWEEPS = 3


@dataclass(frozen=True)
class AoConfig:
    rank: int
    lam: float = 1e-3
    c: float = 1.0
    max_inner: int = 1
    max_epochs: float = 100.0
    term_tol: float = 0.0
    seed: int = 0
    threads: int = 1
    chunksize: int | None = None
    power_iters: int = 30
    power_tol: float = 1e-6

    def __post_init__(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError(f"rank must be a positive integer, got {self.rank}")
        if not self.max_epochs >= 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not self.term_tol >= 0:
            raise ValueError(f"term_tol must be >= 0, got {self.term_tol}")
        if int(self.threads) != self.threads or self.threads < 1:
            raise ValueError(f"threads must be a positive integer, got {self.threads}")
        if self.max_inner < 1:
            raise ValueError(f"max_inner must be >= 1, got {self.max_inner}")
        self.nmc_config()

    def nmc_config(self) -> nmc.NmcConfig:
        return nmc.NmcConfig(
            lam=self.lam, c=self.c, max_inner=self.max_inner,
            power_iters=self.power_iters, power_tol=self.power_tol, seed=self.seed,
        )

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: float
    objective: float
    rel_error: float
    wall_seconds: float
    entries_accessed: int


def epoch_account(entries_accessed: int, omega_size: int) -> float:
    """Entries accessed, in units of full passes over the observed set."""
    if omega_size <= 0:
        raise ValueError("omega_size must be positive")
    return entries_accessed / omega_size


def term_cond(history: list[MetricsRecord], cfg: AoConfig) -> bool:
    """Stop once the epoch budget is spent or the error has plateaued.

    A plateau is ``PLATEAU_SWEEPS`` consecutive sweeps whose relative-error
    change is below ``cfg.term_tol``; ``term_tol=0`` disables it.
    """
    if not history:
        raise ValueError("history is empty")
    if history[-1].epoch >= cfg.max_epochs:
        return True
    if cfg.term_tol <= 0 or len(history) <= PLATEAU_SWEEPS:
        return False
    errs = [r.rel_error for r in history[-(PLATEAU_SWEEPS + 1):]]
    return all(abs(b - a) < cfg.term_tol for a, b in zip(errs, errs[1:]))


def snr(masked_signal: SparseTensor, masked_noise: SparseTensor) -> float:
    """Ratio of squared Frobenius norms of signal and noise over the observed set."""
    if masked_signal.dims != masked_noise.dims or masked_signal.nnz != masked_noise.nnz:
        raise ValueError("signal and noise must share the same support")
    a, b = masked_signal.sorted(), masked_noise.sorted()
    if not np.array_equal(a.subs, b.subs):
        raise ValueError("signal and noise must share the same support")
    noise = float(b.vals @ b.vals)
    if noise == 0.0:
        raise ZeroDivisionError("noise norm is zero (infinite SNR)")
    return float(a.vals @ a.vals) / noise


def ao_ntc(tensor: SparseTensor, init: FactorSet, cfg: AoConfig,
           track_metrics: bool = True,
           callback: Callable[[FactorSet, MetricsRecord], None] | None = None):
    """Nonnegative tensor completion by cyclic per-mode ``s_nmc`` updates.

    Within a sweep, mode ``i`` sees the already updated factors of modes
    ``1..i-1`` and the previous sweep's factors of modes ``i+1..N``. A record
    is appended before the first sweep and after every sweep.

    Parameters
    ----------
    tensor : SparseTensor
        Observed entries.
    init : FactorSet
        Nonnegative starting factors; not modified.
    cfg : AoConfig
    track_metrics : bool
        Evaluate objective and relative error after each sweep. When False
        both are reported as NaN and the plateau test never fires.
    callback : callable, optional
        Called as ``callback(factors, record)`` after each record.

    Returns
    -------
    factors : FactorSet
    history : list of MetricsRecord
    """
    if init.dims != tensor.dims:
        raise ValueError(f"init dims {init.dims} do not match tensor dims {tensor.dims}")
    if init.rank != cfg.rank:
        raise ValueError(f"init rank {init.rank} does not match cfg.rank {cfg.rank}")
    if tensor.nnz == 0:
        raise ValueError("tensor has no observed entries")
    factors = init.copy()
    views = build_mode_views(tensor)
    ncfg = cfg.nmc_config()
    per_mode = [nmc.entries_accessed(v, cfg.c, cfg.max_inner) for v in views]
    if sum(per_mode) == 0:
        raise ValueError(f"c={cfg.c} samples no entries in any row; increase c")

    accessed = 0
    solver_seconds = 0.0
    history: list[MetricsRecord] = []

    def record():
        if track_metrics:
            obj = objective(tensor, factors, cfg.lam)
            err = relative_error(tensor, factors) if tensor.norm() > 0 else math.nan
            if not math.isfinite(obj):
                raise FloatingPointError(
                    f"objective became non-finite at epoch {epoch_account(accessed, tensor.nnz):.3f}"
                )
        else:
            obj = err = math.nan
        rec = MetricsRecord(
            epoch=epoch_account(accessed, tensor.nnz),
            objective=obj,
            rel_error=err,
            wall_seconds=solver_seconds,
            entries_accessed=accessed,
        )
        history.append(rec)
        if callback is not None:
            callback(factors, rec)

    record()
    sweep = 0
    while not term_cond(history, cfg):
        t0 = time.perf_counter()
        for i, view in enumerate(views):
            a, y = nmc.s_nmc(
                view, factors, i + 1, factors.factors[i], ncfg,
                stream=sweep * tensor.order + i, threads=cfg.threads,
                chunksize=cfg.chunksize, return_momentum=True,
            )
            factors.factors[i] = a
            factors.momentum[i] = y
            accessed += per_mode[i]
        solver_seconds += time.perf_counter() - t0
        sweep += 1
        record()
    return factors, history
