"""Tensor I/O, synthetic low-rank data and the RGB image demo.

``.tns`` files hold one observed entry per line: N 1-based integer indices
then the value, whitespace separated. Lines starting with ``#`` are comments;
a comment of the form ``# dims: I1 I2 ... IN`` declares the shape.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import FactorSet, SparseTensor, model_values

_DIMS_RE = re.compile(r"^#\s*dims\s*:\s*(.*)$", re.IGNORECASE)


class TnsFormatError(ValueError):
    pass


def _parse_line(line: str, lineno: int, order: int | None):
    parts = line.split()
    if order is not None and len(parts) != order + 1:
        raise TnsFormatError(f"line {lineno}: expected {order + 1} fields, got {len(parts)}")
    if len(parts) < 3:
        raise TnsFormatError(f"line {lineno}: need at least 2 indices and a value")
    try:
        idx = [int(p) for p in parts[:-1]]
        val = float(parts[-1])
    except ValueError:
        raise TnsFormatError(f"line {lineno}: cannot parse {line.strip()!r}") from None
    if any(i < 1 for i in idx):
        raise TnsFormatError(f"line {lineno}: indices are 1-based, got {idx}")
    if not math.isfinite(val):
        raise TnsFormatError(f"line {lineno}: non-finite value {parts[-1]}")
    if val < 0:
        raise TnsFormatError(f"line {lineno}: negative value {val}")
    return idx, val


def read_tns(path) -> SparseTensor:
    """Read a ``.tns`` file. Duplicate indices are an error."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    dims = None
    idx_rows, vals = [], []
    order = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                m = _DIMS_RE.match(s)
                if m:
                    try:
                        dims = tuple(int(d) for d in m.group(1).split())
                    except ValueError:
                        raise TnsFormatError(f"line {lineno}: bad dims header {s!r}") from None
                continue
            idx, val = _parse_line(s, lineno, order)
            order = len(idx)
            idx_rows.append(idx)
            vals.append(val)
    if not idx_rows:
        if dims is None:
            raise TnsFormatError(f"{path}: no entries and no '# dims:' header")
        return SparseTensor(np.empty((0, len(dims)), np.int64), np.empty(0), dims)
    subs = np.asarray(idx_rows, dtype=np.int64) - 1
    if dims is None:
        dims = tuple(int(m) + 1 for m in subs.max(axis=0))
    elif len(dims) != subs.shape[1]:
        raise TnsFormatError(f"{path}: header declares {len(dims)} modes, entries have {subs.shape[1]}")
    return SparseTensor(subs, np.asarray(vals), dims)


def write_tns(tensor: SparseTensor, path) -> None:
    """Write entries in lexicographic order after a ``# dims:`` header."""
    t = tensor.sorted()
    with open(path, "w") as fh:
        fh.write("# dims: " + " ".join(str(d) for d in t.dims) + "\n")
        chunk = 1 << 16
        for start in range(0, t.nnz, chunk):
            subs = t.subs[start:start + chunk] + 1
            vals = t.vals[start:start + chunk]
            fh.write("".join(
                " ".join(map(str, s)) + " " + repr(v) + "\n"
                for s, v in zip(subs.tolist(), vals.tolist())
            ))


def write_factors(factors: FactorSet, directory, prefix: str = "factor") -> list[Path]:
    """One dense text matrix per mode: ``<prefix>_<mode>.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, f in enumerate(factors.factors, 1):
        p = directory / f"{prefix}_{n}.txt"
        with open(p, "w") as fh:
            fh.write(f"# shape: {f.shape[0]} {f.shape[1]}\n")
            for row in f.tolist():
                fh.write(" ".join(repr(v) for v in row) + "\n")
        paths.append(p)
    return paths


def read_factors(directory, order: int, prefix: str = "factor") -> FactorSet:
    mats = []
    for n in range(1, order + 1):
        p = Path(directory) / f"{prefix}_{n}.txt"
        mats.append(np.atleast_2d(np.loadtxt(p, comments="#", ndmin=2)))
    return FactorSet(mats)


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Low-rank nonnegative tensor with Gaussian noise on a random support.

    Give exactly one of ``density`` (Bernoulli probability per cell) or
    ``pattern_from`` (a ``.tns`` path or tensor whose support is reused).
    ``target_snr`` replaces ``noise_sigma`` by a level calibrated on the
    realized masked signal.
    """

    dims: tuple[int, ...]
    rank: int
    noise_sigma: float = 0.0
    density: float | None = None
    pattern_from: object = None
    seed: int = 0
    target_snr: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be >= 2 positive integers, got {self.dims}")
        if self.rank < 1:
            raise ValueError(f"rank must be positive, got {self.rank}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if (self.density is None) == (self.pattern_from is None):
            raise ValueError("give exactly one of density or pattern_from")
        if self.density is not None and not 0 < self.density <= 1:
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if self.target_snr is not None:
            if not self.target_snr > 0:
                raise ValueError(f"target_snr must be positive, got {self.target_snr}")
            if self.noise_sigma:
                raise ValueError("give at most one of noise_sigma and target_snr")


class SynthResult(NamedTuple):
    observed: SparseTensor
    truth: FactorSet
    snr: float
    n_clamped: int
    noise_sigma: float


def noise_sigma_for_snr(rank: int, order: int, target_snr: float) -> float:
    """Noise level giving an expected SNR of ``target_snr`` for Uniform[0, 1] factors.

    A cell of the model is a sum of ``rank`` products of ``order`` independent
    uniforms, so its second moment is ``R/3^N + R(R-1)/4^N``.
    """
    power = rank / 3.0 ** order + rank * (rank - 1) / 4.0 ** order
    return math.sqrt(power / target_snr)


def random_support(dims: Sequence[int], density: float, rng) -> np.ndarray:
    """Sorted 0-based subs of a Bernoulli(density) mask, without a dense mask."""
    total = math.prod(dims)
    nnz = int(rng.binomial(total, density))
    if nnz == 0:
        raise ValueError(f"density {density} observed no cells of a {tuple(dims)} tensor")
    lin = np.sort(rng.choice(total, size=nnz, replace=False, shuffle=False))
    return np.stack(np.unravel_index(lin, tuple(dims)), axis=1).astype(np.int64)


def synth_generate(spec: SynthSpec) -> SynthResult:
    """Observed tensor ``M * (X0 + E)`` with values clamped at zero.

    The reported SNR uses the drawn noise before clamping; ``n_clamped``
    counts cells whose noisy value was negative.
    """
    rng = np.random.default_rng(spec.seed)
    truth = FactorSet([rng.random((d, spec.rank)) for d in spec.dims])
    if spec.pattern_from is not None:
        src = spec.pattern_from
        if not isinstance(src, SparseTensor):
            src = read_tns(src)
        if src.dims != spec.dims:
            raise ValueError(f"pattern tensor dims {src.dims} differ from {spec.dims}")
        if src.nnz == 0:
            raise ValueError("pattern tensor has no entries")
        subs = src.sorted().subs.copy()
    else:
        subs = random_support(spec.dims, spec.density, rng)
    clean = model_values(truth, subs)
    sigma = spec.noise_sigma
    if spec.target_snr is not None:
        sigma = math.sqrt(float(clean @ clean) / clean.shape[0] / spec.target_snr)
    noise = rng.normal(0.0, sigma, size=clean.shape[0]) if sigma > 0 else np.zeros_like(clean)
    noisy = clean + noise
    n_clamped = int((noisy < 0).sum())
    observed = SparseTensor(subs, np.maximum(noisy, 0.0), spec.dims)
    noise_power = float(noise @ noise)
    achieved = math.inf if noise_power == 0 else float(clean @ clean) / noise_power
    return SynthResult(observed, truth, achieved, n_clamped, sigma)


# -- images -------------------------------------------------------------------


class ImageFormatError(ValueError):
    pass


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) as a ``(height, width, 3)`` uint8 array."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ImageFormatError(f"{path}: only binary PPM (P6) is supported")
    tokens, pos = _ppm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported, need 255")
    raster = data[pos:pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise ImageFormatError(f"{path}: raster truncated")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(pixels: np.ndarray, path) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected a (height, width, 3) array, got {pixels.shape}")
    img = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def image_to_tensor(path) -> SparseTensor:
    """Every pixel channel becomes an observed entry, zeros included."""
    img = read_ppm(path)
    subs = np.indices(img.shape).reshape(3, -1).T
    return SparseTensor(subs, img.reshape(-1).astype(np.float64), img.shape)


def tensor_to_pixels(tensor: SparseTensor) -> np.ndarray:
    if tensor.order != 3 or tensor.dims[2] != 3:
        raise ValueError(f"expected a height x width x 3 tensor, got {tensor.dims}")
    dense = np.zeros(tensor.dims)
    dense[tuple(tensor.subs.T)] = tensor.vals
    return np.clip(np.rint(dense), 0, 255).astype(np.uint8)


def tensor_to_image(tensor: SparseTensor, path) -> None:
    """Write observed entries as an image; unobserved channels are black."""
    write_ppm(tensor_to_pixels(tensor), path)


def factors_to_image(factors: FactorSet, path) -> None:
    """Write the dense model reconstruction, clamped to [0, 255] and rounded."""
    if factors.order != 3 or factors.dims[2] != 3:
        raise ValueError(f"expected height x width x 3 factors, got {factors.dims}")
    write_ppm(np.clip(factors.full(), 0, 255), path)


def corrupt(tensor: SparseTensor, keep_fraction: float, seed=None) -> SparseTensor:
    """Keep a random ``keep_fraction`` of pixel positions with all their channels.

    A pixel position is every index but the last. Positions are taken from
    the front of a seeded permutation, so smaller fractions with the same seed
    keep a subset of the larger ones.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    pos_dims = tensor.dims[:-1]
    n_pos = math.prod(pos_dims)
    n_keep = max(1, int(round(keep_fraction * n_pos)))
    perm = np.random.default_rng(seed).permutation(n_pos)
    kept = np.zeros(n_pos, dtype=bool)
    kept[perm[:n_keep]] = True
    lin = np.ravel_multi_index(tuple(tensor.subs[:, :-1].T), pos_dims) if tensor.nnz else np.empty(0, np.int64)
    mask = kept[lin]
    return SparseTensor(tensor.subs[mask], tensor.vals[mask], tensor.dims)
