import os

# the worker pool size is fixed when numba is first imported; the
# thread-invariance tests need at least 4 workers even on small machines
os.environ.setdefault("NUMBA_NUM_THREADS", "4")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from sparse_ntc import FactorSet, SparseTensor  # noqa: E402

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {name}: {detail}")


def random_tensor(rng, dims, density=0.5, rank=None):
    """Random support; values from a random nonnegative CPD when ``rank`` is given."""
    mask = rng.random(dims) < density
    subs = np.argwhere(mask)
    if rank is None:
        vals = rng.random(subs.shape[0])
    else:
        dense = FactorSet([rng.random((d, rank)) for d in dims]).full()
        vals = dense[tuple(subs.T)]
    return SparseTensor(subs, vals, dims)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
