"""Shared test setup.

BLAS threading is pinned before numpy loads: the 2-thread OpenBLAS path is
slower than single-threaded for this package's small matrices, and pinning
makes runs bit-reproducible regardless of the host's core count.
"""

import os

os.environ.setdefault("MMOE_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ["MMOE_THREADS"])

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative error with a small floor so near-zero gradients compare at an
    effective absolute tolerance of tol * 1e-3."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float((np.abs(analytic - numeric) / denom).max())


def finite_diff_gradcheck(build_loss, leaves, h=1e-4, tol=1e-3):
    """Compare reverse-mode gradients of ``build_loss()`` (a scalar Tensor
    rebuilt on each call) against central finite differences on every leaf.

    Leaves must be float64 tensors with requires_grad set; the graph is
    reconstructed per evaluation because backward frees it.
    """
    loss = build_loss()
    for t in leaves:
        t.grad = None
    loss.backward()
    for t in leaves:
        assert t.grad is not None, "leaf did not receive a gradient"
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            down = float(build_loss().data)
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        err = max_rel_error(analytic, numeric.reshape(t.data.shape))
        assert err < tol, f"gradient mismatch {err:.2e} on leaf shape {t.data.shape}"
