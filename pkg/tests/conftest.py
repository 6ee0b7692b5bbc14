"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from metapc.forward import EnsembleMoments, run_forward_batch
from metapc.inference import TaskMode, compute_errors_batch, energy_batch
from metapc.sas import EnsembleNetwork, SaSLayer


def make_random_ensemble(
    rng: np.random.Generator,
    n_in: int,
    n: int,
    n_out: int,
    pi_range=(0.1, 0.8),
    xi_range=(0.02, 1.0),
) -> EnsembleNetwork:
    """Well-conditioned random hyperparameters, away from the domain edges."""

    def layer(post, pre):
        return SaSLayer(
            pi=rng.uniform(*pi_range, (post, pre)),
            m=rng.standard_normal((post, pre)),
            xi=rng.uniform(*xi_range, (post, pre)),
            fan_in=pre,
        )

    return EnsembleNetwork(layer(n, n_in), layer(n, n), layer(n_out, n))


def make_targets(rng, t, n_out, mode: TaskMode, batch: int = 1) -> np.ndarray:
    if mode is TaskMode.PER_STEP:
        out = np.zeros((batch, t - 1, n_out))
        for b in range(batch):
            out[b, np.arange(t - 1), rng.integers(0, n_out, t - 1)] = 1.0
        return out
    out = np.zeros((batch, n_out))
    out[np.arange(batch), rng.integers(0, n_out, batch)] = 1.0
    return out


def total_energy(ens, r, x, eps1, eps2, targets, mode) -> float:
    """Energy recomputed from scratch; the quantity the gradients must match."""
    mom = EnsembleMoments.of(ens)
    trace = run_forward_batch(mom, r, x, eps1, eps2)
    err_state, _ = compute_errors_batch(r, trace, targets, mode)
    return float(energy_batch(err_state, trace.y, targets, mode)[0])


def fd_gradient(f, arr: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of a scalar function over every array entry."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def assert_rel_close(analytic: np.ndarray, reference: np.ndarray, rel: float):
    """Relative comparison with a floor tied to the gradient scale.

    Central differences of an energy F resolve entries down to roughly
    eps * F / h; entries far below the matrix's own scale are compared
    against that floor instead of their own magnitude.
    """
    floor = 1e-6 * (1.0 + np.abs(reference).max())
    err = np.abs(analytic - reference) / (np.abs(reference) + floor)
    assert err.max() < rel, f"max relative error {err.max():.3e} exceeds {rel}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
