"""Opt-in registry of state-validity metrics for every steady state produced.

Solvers report (hermiticity error, trace error, minimum eigenvalue) for each
state they emit; while a ``collect()`` context is active the records
accumulate so a test suite can assert global physicality in one place.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

__all__ = ["ValidityRecord", "collect", "record_states", "state_metrics"]


@dataclass(frozen=True)
class ValidityRecord:
    tag: str
    herm_error: float
    trace_error: float
    min_eigenvalue: float


_COLLECTORS: list[list[ValidityRecord]] = []


@contextmanager
def collect():
    """Collect a ValidityRecord for every steady state solved in the block."""
    records: list[ValidityRecord] = []
    _COLLECTORS.append(records)
    try:
        yield records
    finally:
        _COLLECTORS.remove(records)


def state_metrics(rhos: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(herm_error, trace_error, min_eigenvalue) for states of shape (..., 8, 8).

    Eigenvalues are taken of the Hermitian part; the anti-Hermitian magnitude
    is reported separately as herm_error.
    """
    rhos = np.asarray(rhos)
    dag = rhos.conj().swapaxes(-1, -2)
    herm = np.abs(rhos - dag).max(axis=(-2, -1))
    trace = np.abs(np.einsum("...ii->...", rhos) - 1.0)
    eigs = np.linalg.eigvalsh((rhos + dag) / 2.0)
    return herm, trace, eigs.min(axis=-1)


def record_states(tag: str, rhos: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compute metrics and, if a collector is active, register them."""
    herm, trace, mineig = state_metrics(rhos)
    if _COLLECTORS:
        flat = np.broadcast_arrays(np.atleast_1d(herm), np.atleast_1d(trace), np.atleast_1d(mineig))
        for h, t, m in zip(*flat):
            rec = ValidityRecord(tag, float(h), float(t), float(m))
            for records in _COLLECTORS:
                records.append(rec)
    return herm, trace, mineig
