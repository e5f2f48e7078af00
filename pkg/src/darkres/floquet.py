"""Recursive Floquet expansion for the three-laser time-averaged steady state.

With the ansatz rho(t) = sum_n rho_n e^{i n dbar t}, each harmonic obeys

    (L0 - i n dbar) rho_n + c L+ rho_{n-1} + c L- rho_{n+1} = 0,  c = Omega_rep/2,

which closes through the raising/lowering operators

    S+_{n-1} = -(L0 - i n dbar + c L- S+_n)^{-1} c L+      (S+_{nmax} = 0)
    S-_{n+1} = -(L0 - i n dbar + c L+ S-_n)^{-1} c L-      (S-_{-nmax} = 0)

and the time-averaged component solves
(L0 + c L- S0+ + c L+ S0-) rho_0 = 0 with unit trace.

Relative phase noise between the modulated tone and the static frame damps
the n-th harmonic at n^2 * harmonic_damping / 2, which is how the repumper
linewidth and the repumper-probe thermal broadening enter the model.

All chain functions broadcast over leading axes: L0 of shape (..., 64, 64)
with matching ``delta_bar`` arrays solves many grid points in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .atom import DEFAULT_SCHEME
from .liouville import DIM, LiouvillianSet, solve_steady_resolved, unvectorize
from .validity import record_states

__all__ = [
    "FloquetConfig",
    "AveragedState",
    "adaptive_nmax",
    "s_plus_chain",
    "s_minus_chain",
    "averaged_steady_state",
]

# |delta_bar| below this fraction of Gamma_DP is treated as degenerate
DEGENERATE_FRACTION = 1e-3


@dataclass(frozen=True)
class FloquetConfig:
    """Truncation and degeneracy policy for the harmonic expansion.

    ``n_max=None`` selects the order adaptively from Omega_rep/|dbar|.
    Below ``degenerate_delta`` (rad/s) the two D-P tones are treated as one
    static bichromatic field (coherent sum of the couplings).
    """

    n_max: int | None = None
    floor: int = 1
    cap: int = 12
    degenerate_delta: float = DEGENERATE_FRACTION * DEFAULT_SCHEME.gamma_dp

    def __post_init__(self):
        if self.n_max is not None and self.n_max < 1:
            raise ValueError("n_max must be >= 1")


@dataclass(frozen=True)
class AveragedState:
    """Time-averaged steady state rho_0 with solver diagnostics."""

    rho0: np.ndarray          # 8x8
    residual: float           # solver defect of the modified Liouvillian
    n_max: int                # truncation actually used (0 on bypass paths)
    drive_ratio: float        # Omega_rep / |delta_bar|
    degenerate: bool = False


def adaptive_nmax(omega_rep: float, delta_bar: float, floor: int = 1, cap: int = 12) -> int:
    """Truncation order max(floor, min(cap, ceil(Omega_rep/|dbar|) + 2))."""
    if delta_bar == 0.0:
        raise ValueError("delta_bar = 0 is the degenerate regime; no finite n_max applies")
    return max(floor, min(cap, ceil(omega_rep / abs(delta_bar)) + 2))


def _shifted(l0: np.ndarray, delta_bar, n: int, harmonic_damping) -> np.ndarray:
    """L0 - i n dbar - n^2 damping/2 on the diagonal (broadcasting)."""
    a = np.array(l0, dtype=complex, copy=True)
    shift = 1j * n * np.asarray(delta_bar, dtype=complex) + 0.5 * n * n * np.asarray(
        harmonic_damping, dtype=complex
    )
    idx = np.arange(DIM)
    a[..., idx, idx] -= shift[..., None] if np.ndim(shift) else shift
    return a


def _chain(l0, l_fwd, l_bwd, coupling, delta_bar, n_max, harmonic_damping, sign):
    """Shared recursion for both chains; sign=+1 gives S0+, sign=-1 gives S0-."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    s = None
    c_fwd = coupling * l_fwd
    c_bwd = coupling * l_bwd
    for k in range(n_max, 0, -1):
        a = _shifted(l0, delta_bar, sign * k, harmonic_damping)
        if s is not None:
            a = a + c_bwd @ s
        try:
            s = -np.linalg.solve(a, np.broadcast_to(c_fwd, a.shape))
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"singular chain inversion at harmonic n={sign * k}") from exc
    return s


def s_plus_chain(
    l0: np.ndarray,
    l_plus: np.ndarray,
    l_minus: np.ndarray,
    omega_rep: float,
    delta_bar,
    n_max: int,
    harmonic_damping=0.0,
) -> np.ndarray:
    """S0+ mapping rho_0 to the first upper harmonic rho_{+1}."""
    return _chain(l0, l_plus, l_minus, 0.5 * omega_rep, delta_bar, n_max, harmonic_damping, +1)


def s_minus_chain(
    l0: np.ndarray,
    l_plus: np.ndarray,
    l_minus: np.ndarray,
    omega_rep: float,
    delta_bar,
    n_max: int,
    harmonic_damping=0.0,
) -> np.ndarray:
    """S0- mapping rho_0 to the first lower harmonic rho_{-1}."""
    return _chain(l0, l_minus, l_plus, 0.5 * omega_rep, delta_bar, n_max, harmonic_damping, -1)


def averaged_kernel(
    l0: np.ndarray,
    l_plus: np.ndarray,
    l_minus: np.ndarray,
    omega_rep: float,
    delta_bar,
    n_max: int,
    harmonic_damping=0.0,
) -> np.ndarray:
    """Modified generator L0 + c L- S0+ + c L+ S0- (broadcasts like the chains)."""
    c = 0.5 * omega_rep
    s_plus = s_plus_chain(l0, l_plus, l_minus, omega_rep, delta_bar, n_max, harmonic_damping)
    s_minus = s_minus_chain(l0, l_plus, l_minus, omega_rep, delta_bar, n_max, harmonic_damping)
    return l0 + c * (l_minus @ s_plus) + c * (l_plus @ s_minus)


def averaged_steady_state(lset: LiouvillianSet, cfg: FloquetConfig | None = None) -> AveragedState:
    """Time-averaged steady state of a (possibly) modulated Liouvillian.

    Reduces exactly to the static steady state when Omega_rep = 0, and takes
    the degenerate (equal-frequency) path when |delta_bar| falls below the
    configured threshold.
    """
    cfg = cfg or FloquetConfig()
    if lset.omega_rep == 0.0:
        rho_vec, defect = solve_steady_resolved(lset.l0)
        rho = unvectorize(rho_vec)
        record_states("averaged_static", rho)
        return AveragedState(rho, defect, 0, 0.0)

    if abs(lset.delta_bar) < cfg.degenerate_delta:
        # both D-P tones at (numerically) equal frequency: one static field
        c = lset.coupling
        m = lset.l0 + c * (lset.l_plus + lset.l_minus)
        rho_vec, defect = solve_steady_resolved(m)
        rho = unvectorize(rho_vec)
        record_states("averaged_degenerate", rho)
        return AveragedState(rho, defect, 0, np.inf, degenerate=True)

    n_max = cfg.n_max or adaptive_nmax(lset.omega_rep, lset.delta_bar, cfg.floor, cfg.cap)
    kernel = averaged_kernel(
        lset.l0,
        lset.l_plus,
        lset.l_minus,
        lset.omega_rep,
        lset.delta_bar,
        n_max,
        lset.harmonic_damping,
    )
    rho_vec, defect = solve_steady_resolved(kernel)
    ratio = lset.omega_rep / abs(lset.delta_bar)
    rho = unvectorize(rho_vec)
    record_states("averaged_floquet", rho)
    return AveragedState(rho, defect, n_max, ratio)
