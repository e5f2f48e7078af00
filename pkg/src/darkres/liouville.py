"""Vectorized master equation: L0, L+-, exact steady states, ODE integration.

The density matrix is flattened row-major,
rho_vec = (rho_11, rho_12, ..., rho_18, rho_21, ..., rho_88), so that
superoperators act as 64x64 matrices.  All builders follow the index rule

    L[8(r-1)+s, 8(k-1)+j] = -(i/hbar) (H_{r,k} d_{j,s} - H_{j,s} d_{r,k})

for the commutator part (d = Kronecker delta), which in matrix form is
-i (kron(H, I) - kron(I, H^T)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .atom import (
    DEFAULT_SCHEME,
    Environment,
    LaserField,
    LevelScheme,
    N_STATES,
    build_H0,
    build_collapse_operators,
    coupling_matrix,
    relative_linewidth,
)
from .validity import record_states

__all__ = [
    "DIM",
    "vectorize",
    "unvectorize",
    "build_L0",
    "build_L_pm",
    "LiouvillianSet",
    "build_liouvillian_set",
    "solve_steady",
    "steady_state_from_mixed",
    "solve_steady_resolved",
    "steady_state_two_laser",
    "time_evolve",
    "period_averaged_state",
    "SteadyStateError",
]

DIM = N_STATES * N_STATES  # 64

_ID = np.eye(N_STATES)
_TRACE_ROW = np.zeros(DIM)
_TRACE_ROW[:: N_STATES + 1] = 1.0

# tolerance on the defect (scaled residual / physicality) of a steady-state solve
RESIDUAL_TOL = 1e-10

# eigenvalues of the scaled generator at most this large count as kernel modes;
# true zeros sit at the 1e-15 roundoff floor while the slowest physical decay
# rates stay many orders above this, so the split is unambiguous
KERNEL_EIG_TOL = 1e-12


class SteadyStateError(RuntimeError):
    """Steady-state solve failed (singular system or residual too large)."""


def vectorize(rho: np.ndarray) -> np.ndarray:
    """Flatten an 8x8 density matrix row-major into 64 components."""
    return np.asarray(rho, dtype=complex).reshape(DIM)


def unvectorize(vec: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    return np.asarray(vec, dtype=complex).reshape(N_STATES, N_STATES)


def _commutator_superop(h: np.ndarray) -> np.ndarray:
    return -1j * (np.kron(h, _ID) - np.kron(_ID, h.T))


def build_L0(h0: np.ndarray, collapse_ops: Sequence[np.ndarray]) -> np.ndarray:
    """Liouvillian of -i[H0, rho] + sum_k D[C_k] rho as a 64x64 matrix."""
    if h0.shape != (N_STATES, N_STATES):
        raise ValueError("H0 must be 8x8")
    l0 = _commutator_superop(h0)
    for c in collapse_ops:
        if c.shape != (N_STATES, N_STATES):
            raise ValueError("collapse operators must be 8x8")
        cdc = c.conj().T @ c
        l0 += (
            np.kron(c, c.conj())
            - 0.5 * np.kron(cdc, _ID)
            - 0.5 * np.kron(_ID, cdc.T)
        )
    return l0


def build_L_pm(h_plus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Modulation superoperators (L_plus, L_minus) from the 8x8 block H_plus.

    L_minus is the same construction applied to H_plus^dagger, so the pair
    always satisfies the adjoint condition by construction.
    """
    if h_plus.shape != (N_STATES, N_STATES):
        raise ValueError("H_plus must be 8x8")
    return _commutator_superop(h_plus), _commutator_superop(h_plus.conj().T)


@dataclass(frozen=True)
class LiouvillianSet:
    """L0, L+-, and the modulation parameters of the three-laser problem.

    ``harmonic_damping`` is the effective linewidth of the modulated
    (repumper) tone relative to the probe frame; it damps the n-th Floquet
    harmonic at n^2 * harmonic_damping / 2.
    """

    l0: np.ndarray
    l_plus: np.ndarray
    l_minus: np.ndarray
    delta_bar: float          # rad/s, Delta_rep - Delta_pr
    omega_rep: float          # rad/s
    harmonic_damping: float = 0.0

    @property
    def coupling(self) -> float:
        """Drive strength c = Omega_rep / 2 multiplying L+-."""
        return 0.5 * self.omega_rep


def build_liouvillian_set(
    dop: LaserField,
    pr: LaserField,
    rep: LaserField | None,
    env: Environment,
    scheme: LevelScheme = DEFAULT_SCHEME,
) -> LiouvillianSet:
    """Assemble the full Liouvillian set for a two- or three-laser system."""
    h0 = build_H0(dop, pr, env, scheme)
    l0 = build_L0(h0, build_collapse_operators([dop, pr], env, scheme))
    if rep is None:
        zero = np.zeros((DIM, DIM), dtype=complex)
        return LiouvillianSet(l0, zero, zero, 0.0, 0.0, 0.0)
    if rep.transition != "D-P":
        raise ValueError("repumper must address the D-P transition")
    h_plus = coupling_matrix("D-P", rep.polarization)
    l_plus, l_minus = build_L_pm(h_plus)
    return LiouvillianSet(
        l0=l0,
        l_plus=l_plus,
        l_minus=l_minus,
        delta_bar=rep.detuning - pr.detuning,
        omega_rep=rep.rabi_frequency(scheme),
        harmonic_damping=relative_linewidth(rep, pr, env, scheme),
    )


def _physicality_defect(rho_vec: np.ndarray) -> np.ndarray:
    """Worst of hermiticity deviation and negativity for (..., 64) candidates.

    A valid steady state is a density matrix, so any hermiticity deviation or
    negative eigenvalue measures how far a solver output is from one.  Points
    with non-finite entries score infinity.
    """
    r = rho_vec.reshape(rho_vec.shape[:-1] + (N_STATES, N_STATES))
    herm = np.abs(r - r.conj().swapaxes(-1, -2)).max(axis=(-2, -1))
    h = 0.5 * (r + r.conj().swapaxes(-1, -2))
    finite = np.isfinite(h).all(axis=(-2, -1))
    h = np.where(finite[..., None, None], h, np.eye(N_STATES))
    negativity = np.maximum(0.0, -np.linalg.eigvalsh(h).min(axis=-1))
    return np.where(finite, np.maximum(herm, negativity), np.inf)


def solve_steady(matrices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Null vector(s) with unit trace of one or many 64x64 generators.

    ``matrices`` has shape (..., 64, 64).  Row 0 of each system is replaced
    by the trace constraint and the system is scaled by its largest entry
    before the LU solve.  The returned defect is the worst of the scaled
    residual ||M rho||_inf, the hermiticity deviation and the negativity of
    the candidate: a generator with more than one steady state (e.g. a
    sublevel no field couples to) keeps a small residual on an arbitrary --
    generally unphysical -- kernel vector, which only the physicality terms
    expose.
    """
    m = np.asarray(matrices, dtype=complex)
    scale = np.abs(m).max(axis=(-2, -1), keepdims=True)
    scale = np.where(scale > 0, scale, 1.0)
    ms = m / scale
    a = ms.copy()
    a[..., 0, :] = _TRACE_ROW
    b = np.zeros(m.shape[:-1], dtype=complex)
    b[..., 0] = 1.0
    try:
        rho = np.linalg.solve(a, b[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SteadyStateError(f"steady-state system is singular: {exc}") from exc
    residual = np.abs(np.einsum("...ij,...j->...i", ms, rho)).max(axis=-1)
    return rho, np.maximum(residual, _physicality_defect(rho))


def steady_state_from_mixed(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Steady state reached from the maximally mixed state, via the kernel projector.

    When a generator has several independent steady states (kernel dimension
    above one, e.g. sublevels the fields cannot excite), the trace-constrained
    LU route of :func:`solve_steady` returns an arbitrary kernel vector that
    is generally not a density matrix.  The long-time limit is then
    initial-state dependent; this routine returns the one reached from the
    maximally mixed state -- the spectral projection of I/8 onto the kernel
    along the decaying modes -- which is what the dissipative dynamics
    prepares from an unpolarized ion.  Returns ``(rho_vec, defect)`` like
    :func:`solve_steady`; the defect is infinite when no kernel mode is found
    or the kernel is not diagonalizable to working precision.
    """
    m = np.asarray(matrix, dtype=complex)
    if m.shape != (DIM, DIM):
        raise ValueError("expected a single 64x64 generator")
    scale = float(np.abs(m).max())
    ms = m / (scale if scale > 0.0 else 1.0)
    failed = np.full(DIM, np.nan, dtype=complex)
    w_right, v_right = np.linalg.eig(ms)
    right = v_right[:, np.abs(w_right) < KERNEL_EIG_TOL]
    w_left, v_left = np.linalg.eig(ms.conj().T)
    left = v_left[:, np.abs(w_left) < KERNEL_EIG_TOL]
    if right.shape[1] == 0 or right.shape[1] != left.shape[1]:
        return failed, np.inf
    overlap = left.conj().T @ right
    if np.linalg.cond(overlap) > 1e8:
        # a defective kernel: the spectral projector does not exist
        return failed, np.inf
    mixed = vectorize(_ID / N_STATES)
    rho = unvectorize(right @ np.linalg.solve(overlap, left.conj().T @ mixed))
    rho = 0.5 * (rho + rho.conj().T)
    trace = float(rho.trace().real)
    if not np.isfinite(trace) or abs(trace) < 1e-6:
        return failed, np.inf
    rho_vec = vectorize(rho / trace)
    residual = float(np.abs(ms @ rho_vec).max())
    return rho_vec, float(np.maximum(residual, _physicality_defect(rho_vec)))


def solve_steady_resolved(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Steady state of one generator, resolving degenerate kernels.

    Takes the trace-constrained LU route first and falls back to
    :func:`steady_state_from_mixed` when that result is not a physical state.
    Raises :class:`SteadyStateError` when neither route produces one.
    """
    rho_vec, defect = solve_steady(matrix)
    if not np.isfinite(rho_vec).all() or defect > RESIDUAL_TOL:
        rho_vec, defect = steady_state_from_mixed(matrix)
    if not np.isfinite(rho_vec).all() or defect > RESIDUAL_TOL:
        raise SteadyStateError(
            f"steady-state defect {float(defect):.3e} exceeds {RESIDUAL_TOL:.0e}"
        )
    return rho_vec, float(defect)


def steady_state_two_laser(l0: np.ndarray) -> np.ndarray:
    """Exact steady state of a single static Liouvillian, as an 8x8 matrix.

    A degenerate kernel (more than one steady state, e.g. a pure-pi D-P beam
    that leaves both stretch D sublevels dark) is resolved as the state
    reached from the maximally mixed state.  Raises :class:`SteadyStateError`
    if no physical solution is found within ``RESIDUAL_TOL``.
    """
    rho_vec, _ = solve_steady_resolved(l0)
    rho = unvectorize(rho_vec)
    record_states("two_laser", rho)
    return rho


def _rhs_factory(lset: LiouvillianSet):
    l0 = lset.l0
    c = lset.coupling
    lp, lm = lset.l_plus, lset.l_minus
    delta_bar = lset.delta_bar
    if c == 0.0:

        def rhs(_t, y):
            v = y.view(complex)
            return (l0 @ v).view(float)

    else:

        def rhs(t, y):
            v = y.view(complex)
            phase = np.exp(1j * delta_bar * t)
            dv = l0 @ v + (c * phase) * (lp @ v) + (c / phase) * (lm @ v)
            return dv.view(float)

    return rhs


def time_evolve(
    rho0: np.ndarray,
    lset: LiouvillianSet,
    t_span: tuple[float, float],
    t_eval: np.ndarray | None = None,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate d rho_vec/dt = [L0 + c(L+ e^{i dbar t} + L- e^{-i dbar t})] rho_vec.

    The complex state is integrated as 128 real components with an adaptive
    high-order Runge-Kutta scheme.  Returns (times, rhos) with rhos of shape
    (n_times, 8, 8).
    """
    y0 = vectorize(rho0).view(float).copy()
    sol = solve_ivp(
        _rhs_factory(lset),
        t_span,
        y0,
        method="DOP853",
        t_eval=t_eval,
        rtol=rtol,
        atol=atol,
        dense_output=False,
    )
    if not sol.success:
        raise RuntimeError(f"time integration failed: {sol.message}")
    rhos = sol.y.T.copy().view(complex).reshape(-1, N_STATES, N_STATES)
    return sol.t, rhos


def period_averaged_state(
    lset: LiouvillianSet,
    rho0: np.ndarray | None = None,
    settle_periods: int = 20,
    block_periods: int = 5,
    max_blocks: int = 28,
    samples_per_period: int = 64,
    block_tol: float = 1e-6,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    max_block_periods: int = 2048,
) -> np.ndarray:
    """Long-time period average of the driven master equation (ODE route).

    Integrates past a transient and then averages rho(t) over blocks of
    drive periods until two successive block averages agree elementwise to
    ``block_tol``.  Block length doubles after every comparison (up to
    ``max_block_periods``): once a block spans a few relaxation times the
    residual transient decays by a large factor per block, so the stopping
    test is honest even when the slowest relaxation covers many drive
    periods.  Periodic trapezoid averaging over an exact period is
    spectrally accurate.  This is deliberately independent of the Floquet
    recursion so the two routes can be cross-checked; ``rho0`` only moves
    the starting point, never the attractor.
    """
    if lset.omega_rep != 0.0 and lset.delta_bar == 0.0:
        raise ValueError("period averaging needs a finite modulation frequency")
    if rho0 is None:
        rho0 = steady_state_two_laser(lset.l0)
    if lset.omega_rep == 0.0:
        # undriven: relax to the fixed point of L0 in chunks until static.
        # The first chunk spans ~thousands of P lifetimes and doubles on every
        # retry because the slowest modes (optical pumping) can be far slower
        # than the decay rates on the diagonal.
        chunk0 = 4000.0 / np.abs(np.diag(lset.l0).real).max()
        chunk = chunk0
        rho, t = np.asarray(rho0, dtype=complex), 0.0
        for _ in range(max_blocks):
            _, rhos = time_evolve(rho, lset, (t, t + chunk), rtol=rtol, atol=atol)
            drift = np.abs(rhos[-1] - rho).max()
            rho, t = rhos[-1], t + chunk
            if drift < block_tol:
                return rho
            chunk = min(2.0 * chunk, 64.0 * chunk0)
        raise RuntimeError(f"relaxation did not settle to {block_tol:g}")
    period = 2.0 * math.pi / abs(lset.delta_bar)

    def evolve(rho_in, t0, n_periods, want_mean):
        ts = None
        if want_mean:
            # thin the sampling on long blocks; an integer number of uniform
            # samples per period keeps the periodic trapezoid rule exact
            spp = max(8, min(samples_per_period, 16384 // n_periods))
            ts = t0 + np.linspace(0.0, n_periods * period, spp * n_periods + 1)
        times, rhos = time_evolve(
            rho_in, lset, (t0, t0 + n_periods * period), t_eval=ts, rtol=rtol, atol=atol
        )
        if not want_mean:
            return times[-1], rhos[-1], None
        # trapezoid over an integer number of periods = uniform mean with
        # endpoints half-weighted
        mean = (rhos[0] + rhos[-1]) / 2.0 + rhos[1:-1].sum(axis=0)
        mean /= len(rhos) - 1
        return times[-1], rhos[-1], mean

    t, rho, _ = evolve(rho0, 0.0, settle_periods, False)
    prev_mean = None
    block = block_periods
    for _ in range(max_blocks):
        t, rho, mean = evolve(rho, t, block, True)
        if prev_mean is not None and np.abs(mean - prev_mean).max() < block_tol:
            # the later block is both longer and further past the transient
            return mean
        prev_mean = mean
        block = min(2 * block, max_block_periods)
    raise RuntimeError(
        f"period average did not settle to {block_tol:g} within "
        f"{t / period:.0f} drive periods"
    )
