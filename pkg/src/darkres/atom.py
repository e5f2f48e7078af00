"""Physical operators for the eight-level Ca+ S1/2 - P1/2 - D3/2 system.

Basis ordering (fixed throughout the package):

    |1>,|2> = S1/2 (m = -1/2, +1/2)
    |3>,|4> = P1/2 (m = -1/2, +1/2)
    |5>..|8> = D3/2 (m = -3/2, -1/2, +1/2, +3/2)

Internally every rate, detuning and Rabi frequency is angular (rad/s);
the config layer converts from MHz / gauss once at parse time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
from scipy import constants as _const

__all__ = [
    "N_STATES",
    "S_STATES",
    "P_STATES",
    "D_STATES",
    "M_J",
    "GAUGE",
    "LevelScheme",
    "Polarization",
    "LaserField",
    "Environment",
    "zeeman_shifts",
    "coupling_basis_matrices",
    "coupling_matrix",
    "build_H0",
    "build_collapse_operators",
    "doppler_dephasing_rate",
    "relative_linewidth",
]

N_STATES = 8
S_STATES = (0, 1)
P_STATES = (2, 3)
D_STATES = (4, 5, 6, 7)

# magnetic quantum number of each basis state, in basis order
M_J = np.array([-0.5, 0.5, -0.5, 0.5, -1.5, -0.5, 0.5, 1.5])

# Bohr magneton over hbar, rad/s per gauss (1 G = 1e-4 T)
MU_B_OVER_HBAR = _const.physical_constants["Bohr magneton"][0] / _const.hbar * 1e-4

K_B = _const.k

# Fixed diagonal gauge: rephasing |5> -> -|5> makes the dipole blocks built
# from Condon-Shortley Clebsch-Gordan coefficients come out with the sign
# pattern used everywhere else in this package (see coupling_matrix).  It is
# a diagonal unitary, so applying it uniformly to every operator leaves all
# physics unchanged.
GAUGE = np.array([1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0])

_SQ2 = math.sqrt(2.0)
_SQ3 = math.sqrt(3.0)
_SQ6 = math.sqrt(6.0)

# Clebsch-Gordan amplitudes <J_l m_l; 1 q | 1/2 m_p> for the lowering blocks
# |lower><upper|, as (lower index, upper index, q, coefficient).
# S1/2 <- P1/2 channels:
_CG_SP = (
    (0, 2, 0, -1.0 / _SQ3),
    (1, 3, 0, +1.0 / _SQ3),
    (0, 3, +1, -math.sqrt(2.0 / 3.0)),
    (1, 2, -1, +math.sqrt(2.0 / 3.0)),
)
# D3/2 <- P1/2 channels:
_CG_DP = (
    (4, 2, +1, 1.0 / _SQ2),
    (5, 2, 0, -1.0 / _SQ3),
    (5, 3, +1, 1.0 / _SQ6),
    (6, 2, -1, 1.0 / _SQ6),
    (6, 3, 0, -1.0 / _SQ3),
    (7, 3, -1, 1.0 / _SQ2),
)

_CG_TABLES = {"S-P": _CG_SP, "D-P": _CG_DP}


@dataclass(frozen=True)
class LevelScheme:
    """Static atomic structure: g-factors, wavelengths, mass, P lifetime."""

    g_s: float = 2.0023
    g_p: float = 2.0 / 3.0
    g_d: float = 0.7994
    lambda_sp: float = 397e-9          # m
    lambda_dp: float = 866e-9          # m
    mass: float = 39.9626 * _const.atomic_mass  # kg, 40Ca+
    tau_p: float = 6.9e-9              # s, P1/2 lifetime
    branching_sp: float = 0.9347       # P -> S branching fraction

    @property
    def gamma_sp(self) -> float:
        """Partial decay rate P -> S (rad/s)."""
        return self.branching_sp / self.tau_p

    @property
    def gamma_dp(self) -> float:
        """Partial decay rate P -> D (rad/s)."""
        return (1.0 - self.branching_sp) / self.tau_p

    @property
    def g_factors(self) -> np.ndarray:
        """Per-state Lande factor, in basis order."""
        return np.array([self.g_s] * 2 + [self.g_p] * 2 + [self.g_d] * 4)

    def transition_rate(self, transition: str) -> float:
        if transition == "S-P":
            return self.gamma_sp
        if transition == "D-P":
            return self.gamma_dp
        raise ValueError(f"unknown transition {transition!r}")

    def wavelength(self, transition: str) -> float:
        if transition == "S-P":
            return self.lambda_sp
        if transition == "D-P":
            return self.lambda_dp
        raise ValueError(f"unknown transition {transition!r}")


DEFAULT_SCHEME = LevelScheme()


@dataclass(frozen=True)
class Polarization:
    """Laser polarization w.r.t. the quantization axis (B direction).

    For linear polarization, ``theta`` is the polar angle between the
    polarization vector and B, and ``phi`` the azimuth.  ``amplitudes``
    optionally overrides with a general unit-norm spherical triple
    (a_minus, a_zero, a_plus).
    """

    theta: float = 0.0
    phi: float = 0.0
    amplitudes: Tuple[complex, complex, complex] | None = None

    def __post_init__(self):
        if self.amplitudes is not None:
            norm = math.sqrt(sum(abs(a) ** 2 for a in self.amplitudes))
            if abs(norm - 1.0) > 1e-9:
                raise ValueError(f"polarization amplitudes must have unit norm, got {norm}")

    def spherical(self) -> Tuple[complex, complex, complex]:
        """Spherical components (a_minus, a_zero, a_plus) of the unit vector."""
        if self.amplitudes is not None:
            return tuple(self.amplitudes)
        st, ct = math.sin(self.theta), math.cos(self.theta)
        ph = complex(math.cos(self.phi), math.sin(self.phi))
        return (st * ph.conjugate() / _SQ2, complex(ct), -st * ph / _SQ2)

    @classmethod
    def pi(cls) -> "Polarization":
        """Linear polarization parallel to B."""
        return cls(theta=0.0)

    @classmethod
    def sigma_pm(cls, phi: float = 0.0) -> "Polarization":
        """Linear polarization orthogonal to B (equal sigma+ / sigma- mix)."""
        return cls(theta=math.pi / 2.0, phi=phi)

    @classmethod
    def linear(cls, alpha_deg: float, phi_deg: float = 0.0) -> "Polarization":
        """Linear polarization at ``alpha_deg`` degrees from B."""
        return cls(theta=math.radians(alpha_deg), phi=math.radians(phi_deg))


@dataclass(frozen=True)
class LaserField:
    """One laser beam addressing either the S-P or the D-P transition."""

    transition: str                    # 'S-P' or 'D-P'
    saturation: float                  # dimensionless S = I / I_sat
    detuning: float                    # rad/s, omega_laser - omega_atom
    polarization: Polarization = field(default_factory=Polarization.sigma_pm)
    linewidth: float = 0.0             # rad/s
    k_hat: Tuple[float, float, float] = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if self.transition not in ("S-P", "D-P"):
            raise ValueError(f"unknown transition {self.transition!r}")
        if self.saturation < 0:
            raise ValueError("saturation must be >= 0")
        if self.linewidth < 0:
            raise ValueError("laser linewidth must be >= 0")
        norm = math.sqrt(sum(c * c for c in self.k_hat))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("k_hat must be a unit vector")

    def rabi_frequency(self, scheme: LevelScheme = DEFAULT_SCHEME) -> float:
        """Rabi frequency Omega = Gamma_transition * sqrt(S/2) (rad/s)."""
        return scheme.transition_rate(self.transition) * math.sqrt(self.saturation / 2.0)

    def k_vector(self, scheme: LevelScheme = DEFAULT_SCHEME) -> np.ndarray:
        """Wave vector (rad/m)."""
        k = 2.0 * math.pi / scheme.wavelength(self.transition)
        return k * np.asarray(self.k_hat, dtype=float)


@dataclass(frozen=True)
class Environment:
    """Magnetic field (defines the z quantization axis) and ion temperature."""

    b_gauss: float = 0.0
    temperature: float = 0.0           # K

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def zeeman_shifts(env: Environment, scheme: LevelScheme = DEFAULT_SCHEME) -> np.ndarray:
    """Zeeman shift g_j * m_j * mu_B * B / hbar of each basis state (rad/s)."""
    return scheme.g_factors * M_J * (MU_B_OVER_HBAR * env.b_gauss)


def coupling_basis_matrices(transition: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed lowering-block matrices (M_minus, M_zero, M_plus) for a transition.

    ``coupling_matrix(transition, pol)`` is the linear combination
    a_minus*M_minus + a_zero*M_zero + a_plus*M_plus with the spherical
    amplitudes of ``pol``.  Entries sit in the |lower><upper| block only.
    """
    try:
        table = _CG_TABLES[transition]
    except KeyError:
        raise ValueError(f"unknown transition {transition!r}") from None
    mats = {q: np.zeros((N_STATES, N_STATES), dtype=complex) for q in (-1, 0, 1)}
    for lo, up, q, cg in table:
        mats[q][lo, up] = GAUGE[lo] * GAUGE[up] * cg
    return mats[-1], mats[0], mats[1]


def coupling_matrix(transition: str, pol: Polarization) -> np.ndarray:
    """8x8 dipole coupling block |lower><upper| for one laser.

    For the D-P transition with linear polarization (theta, phi) this
    reproduces, entry by entry,

        (|5>,|3>) = +1/2 sin(theta) e^{+i phi}
        (|6>,|3>) = (|7>,|4>) = -1/sqrt(3) cos(theta)
        (|6>,|4>) = -1/(2 sqrt(3)) sin(theta) e^{+i phi}
        (|7>,|3>) = +1/(2 sqrt(3)) sin(theta) e^{-i phi}
        (|8>,|4>) = +1/2 sin(theta) e^{-i phi}
    """
    am, a0, ap = pol.spherical()
    m_minus, m_zero, m_plus = coupling_basis_matrices(transition)
    return am * m_minus + a0 * m_zero + ap * m_plus


def build_H0(
    dop: LaserField,
    pr: LaserField,
    env: Environment,
    scheme: LevelScheme = DEFAULT_SCHEME,
) -> np.ndarray:
    """Rotating-frame Hamiltonian of the two static lasers (rad/s, hbar=1).

    In the frame rotating with the Doppler laser on S and the probe on D
    (P states untouched), the diagonal carries zeeman + detuning on S and D
    and the bare Zeeman shift on P; a dark (Raman) resonance of the pair
    (m_S, m_D) therefore sits at
    Delta_pr = Delta_dop + (g_S m_S - g_D m_D) mu_B B / hbar.
    """
    if dop.transition != "S-P":
        raise ValueError("doppler laser must address the S-P transition")
    if pr.transition != "D-P":
        raise ValueError("probe laser must address the D-P transition")
    diag = zeeman_shifts(env, scheme).astype(complex)
    diag[list(S_STATES)] += dop.detuning
    diag[list(D_STATES)] += pr.detuning
    h = np.diag(diag)
    for laser in (dop, pr):
        c = coupling_matrix(laser.transition, laser.polarization)
        omega = laser.rabi_frequency(scheme)
        h += (omega / 2.0) * (c + c.conj().T)
    return h


def doppler_dephasing_rate(
    laser_a: LaserField,
    laser_b: LaserField,
    env: Environment,
    scheme: LevelScheme = DEFAULT_SCHEME,
) -> float:
    """Thermal two-photon broadening |k_a - k_b| sqrt(k_B T / 2m) (rad/s)."""
    dk = laser_a.k_vector(scheme) - laser_b.k_vector(scheme)
    return float(np.linalg.norm(dk)) * math.sqrt(K_B * env.temperature / (2.0 * scheme.mass))


def relative_linewidth(
    laser: LaserField,
    reference: LaserField,
    env: Environment,
    scheme: LevelScheme = DEFAULT_SCHEME,
) -> float:
    """Effective linewidth of ``laser`` against ``reference``:
    sqrt(Gamma_laser^2 + Gamma_T^2) with the thermal term from the two beams'
    wave-vector difference."""
    gamma_t = doppler_dephasing_rate(laser, reference, env, scheme)
    return math.hypot(laser.linewidth, gamma_t)


def build_collapse_operators(
    lasers: Sequence[LaserField],
    env: Environment,
    scheme: LevelScheme = DEFAULT_SCHEME,
) -> list[np.ndarray]:
    """Collapse operators: spontaneous decay channels plus laser dephasing.

    Decay: one operator per allowed Zeeman channel, amplitude
    sqrt(Gamma_branch) * |CG|, so the total rate out of each P sublevel is
    Gamma_SP + Gamma_DP = 1/tau_P.

    Dephasing: one projector per *static* laser (the two lasers defining the
    rotating frame), amplitude sqrt(Gamma_eff) on the manifold that laser
    rotates.  The first S-P laser in ``lasers`` is the phase reference: its
    Gamma_eff is its own linewidth, while every other laser picks up the
    thermal term for its wave-vector difference with the reference.  A
    repumper that is *not* static in the frame must not be passed here; its
    linewidth enters the Floquet recursion as per-harmonic damping instead
    (see floquet.averaged_steady_state).
    """
    if len(lasers) < 2:
        raise ValueError("need at least two lasers")
    for laser in lasers:
        if laser.linewidth < 0:
            raise ValueError("laser linewidth must be >= 0")

    ops: list[np.ndarray] = []
    for transition, gamma in (("S-P", scheme.gamma_sp), ("D-P", scheme.gamma_dp)):
        for lo, up, _q, cg in _CG_TABLES[transition]:
            c = np.zeros((N_STATES, N_STATES), dtype=complex)
            c[lo, up] = GAUGE[lo] * GAUGE[up] * cg * math.sqrt(gamma)
            ops.append(c)

    reference = next((l for l in lasers if l.transition == "S-P"), lasers[0])
    for laser in lasers:
        if laser is reference:
            gamma_eff = laser.linewidth
        else:
            gamma_eff = relative_linewidth(laser, reference, env, scheme)
        if gamma_eff > 0.0:
            states = S_STATES if laser.transition == "S-P" else D_STATES
            proj = np.zeros((N_STATES, N_STATES), dtype=complex)
            proj[list(states), list(states)] = math.sqrt(gamma_eff)
            ops.append(proj)
    return ops
