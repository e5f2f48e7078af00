"""Superoperator construction and steady-state solving.

The core oracle here recomputes the master-equation right-hand side with
plain matrix algebra, -i[H,rho] + sum_k C rho C^dag - {C^dag C, rho}/2,
and compares it against the vectorized generator acting on vec(rho).
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from darkres.atom import (
    Environment,
    LaserField,
    Polarization,
    build_collapse_operators,
    build_H0,
    coupling_matrix,
)
from darkres.liouville import (
    LiouvillianSet,
    build_L0,
    build_L_pm,
    build_liouvillian_set,
    period_averaged_state,
    solve_steady,
    steady_state_two_laser,
    time_evolve,
    unvectorize,
    vectorize,
)
from darkres.spectra import MHZ


def random_density_matrix(rng):
    a = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def example_system(t_mk=2.0):
    dop = LaserField("S-P", 0.6, -12.0 * MHZ, linewidth=0.05 * MHZ)
    pr = LaserField("D-P", 3.0, -4.0 * MHZ,
                    polarization=Polarization.linear(35.0), linewidth=0.08 * MHZ)
    env = Environment(b_gauss=4.1, temperature=t_mk * 1e-3)
    h = build_H0(dop, pr, env)
    c_ops = build_collapse_operators([dop, pr], env)
    return h, c_ops


def lindblad_rhs(h, c_ops, rho):
    out = -1j * (h @ rho - rho @ h)
    for c in c_ops:
        cdc = c.conj().T @ c
        out += c @ rho @ c.conj().T - 0.5 * (cdc @ rho + rho @ cdc)
    return out


def test_vectorization_round_trip():
    rng = np.random.default_rng(0)
    rho = random_density_matrix(rng)
    assert_allclose(unvectorize(vectorize(rho)), rho, rtol=0, atol=0)
    # row-major layout: vec index 8*i + j holds rho_ij
    assert vectorize(rho)[8 * 2 + 5] == rho[2, 5]


def test_l0_matches_direct_master_equation():
    h, c_ops = example_system()
    l0 = build_L0(h, c_ops)
    rng = np.random.default_rng(1)
    for _ in range(5):
        rho = random_density_matrix(rng)
        direct = lindblad_rhs(h, c_ops, rho)
        assert_allclose(unvectorize(l0 @ vectorize(rho)), direct,
                        atol=1e-18 * np.abs(l0).max())


def test_l_pm_match_commutators():
    c = coupling_matrix("D-P", Polarization.sigma_pm())
    l_plus, l_minus = build_L_pm(c)
    rng = np.random.default_rng(2)
    rho = random_density_matrix(rng)
    assert_allclose(unvectorize(l_plus @ vectorize(rho)),
                    -1j * (c @ rho - rho @ c), atol=1e-15)
    cd = c.conj().T
    assert_allclose(unvectorize(l_minus @ vectorize(rho)),
                    -1j * (cd @ rho - rho @ cd), atol=1e-15)


def test_l_plus_pinned_entry():
    # |5><3| coupling of a sigma+sigma- repumper enters the commutator
    # superoperator at row rho_51, column rho_31 with weight -i/2
    c = coupling_matrix("D-P", Polarization.sigma_pm())
    l_plus, _ = build_L_pm(c)
    assert_allclose(l_plus[8 * 4 + 0, 8 * 2 + 0], -0.5j, atol=1e-12)


def test_l0_preserves_trace_and_hermiticity():
    h, c_ops = example_system()
    l0 = build_L0(h, c_ops)
    # d(Tr rho)/dt = 0: the trace functional annihilates every column
    trace_row = l0[np.arange(8) * 9, :].sum(axis=0)
    assert np.abs(trace_row).max() < 1e-6  # rad/s scale ~1e8, relative ~1e-14
    rng = np.random.default_rng(3)
    rho = random_density_matrix(rng)
    drho = unvectorize(l0 @ vectorize(rho))
    assert_allclose(drho, drho.conj().T, atol=1e-9 * np.abs(l0).max() / 8)


def test_solve_steady_is_stationary():
    h, c_ops = example_system()
    l0 = build_L0(h, c_ops)
    rho_vec, residual = solve_steady(l0)
    assert residual < 1e-13
    rho = unvectorize(rho_vec)
    assert_allclose(np.trace(rho), 1.0, atol=1e-13)
    # stationarity in physical units: |L0 rho| small against the decay scale
    assert np.abs(l0 @ rho_vec).max() < 1e-8 * np.abs(np.diag(l0)).max()
    assert_allclose(rho, rho.conj().T, atol=1e-12)
    assert np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() > -1e-12


def test_solve_steady_batched_matches_loop():
    h, c_ops = example_system()
    l0 = build_L0(h, c_ops)
    shifts = np.array([-2.0, 0.0, 3.0]) * MHZ
    d = np.zeros((8, 8))
    d[[4, 5, 6, 7], [4, 5, 6, 7]] = 1.0
    k = -1j * (np.kron(d, np.eye(8)) - np.kron(np.eye(8), d.T))
    stack = l0[None] + shifts[:, None, None] * k[None]
    batch, res = solve_steady(stack)
    for i in range(3):
        single, _ = solve_steady(stack[i])
        assert_allclose(batch[i], single, rtol=0, atol=1e-14)
    assert res.shape == (3,)


def test_steady_state_two_laser_wrapper():
    h, c_ops = example_system()
    l0 = build_L0(h, c_ops)
    rho = steady_state_two_laser(l0)
    assert_allclose(np.trace(rho), 1.0, atol=1e-12)
    assert np.abs(l0 @ vectorize(rho)).max() < 1e-8 * np.abs(np.diag(l0)).max()


def test_build_liouvillian_set_two_vs_three():
    dop = LaserField("S-P", 0.5, -10.0 * MHZ)
    pr = LaserField("D-P", 2.0, 0.0)
    env = Environment(b_gauss=3.7)
    lset2 = build_liouvillian_set(dop, pr, None, env)
    assert lset2.omega_rep == 0.0
    assert np.all(lset2.l_plus == 0.0)
    rep = LaserField("D-P", 2.0, 25.0 * MHZ)
    lset3 = build_liouvillian_set(dop, pr, rep, env)
    assert_allclose(lset3.delta_bar, 25.0 * MHZ, rtol=1e-12)
    assert lset3.omega_rep == rep.rabi_frequency()
    # the static part is unchanged by the modulation tone
    assert_allclose(lset3.l0, lset2.l0, rtol=0, atol=0)
    with pytest.raises(ValueError):
        build_liouvillian_set(dop, pr, dop, env)


def test_time_evolve_preserves_density_matrix():
    dop = LaserField("S-P", 0.5, -10.0 * MHZ)
    pr = LaserField("D-P", 2.0, 0.0)
    env = Environment(b_gauss=3.7)
    rep = LaserField("D-P", 1.5, 30.0 * MHZ)
    lset = build_liouvillian_set(dop, pr, rep, env)
    rho0 = np.zeros((8, 8), dtype=complex)
    rho0[0, 0] = rho0[1, 1] = 0.5
    ts, rhos = time_evolve(rho0, lset, (0.0, 2e-6),
                           t_eval=np.linspace(0.0, 2e-6, 9))
    assert rhos.shape == (9, 8, 8)
    traces = np.einsum("tii->t", rhos)
    assert_allclose(traces, 1.0, atol=1e-9)
    assert_allclose(rhos[-1], rhos[-1].conj().T, atol=1e-9)
    assert np.linalg.eigvalsh((rhos[-1] + rhos[-1].conj().T) / 2).min() > -1e-9


def test_period_averaged_state_requires_finite_period():
    dop = LaserField("S-P", 0.5, -10.0 * MHZ)
    pr = LaserField("D-P", 2.0, 0.0)
    rep = LaserField("D-P", 1.5, 0.0)  # same frequency as the probe
    lset = build_liouvillian_set(dop, pr, rep, Environment(b_gauss=3.7))
    assert lset.delta_bar == 0.0
    with pytest.raises(ValueError):
        period_averaged_state(lset)


def test_period_averaged_state_undriven_matches_steady():
    dop = LaserField("S-P", 0.5, -10.0 * MHZ)
    pr = LaserField("D-P", 2.0, -3.0 * MHZ)
    lset = build_liouvillian_set(dop, pr, None, Environment(b_gauss=3.7))
    rho_ode = period_averaged_state(lset, block_tol=1e-9)
    rho_ss = steady_state_two_laser(lset.l0)
    assert np.abs(rho_ode - rho_ss).max() < 1e-8
