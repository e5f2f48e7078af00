"""End-to-end acceptance gate: nine numbered criteria.

Each test prints one PASS/FAIL line with the measured numbers (surfaced in
the run summary by the -rP report option) and asserts the same condition.
All tolerances are pinned literals.  Every steady state solved while this
module runs is captured by the module-scoped validity collector, and the
final criterion audits the whole log.

Criterion 3 contains a sub-check that the model genuinely does not satisfy
(six resolved minima at a 15-degree probe tilt); it is reported as an
honest failure with the physics spelled out in place, not weakened or
skipped.
"""

from dataclasses import replace

import numpy as np
import pytest

from darkres.atom import DEFAULT_SCHEME, Environment, LaserField, Polarization
from darkres.floquet import averaged_steady_state
from darkres.inference import (
    FitProblem,
    build_kicking_calibration,
    dd_thermometry_sensitivity,
    estimate_probe_angle,
    estimate_repumper_angle,
    fit_dip_fwhm,
    fit_spectrum,
)
from darkres.liouville import (
    build_liouvillian_set,
    period_averaged_state,
    steady_state_two_laser,
)
from darkres.spectra import (
    MHZ,
    excited_population,
    find_minima,
    poisson_counts,
    predict_resonance_positions,
    probe_scan,
    resonance_depths,
)
from darkres.validity import collect

from conftest import grid_mhz, three_laser, two_laser


def _report(num, label, ok, detail):
    print(f"criterion {num} ({label}): {'PASS' if ok else 'FAIL'} -- {detail}")
    assert ok, f"criterion {num} ({label}): {detail}"


@pytest.fixture(scope="module")
def state_log():
    """Validity metrics of every steady state solved in this module."""
    with collect() as records:
        yield records


# ---------------------------------------------------------------------
# 1: switching the repumper drive off must reduce the three-laser
# averaged solution to the two-laser steady state, elementwise


def test_criterion_1_reduction_identity(state_log):
    rng = np.random.default_rng(20260814)
    worst = 0.0
    for _ in range(20):
        dop = LaserField("S-P", rng.uniform(0.2, 1.5), rng.uniform(-25.0, -5.0) * MHZ)
        d_pr = rng.uniform(-25.0, 5.0)
        pr = LaserField("D-P", rng.uniform(0.5, 8.0), d_pr * MHZ,
                        polarization=Polarization.linear(rng.uniform(0.0, 90.0)))
        rep = LaserField("D-P", 0.0, (d_pr + rng.uniform(2.0, 30.0)) * MHZ,
                         polarization=Polarization.linear(rng.uniform(0.0, 90.0)))
        env = Environment(b_gauss=rng.uniform(1.0, 8.0),
                          temperature=rng.uniform(0.0, 10e-3))
        rho3 = averaged_steady_state(build_liouvillian_set(dop, pr, rep, env)).rho0
        rho2 = steady_state_two_laser(build_liouvillian_set(dop, pr, None, env).l0)
        worst = max(worst, float(np.abs(rho3 - rho2).max()))
    _report(1, "reduction identity at zero repumper drive", worst < 1e-12,
            f"max elementwise deviation {worst:.2e} over 20 randomized configs (tol 1e-12)")


# ---------------------------------------------------------------------
# 2: the harmonic recursion must reproduce the brute-force period mean
# of the driven master equation


def _floquet_vs_ode(dop, pr, rep, env):
    lset = build_liouvillian_set(dop, pr, rep, env)
    avg = averaged_steady_state(lset)
    rho_ode = period_averaged_state(lset, rho0=avg.rho0, block_tol=1e-5)
    return abs(excited_population(avg.rho0) - excited_population(rho_ode))


def test_criterion_2_averaged_solution_matches_ode(state_log):
    # The ODE route cannot represent relative phase diffusion between the
    # two D-P tones, so all configs here keep the repumper linewidth at
    # zero and its beam collinear with the probe (the field defaults);
    # the harmonic damping is then exactly zero and both routes solve the
    # same model.  The oracle's own stopping error (~1e-6 at this block
    # tolerance) sits two orders below the acceptance tolerance.
    devs = []
    # pi probe plus a sigma+sigma- repumper driven hard at small |dbar|,
    # where several harmonics contribute
    devs.append(_floquet_vs_ode(
        LaserField("S-P", 0.5, -10.0 * MHZ),
        LaserField("D-P", 2.0, 0.0, polarization=Polarization.linear(0.0)),
        LaserField("D-P", 6.0, 2.0 * MHZ, polarization=Polarization.linear(90.0)),
        Environment(b_gauss=3.7, temperature=0.0)))
    rng = np.random.default_rng(20260815)
    for _ in range(10):
        dop = LaserField("S-P", rng.uniform(0.2, 1.5), rng.uniform(-25.0, -5.0) * MHZ)
        d_pr = rng.uniform(-25.0, 5.0)
        pr = LaserField("D-P", rng.uniform(0.5, 8.0), d_pr * MHZ,
                        polarization=Polarization.linear(rng.uniform(0.0, 90.0)))
        dbar = float(rng.uniform(2.0, 30.0) * rng.choice([-1.0, 1.0]))
        assert abs(dbar) * MHZ > DEFAULT_SCHEME.gamma_dp  # beat above the D-P linewidth
        rep = LaserField("D-P", rng.uniform(0.5, 8.0), (d_pr + dbar) * MHZ,
                         polarization=Polarization.linear(rng.uniform(0.0, 90.0)))
        env = Environment(b_gauss=rng.uniform(1.0, 8.0),
                          temperature=rng.uniform(0.0, 10e-3))
        devs.append(_floquet_vs_ode(dop, pr, rep, env))
    worst = max(devs)
    _report(2, "averaged solution vs ODE period mean", worst < 1e-4,
            f"max |fluorescence difference| {worst:.2e} over 11 configs (tol 1e-4)")


# ---------------------------------------------------------------------
# 3: number of resolved dark resonances vs probe polarization


def test_criterion_3_resonance_counts(state_log):
    legs = []

    # (a) sigma+sigma- probe: two Zeeman pairs of Raman conditions -> 4 dips
    curve = probe_scan(two_laser())
    legs.append(("4 at alpha=90", len(find_minima(curve)) == 4))

    # (b) probe tilted to 15 deg: six Raman conditions are allowed and six
    # resolved dips are expected here.  The model disagrees: at 15 deg the
    # pi component carries ~14x the combined sigma intensity (cot^2 alpha)
    # and optically pumps/dephases the four sigma-type dark superpositions
    # faster than their Raman linewidth, so they fill in and exactly 4
    # minima remain at every drive strength we scanned.  Six resolved
    # minima appear only once the tilt exceeds roughly 50 deg
    # (test_spectra covers 6 at 60 deg).  Reported as an honest failure.
    tilted = probe_scan(two_laser(s_dop=0.3, s_pr=1.0, alpha_pr=15.0,
                                  grid=grid_mhz(-25.0, 5.0)))
    n15 = len(find_minima(tilted))
    legs.append((f"6 at alpha=15 (found {n15})", n15 == 6))

    # (c) pi probe, no repumper: population pools in m = +-3/2 of D and
    # the spectrum is flat at the dark level
    flat = probe_scan(two_laser(alpha_pr=0.0, grid=grid_mhz(-20.0, 0.0, 0.5)))
    legs.append(("flat pumped-dark at alpha=0",
                 float(flat.diagnostics["population"].max()) < 1e-8
                 and len(find_minima(flat)) == 0))

    # (d) pi probe plus a weak sigma+sigma- repumper: the two pi-type dips
    # come back
    repumped = probe_scan(three_laser(alpha_pr=0.0, s_rep=0.5, delta_rep=40.0))
    legs.append(("2 at alpha=0 with weak repumper",
                 len(find_minima(repumped)) == 2))

    detail = "; ".join(f"{name}: {'ok' if ok else 'FAILED'}" for name, ok in legs)
    _report(3, "resonance counts vs probe polarization",
            all(ok for _, ok in legs), detail)


# ---------------------------------------------------------------------
# 4: dip positions follow the two-photon Raman condition


def test_criterion_4_resonance_position_law(state_log):
    step = 0.25
    rows = []
    for b in (2.0, 3.7, 6.0):
        cfg = two_laser(s_dop=0.4, s_pr=2.0, b_gauss=b,
                        grid=grid_mhz(-40.0, 20.0, step))
        curve = probe_scan(cfg)
        found = np.sort(curve.detunings[find_minima(curve)])
        predicted = np.sort(predict_resonance_positions(cfg).positions())
        if found.size == predicted.size:
            rows.append((b, found.size, float(np.abs(found - predicted).max()) / MHZ))
        else:
            rows.append((b, found.size, np.inf))
    ok = all(n == 4 and w <= step + 1e-9 for _, n, w in rows)
    detail = "; ".join(f"B={b} G: {n} dips, worst offset {w:.3f} MHz" for b, n, w in rows)
    _report(4, "dip positions vs Raman predictor (tol one grid step)", ok, detail)


# ---------------------------------------------------------------------
# 5: a polarized repumper selectively fills in ("kicks") the dark states
# it couples to


def test_criterion_5_repumper_kicking(state_log):
    base = dict(s_dop=0.65, s_pr=7.43, delta_dop=-14.6, alpha_pr=90.0,
                grid=grid_mhz(-32.0, 3.0, 0.25))
    predicted = predict_resonance_positions(two_laser(**base))

    def depth_vector(s_rep, alpha_rep, delta_rep):
        if s_rep == 0.0:
            cfg = two_laser(**base)
        else:
            cfg = three_laser(s_rep=s_rep, delta_rep=delta_rep,
                              alpha_rep=alpha_rep, **base)
        rs = resonance_depths(probe_scan(cfg), predicted)
        return np.array([r.depth for r in rs], dtype=float)

    # pi repumper addresses m = +-1/2 of D only: the two middle (inner
    # m_D) dips must lose depth monotonically while the outer pair stays
    pi_rows = np.array([depth_vector(s, 0.0, 52.3) for s in (0.0, 1.6, 7.2)])
    pi_mid_ok = bool(np.all(np.diff(pi_rows[:, 1:3], axis=0) < 0.0))
    outer_rel = np.abs(pi_rows[1:, [0, 3]] - pi_rows[0, [0, 3]]) / pi_rows[0, [0, 3]]
    pi_outer_ok = bool(np.all(outer_rel < 0.20))

    # sigma+sigma- repumper reaches every D sublevel: all four dips fill in
    ss_rows = np.array([depth_vector(s, 90.0, 30.6) for s in (0.0, 2.7, 9.3)])
    ss_ok = bool(np.all(np.diff(ss_rows, axis=0) < 0.0))

    _report(5, "repumper polarization kicks the matching dark states",
            pi_mid_ok and pi_outer_ok and ss_ok,
            f"pi middles {np.round(pi_rows[:, 1], 3).tolist()} and "
            f"{np.round(pi_rows[:, 2], 3).tolist()} decreasing={pi_mid_ok}, "
            f"outer rel change max {outer_rel.max():.3f} (tol 0.20); "
            f"sigma: all four strictly decreasing={ss_ok}")


# ---------------------------------------------------------------------
# 6: parameter recovery from Poisson-noise count data


TRUTH_COUNTS = {"s_dop": 0.53, "s_pr": 9.9, "delta_dop_mhz": -9.8,
                "b_gauss": 3.7, "t_mk": 4.7}
FREE_COUNTS = tuple(TRUTH_COUNTS)


@pytest.fixture(scope="module")
def count_fit_study(state_log):
    """50 Poisson realizations of a ~1e4-peak-count spectrum, each fitted
    for (s_dop, s_pr, delta_dop, B, T) starting from the nominal values."""
    truth = two_laser(s_dop=0.53, s_pr=9.9, delta_dop=-9.8, t_mk=4.7,
                      grid=grid_mhz(-30.0, 10.0, 0.5),
                      scale=570000.0, offset=150.0)
    clean = probe_scan(truth)
    assert 9e3 < float(clean.values.max()) < 1.2e4
    fits = []
    for seed in range(50):
        noisy = poisson_counts(clean, seed=seed)
        problem = FitProblem(detunings=noisy.detunings, observed=noisy.values,
                             template=truth, free=FREE_COUNTS,
                             sigmas=np.sqrt(np.maximum(noisy.values, 1.0)))
        fits.append(fit_spectrum(problem))
    return fits


def test_criterion_6_poisson_fit_recovery(count_fit_study, state_log):
    n_pass = sum(
        res.converged and all(
            abs(res.estimates[k] - TRUTH_COUNTS[k]) <= 3.0 * res.uncertainties[k]
            for k in FREE_COUNTS)
        for res in count_fit_study)
    _report(6, "all five parameters within 3 sigma on Poisson data",
            n_pass >= 45, f"{n_pass}/50 seeds recovered every parameter (need >= 45)")


def test_fit_interval_coverage(count_fit_study):
    # supporting invariant, not one of the numbered criteria: the reported
    # 1-sigma intervals must cover truth in at least 60% of seeds
    for name in FREE_COUNTS:
        n_cover = sum(
            abs(res.estimates[name] - TRUTH_COUNTS[name]) <= res.uncertainties[name]
            for res in count_fit_study)
        assert n_cover >= 30, f"1-sigma interval for {name} covered {n_cover}/50"


# ---------------------------------------------------------------------
# 7: polarization estimates from noisy spectra


def test_criterion_7_polarimetry_accuracy(state_log):
    # probe-angle estimator, 20 Poisson seeds per truth angle.  A pi
    # probe without a repumper gives a flat pumped-dark spectrum with no
    # angle information, so the alpha=0 case runs with a weak far-detuned
    # repumper; the other angles run with two lasers.
    probe_medians = {}
    for alpha in (0.0, 15.0, 45.0, 90.0):
        if alpha == 0.0:
            tpl = three_laser(s_rep=2.0, delta_rep=40.0, alpha_rep=90.0,
                              s_dop=0.68, s_pr=7.6, delta_dop=-14.7,
                              alpha_pr=0.0, grid=grid_mhz(-24.0, 0.0, 0.5),
                              scale=1.57e6, offset=200.0)
        else:
            tpl = two_laser(s_dop=0.68, s_pr=7.6, delta_dop=-14.7,
                            alpha_pr=alpha, grid=grid_mhz(-30.0, 5.0, 0.5),
                            scale=1.57e6, offset=200.0)
        clean = probe_scan(tpl)
        errs = []
        for seed in range(20):
            noisy = poisson_counts(clean, seed=seed)
            res = estimate_probe_angle(noisy.detunings, noisy.values, tpl,
                                       sigmas=np.sqrt(np.maximum(noisy.values, 1.0)))
            errs.append(abs(res.estimates["alpha_pr_deg"] - alpha))
        probe_medians[alpha] = float(np.median(errs))
    probe_worst = max(probe_medians.values())

    # repumper-angle estimator: noiseless depth calibration, then noisy
    # four-dip depth vectors inverted through it
    kick = three_laser(s_rep=6.22, delta_rep=32.9, alpha_rep=90.0,
                       s_dop=0.61, s_pr=4.83, delta_dop=-9.6,
                       grid=grid_mhz(-28.0, 6.0, 0.5), scale=6.7e5, offset=150.0)
    calib = build_kicking_calibration(kick, alphas_deg=np.arange(0.0, 90.1, 5.0))
    predicted = predict_resonance_positions(
        two_laser(s_dop=0.61, s_pr=4.83, delta_dop=-9.6, grid=kick.grid))
    kick_medians = {}
    for alpha in (0.0, 15.0, 45.0, 90.0):
        cfg = replace(kick, repumper=replace(
            kick.repumper, polarization=Polarization.linear(alpha)))
        clean = probe_scan(cfg)
        errs = []
        for seed in range(20):
            noisy = poisson_counts(clean, seed=seed)
            depths = np.array(
                [r.depth for r in resonance_depths(noisy, predicted)], dtype=float)
            est = estimate_repumper_angle(depths, calib)
            errs.append(abs(est.alpha_deg - alpha))
        kick_medians[alpha] = float(np.median(errs))
    kick_worst = max(kick_medians.values())

    _report(7, "polarimetry median errors over 20 seeds",
            probe_worst <= 2.0 and kick_worst <= 3.0,
            f"probe worst median {probe_worst:.2f} deg (tol 2.0); "
            f"kicking worst median {kick_worst:.2f} deg (tol 3.0)")


# ---------------------------------------------------------------------
# 8: thermal broadening of the D-D two-photon resonance is a beam-geometry
# effect: absent for collinear 866 nm beams, dominant for counter-propagating


def test_criterion_8_dd_thermometry(state_log):
    # collinear geometry; the 0.35 MHz repumper linewidth sets a
    # temperature-independent floor for the D-D width, as with
    # free-running diodes
    col = three_laser(alpha_rep=90.0, alpha_pr=0.0, s_dop=1.0,
                      s_pr=4.0, s_rep=4.0, rep_linewidth=0.35 * MHZ,
                      delta_rep=-12.0, delta_dop=-40.0,
                      grid=grid_mhz(-18.4, -11.9, 0.03))
    tab_col = dd_thermometry_sensitivity(col, 0.0, [5e-3, 50e-3],
                                         window=1.4 * MHZ)
    col_rel = abs(tab_col.fwhm[1] - tab_col.fwhm[0]) / tab_col.fwhm[0]
    col_ok = all(f == "" for f in tab_col.flags) and col_rel < 0.01

    # same configuration and geometry, S-D resonance instead: the probe
    # pair (397 nm vs 866 nm) can never be wave-vector matched, so this
    # width must grow with temperature
    sd = replace(col, grid=grid_mhz(-37.0, -28.0, 0.05))
    target = [p for p in predict_resonance_positions(sd).positions()
              if sd.grid[0] < p < sd.grid[-1]][0]
    sd_widths = []
    sd_flags = []
    for t_mk in (5.0, 50.0):
        cfg_t = replace(sd, environment=replace(sd.environment,
                                                temperature=t_mk * 1e-3))
        dip = fit_dip_fwhm(probe_scan(cfg_t), target, 3.5 * MHZ)
        sd_widths.append(dip.fwhm)
        sd_flags.append(dip.flag)
    sd_ok = all(f == "" for f in sd_flags) and sd_widths[1] > sd_widths[0]

    # counter-propagating 866 nm beams: |k_pr - k_rep| = 2k and the D-D
    # width picks up the full thermal dephasing
    ctr = three_laser(alpha_rep=90.0, alpha_pr=0.0, s_dop=1.0,
                      s_pr=12.0, s_rep=40.0, delta_rep=-16.0,
                      delta_dop=-40.0, b_gauss=6.0,
                      grid=grid_mhz(-34.0, 1.0, 0.15))
    tab_ctr = dd_thermometry_sensitivity(ctr, 180.0, [5e-3, 15e-3, 50e-3],
                                         window=11.0 * MHZ)
    ctr_ok = (all(f == "" for f in tab_ctr.flags)
              and bool(np.all(np.diff(tab_ctr.fwhm) > 0.0)))

    _report(8, "D-D width is geometry-limited, not temperature-limited",
            col_ok and sd_ok and ctr_ok,
            f"collinear D-D rel change {col_rel:.4f} (tol 0.01); "
            f"S-D widths {np.round(np.array(sd_widths) / MHZ, 2).tolist()} MHz "
            f"increasing={sd_ok}; counter-propagating D-D widths "
            f"{np.round(tab_ctr.fwhm / MHZ, 2).tolist()} MHz increasing={ctr_ok}")


# ---------------------------------------------------------------------
# 9: every steady state solved above must be a physical density matrix


def test_criterion_9_state_validity(state_log):
    herm = max(r.herm_error for r in state_log)
    trace = max(r.trace_error for r in state_log)
    mineig = min(r.min_eigenvalue for r in state_log)
    ok = herm < 1e-10 and trace < 1e-12 and mineig > -1e-9
    _report(9, "physicality of all collected steady states", ok,
            f"{len(state_log)} states: max hermiticity error {herm:.2e} "
            f"(tol 1e-10), max trace error {trace:.2e} (tol 1e-12), "
            f"min eigenvalue {mineig:.2e} (floor -1e-9)")
