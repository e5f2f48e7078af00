"""Shared builders for the test suite.

Detunings are given in MHz (converted to rad/s here) because every
hand-checked number in the tests is naturally quoted in MHz.
"""

import numpy as np
import pytest

from darkres.atom import Environment, LaserField, Polarization
from darkres.spectra import MHZ, ExperimentConfig


def grid_mhz(start, stop, step=0.25):
    return np.arange(start, stop + 1e-9, step) * MHZ


def two_laser(s_dop=0.5, s_pr=2.0, delta_dop=-10.0, alpha_pr=90.0,
              b_gauss=3.7, t_mk=0.0, grid=None, **kw):
    """sigma+sigma- Doppler laser plus a linear-polarized probe."""
    if grid is None:
        grid = grid_mhz(-30.0, 10.0)
    dop = LaserField("S-P", s_dop, delta_dop * MHZ)
    pr = LaserField("D-P", s_pr, 0.0, polarization=Polarization.linear(alpha_pr))
    env = Environment(b_gauss=b_gauss, temperature=t_mk * 1e-3)
    return ExperimentConfig(doppler=dop, probe=pr, repumper=None,
                            environment=env, grid=grid, **kw)


def three_laser(s_rep=2.0, delta_rep=40.0, alpha_rep=90.0, rep_linewidth=0.0,
                rep_k_hat=(0.0, 1.0, 0.0), **kw):
    """two_laser() plus a repumper on the D-P transition."""
    cfg = two_laser(**kw)
    rep = LaserField("D-P", s_rep, delta_rep * MHZ,
                     polarization=Polarization.linear(alpha_rep),
                     linewidth=rep_linewidth, k_hat=rep_k_hat)
    return ExperimentConfig(doppler=cfg.doppler, probe=cfg.probe, repumper=rep,
                            environment=cfg.environment, grid=cfg.grid,
                            scale=cfg.scale, offset=cfg.offset)


@pytest.fixture(scope="session")
def four_dip_curve():
    """Reference sigma/sigma two-laser spectrum used by several tests."""
    from darkres.spectra import probe_scan

    cfg = two_laser()
    return cfg, probe_scan(cfg)
