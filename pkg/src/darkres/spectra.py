"""Fluorescence spectra: probe-detuning scans, resonance positions and depths.

The scan engine exploits that the static Liouvillian is affine in the probe
detuning, L0(delta_pr) = L0(0) + delta_pr * K with a fixed diagonal
superoperator K, and solves whole detuning grids as batched 64x64 systems.
Three-laser grids are grouped by the adaptively chosen truncation order so
each group runs the Floquet chain once over a stacked batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks

from .atom import (
    DEFAULT_SCHEME,
    D_STATES,
    Environment,
    LaserField,
    LevelScheme,
    M_J,
    N_STATES,
    build_H0,
    build_collapse_operators,
    coupling_matrix,
    relative_linewidth,
    zeeman_shifts,
    MU_B_OVER_HBAR,
)
from .floquet import FloquetConfig, adaptive_nmax, averaged_kernel
from .liouville import (
    RESIDUAL_TOL,
    build_L0,
    build_L_pm,
    solve_steady,
    steady_state_from_mixed,
)
from .validity import record_states

__all__ = [
    "ExperimentConfig",
    "SpectrumCurve",
    "Resonance",
    "ResonanceSet",
    "probe_scan",
    "dd_scan",
    "predict_resonance_positions",
    "predict_dd_positions",
    "resonance_depths",
    "find_minima",
    "poisson_counts",
    "MHZ",
]

MHZ = 2.0 * math.pi * 1e6  # rad/s per MHz of ordinary frequency

# flag values attached to scan points
FLAG_OK = 0
FLAG_SOLVER = 1
FLAG_DEGENERATE = 2


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A full scan configuration: lasers, environment, detector, grid."""

    doppler: LaserField
    probe: LaserField
    repumper: LaserField | None
    environment: Environment
    grid: np.ndarray                       # probe detunings, rad/s, increasing
    scale: float = 1.0                     # counts per unit excited population
    offset: float = 0.0                    # counts
    scheme: LevelScheme = DEFAULT_SCHEME

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("scan grid must be a 1-D array with at least 2 points")
        if not np.all(np.diff(grid) > 0):
            raise ValueError("scan grid must be strictly increasing")
        if self.scale <= 0:
            raise ValueError("detector scale must be > 0")

    @property
    def grid_step(self) -> float:
        return float(self.grid[1] - self.grid[0])


@dataclass(eq=False)
class SpectrumCurve:
    """A simulated (or loaded) spectrum with per-point solver diagnostics."""

    detunings: np.ndarray                  # rad/s
    values: np.ndarray                     # counts (scale * population + offset)
    diagnostics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.detunings) != len(self.values):
            raise ValueError("detunings and values must have the same length")

    @property
    def flags(self) -> np.ndarray:
        return self.diagnostics.get("flag", np.zeros(len(self.values), dtype=int))


@dataclass(frozen=True)
class Resonance:
    """One (possibly merged) dark resonance."""

    position: float                        # rad/s probe detuning
    pairs: tuple                           # ((m_lower, m_d), ...) participating
    kinds: tuple                           # probe channel labels 'pi'/'sigma+'/'sigma-'
    depth: float | None = None
    flag: str = ""


@dataclass(frozen=True)
class ResonanceSet:
    entries: tuple

    def positions(self) -> np.ndarray:
        return np.array([r.position for r in self.entries])

    def depths(self) -> np.ndarray:
        return np.array([np.nan if r.depth is None else r.depth for r in self.entries])

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def excited_population(rho: np.ndarray) -> float:
    """Total P-manifold population of a density matrix: the fluorescence
    observable up to the detector scale and offset."""
    rho = np.asarray(rho)
    return float((rho[..., 2, 2] + rho[..., 3, 3]).real)


def _detuning_superop() -> np.ndarray:
    """d L0 / d delta_pr: commutator superoperator of the D-state projector."""
    d = np.zeros((N_STATES, N_STATES))
    d[list(D_STATES), list(D_STATES)] = 1.0
    eye = np.eye(N_STATES)
    return -1j * (np.kron(d, eye) - np.kron(eye, d.T))


_K_PR = _detuning_superop()


def _solve_batch(matrices: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """solve_steady over a batch, resolving degenerate kernels point by point.

    Points whose LU solution is not a physical steady state (typically a
    kernel of dimension above one: some sublevel no field can excite) are
    retried through the kernel projector from the maximally mixed state.
    Returns (rho_vecs, defects, ok_mask); unrecoverable points carry NaNs.
    """
    try:
        rho, res = solve_steady(matrices)
        ok = np.isfinite(rho).all(axis=-1)
    except Exception:
        n = matrices.shape[0]
        rho = np.full((n, matrices.shape[-1]), np.nan, dtype=complex)
        res = np.full(n, np.inf)
        ok = np.zeros(n, dtype=bool)
        for i in range(n):
            try:
                rho[i], res[i] = solve_steady(matrices[i])
                ok[i] = bool(np.isfinite(rho[i]).all())
            except Exception:
                pass
    for i in np.flatnonzero(~ok | (res >= RESIDUAL_TOL)):
        cand, defect = steady_state_from_mixed(matrices[i])
        if np.isfinite(cand).all() and defect < RESIDUAL_TOL:
            rho[i], res[i], ok[i] = cand, defect, True
    return rho, res, ok


def probe_scan(cfg: ExperimentConfig, floquet_cfg: FloquetConfig | None = None) -> SpectrumCurve:
    """Fluorescence scale*(rho_33+rho_44)+offset over the probe-detuning grid.

    Two lasers: one batched linear solve.  Three lasers: points are solved
    with the time-averaged Floquet kernel, dropping to a static bichromatic
    treatment where |Delta_rep - Delta_pr| is degenerate.  Solver failures
    flag individual points and leave NaN values.
    """
    fcfg = floquet_cfg or FloquetConfig()
    grid = cfg.grid
    n_pts = grid.size
    scheme = cfg.scheme

    pr0 = replace(cfg.probe, detuning=0.0)
    h_base = build_H0(cfg.doppler, pr0, cfg.environment, scheme)
    c_ops = build_collapse_operators([cfg.doppler, pr0], cfg.environment, scheme)
    l0_base = build_L0(h_base, c_ops)
    l0_stack = l0_base[None, :, :] + grid[:, None, None] * _K_PR[None, :, :]

    n_max_used = np.zeros(n_pts, dtype=int)
    flags = np.zeros(n_pts, dtype=int)

    if cfg.repumper is None:
        rho_vec, residual, ok = _solve_batch(l0_stack)
    else:
        rep = cfg.repumper
        omega_rep = rep.rabi_frequency(scheme)
        l_plus, l_minus = build_L_pm(coupling_matrix("D-P", rep.polarization))
        gamma_h = relative_linewidth(rep, cfg.probe, cfg.environment, scheme)
        delta_bar = rep.detuning - grid

        rho_vec = np.zeros((n_pts, l0_base.shape[0]), dtype=complex)
        residual = np.zeros(n_pts)
        ok = np.zeros(n_pts, dtype=bool)

        if omega_rep == 0.0:
            rho_vec, residual, ok = _solve_batch(l0_stack)
        else:
            degenerate = np.abs(delta_bar) < fcfg.degenerate_delta
            if degenerate.any():
                c = 0.5 * omega_rep
                m = l0_stack[degenerate] + c * (l_plus + l_minus)
                rho_vec[degenerate], residual[degenerate], ok[degenerate] = _solve_batch(m)
                flags[degenerate] = FLAG_DEGENERATE
            live = ~degenerate
            if live.any():
                if fcfg.n_max is not None:
                    n_per_point = np.full(n_pts, fcfg.n_max, dtype=int)
                else:
                    n_per_point = np.array(
                        [
                            adaptive_nmax(omega_rep, db, fcfg.floor, fcfg.cap)
                            for db in np.where(degenerate, 1.0, delta_bar)
                        ],
                        dtype=int,
                    )
                n_max_used[live] = n_per_point[live]
                for n_max in np.unique(n_per_point[live]):
                    sel = live & (n_per_point == n_max)
                    kernel = averaged_kernel(
                        l0_stack[sel],
                        l_plus,
                        l_minus,
                        omega_rep,
                        delta_bar[sel],
                        int(n_max),
                        gamma_h,
                    )
                    rho_vec[sel], residual[sel], ok[sel] = _solve_batch(kernel)

    ok &= residual < RESIDUAL_TOL
    flags[~ok] = FLAG_SOLVER

    rhos = rho_vec.reshape(n_pts, N_STATES, N_STATES)
    herm, trace, min_eig = record_states("scan", rhos[ok])
    herm_a = np.full(n_pts, np.nan)
    trace_a = np.full(n_pts, np.nan)
    mineig_a = np.full(n_pts, np.nan)
    herm_a[ok], trace_a[ok], mineig_a[ok] = herm, trace, min_eig

    population = (rhos[:, 2, 2] + rhos[:, 3, 3]).real
    values = cfg.scale * population + cfg.offset

    return SpectrumCurve(
        detunings=grid.copy(),
        values=values,
        diagnostics={
            "population": population,
            "residual": residual,
            "flag": flags,
            "n_max": n_max_used,
            "herm_error": herm_a,
            "trace_error": trace_a,
            "min_eigenvalue": mineig_a,
        },
        meta={"kind": "probe_scan", "three_laser": cfg.repumper is not None},
    )


def dd_scan(cfg: ExperimentConfig, floquet_cfg: FloquetConfig | None = None) -> SpectrumCurve:
    """Probe scan whose window contains the repumper detuning (D-D regime)."""
    if cfg.repumper is None:
        raise ValueError("dd_scan needs a repumper")
    if not (cfg.grid[0] <= cfg.repumper.detuning <= cfg.grid[-1]):
        raise ValueError("scan window must contain the repumper detuning")
    curve = probe_scan(cfg, floquet_cfg)
    curve.meta["kind"] = "dd_scan"
    return curve


def _raman_pairs(cfg: ExperimentConfig, lower_block: np.ndarray, lower_states: Sequence[int]):
    """(lower, d, p) index triples with both legs coupled through the same P."""
    pr_c = coupling_matrix("D-P", cfg.probe.polarization)
    tol = 1e-12
    for p in (2, 3):
        for lo in lower_states:
            if abs(lower_block[lo, p]) <= tol:
                continue
            for d in D_STATES:
                if abs(pr_c[d, p]) > tol:
                    yield lo, d, p


def predict_resonance_positions(cfg: ExperimentConfig) -> ResonanceSet:
    """S-D dark-resonance positions from the Raman condition.

    For each selection-rule-allowed pair (m_S, m_D) sharing an excited
    sublevel, the dip sits at
    Delta_pr = Delta_dop + (g_S m_S - g_D m_D) mu_B B / hbar.
    Degenerate positions are merged into one entry.
    """
    scheme = cfg.scheme
    u = MU_B_OVER_HBAR * cfg.environment.b_gauss
    dop_c = coupling_matrix("S-P", cfg.doppler.polarization)
    found: dict[tuple, dict] = {}
    for s, d, p in _raman_pairs(cfg, dop_c, (0, 1)):
        pos = cfg.doppler.detuning + (scheme.g_s * M_J[s] - scheme.g_d * M_J[d]) * u
        q = int(round(M_J[p] - M_J[d]))
        kind = {0: "pi", 1: "sigma+", -1: "sigma-"}[q]
        rec = found.setdefault((M_J[s], M_J[d]), {"position": pos, "kinds": set()})
        rec["kinds"].add(kind)
    return _merge_positions(found)


def predict_dd_positions(cfg: ExperimentConfig) -> ResonanceSet:
    """D-D dark-resonance positions, Delta_pr = Delta_rep + g_D (m' - m) u.

    The probe addresses m and the repumper m', sharing an excited sublevel;
    pairs with m' = m are skipped (no two-photon coherence involved).
    """
    if cfg.repumper is None:
        raise ValueError("D-D resonances need a repumper")
    scheme = cfg.scheme
    u = MU_B_OVER_HBAR * cfg.environment.b_gauss
    rep_c = coupling_matrix("D-P", cfg.repumper.polarization)
    pr_c = coupling_matrix("D-P", cfg.probe.polarization)
    tol = 1e-12
    found: dict[tuple, dict] = {}
    for p in (2, 3):
        for d2 in D_STATES:
            if abs(rep_c[d2, p]) <= tol:
                continue
            for d1 in D_STATES:
                if d1 == d2 or abs(pr_c[d1, p]) <= tol:
                    continue
                pos = cfg.repumper.detuning + scheme.g_d * (M_J[d2] - M_J[d1]) * u
                q = int(round(M_J[p] - M_J[d1]))
                kind = {0: "pi", 1: "sigma+", -1: "sigma-"}[q]
                rec = found.setdefault((M_J[d1], M_J[d2]), {"position": pos, "kinds": set()})
                rec["kinds"].add(kind)
    return _merge_positions(found)


def _merge_positions(found: dict, merge_tol: float = 1e-6) -> ResonanceSet:
    entries: list[Resonance] = []
    for (m_lo, m_d), rec in found.items():
        entries.append(
            Resonance(position=rec["position"], pairs=((m_lo, m_d),), kinds=tuple(sorted(rec["kinds"])))
        )
    entries.sort(key=lambda r: r.position)
    merged: list[Resonance] = []
    for r in entries:
        if merged and abs(r.position - merged[-1].position) <= merge_tol:
            prev = merged[-1]
            merged[-1] = Resonance(
                position=prev.position,
                pairs=prev.pairs + r.pairs,
                kinds=tuple(sorted(set(prev.kinds) | set(r.kinds))),
            )
        else:
            merged.append(r)
    return ResonanceSet(tuple(merged))


def resonance_depths(
    curve: SpectrumCurve,
    resonances: ResonanceSet,
    window_steps: int = 3,
    wing_steps: int = 10,
) -> ResonanceSet:
    """Measure dip depths relative to a local quadratic background.

    The dip is searched within +-window_steps grid points of each predicted
    position; the background is a quadratic fit to the surrounding
    +-wing_steps points excluding that window.  depth = (bg - min)/bg,
    clipped to [0, 1].  Windows clipped by the grid edge are flagged.
    """
    x = curve.detunings
    y = curve.values
    out = []
    for res in resonances:
        i0 = int(np.argmin(np.abs(x - res.position)))
        lo, hi = i0 - window_steps, i0 + window_steps
        wlo, whi = i0 - wing_steps, i0 + wing_steps
        flag = res.flag
        if wlo < 0 or whi >= len(x):
            flag = (flag + " edge").strip()
            wlo, whi = max(wlo, 0), min(whi, len(x) - 1)
            lo, hi = max(lo, 0), min(hi, len(x) - 1)
        wing_idx = np.r_[wlo:lo, hi + 1 : whi + 1]
        win_idx = np.arange(lo, hi + 1)
        if len(wing_idx) < 3 or len(win_idx) == 0:
            out.append(replace(res, depth=None, flag=(flag + " unresolved").strip()))
            continue
        # fit in grid-step units around the window centre for conditioning
        t = (x - x[i0]) / (x[1] - x[0])
        bg_poly = np.polynomial.Polynomial.fit(t[wing_idx], y[wing_idx], 2)
        j_min = win_idx[int(np.argmin(y[win_idx]))]
        bg = float(bg_poly(t[j_min]))
        if bg <= 0:
            out.append(replace(res, depth=None, flag=(flag + " background").strip()))
            continue
        depth = float(np.clip((bg - y[j_min]) / bg, 0.0, 1.0))
        out.append(replace(res, depth=depth, flag=flag))
    return ResonanceSet(tuple(out))


def find_minima(curve: SpectrumCurve, prominence_frac: float = 0.02) -> np.ndarray:
    """Indices of local minima with prominence above a fraction of the range.

    This is the minima-counting convention used by the CLI footer and the
    resonance-count checks; a flat curve has no minima.
    """
    y = curve.values
    span = float(y.max() - y.min())
    if not np.isfinite(span) or span <= 1e-12 * max(np.abs(y).max(), 1.0):
        return np.array([], dtype=int)
    idx, _ = find_peaks(-y, prominence=prominence_frac * span)
    return idx


def poisson_counts(curve: SpectrumCurve, seed) -> SpectrumCurve:
    """Replace values by Poisson draws with the current values as means."""
    rng = np.random.default_rng(seed)
    lam = np.clip(curve.values, 0.0, None)
    noisy = rng.poisson(lam).astype(float)
    meta = dict(curve.meta)
    meta.update({"noise": "poisson", "seed": int(seed) if np.isscalar(seed) else str(seed)})
    return SpectrumCurve(
        detunings=curve.detunings.copy(),
        values=noisy,
        diagnostics=dict(curve.diagnostics),
        meta=meta,
    )
