"""Parameter estimation: spectrum fitting, polarimetry, thermometry.

The fitter is a damped Gauss-Newton (Levenberg-Marquardt) loop written
against a plain residual-vector interface, so the same core drives full
spectrum fits (model = the steady-state engine itself) and small analytic
fits (Lorentzian dip profiles).  Strictly positive parameters are fitted
in log space and polarization angles through a smooth bijection onto
[0, 90] degrees, which keeps every trial step inside the physical domain
without constraint handling.

Two polarimetry estimators are provided: a direct fit of the probe
polarization angle to a spectrum, and a "kicking" estimator for the
repumper angle that compares measured dark-resonance depths against a
precomputed depth-vs-angle calibration.

Fits are deterministic and single-threaded; independent fits (calibration
grid points, noise-seed sweeps) are safe to run concurrently since all
inputs are immutable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

from .atom import Environment, Polarization
from .spectra import (
    MHZ,
    ExperimentConfig,
    SpectrumCurve,
    dd_scan,
    find_minima,
    predict_dd_positions,
    predict_resonance_positions,
    probe_scan,
    resonance_depths,
)

__all__ = [
    "FitError",
    "FitProblem",
    "FitResult",
    "KickingCalibration",
    "AngleEstimate",
    "levenberg_marquardt",
    "apply_params",
    "current_value",
    "fit_spectrum",
    "initial_position_guess",
    "two_stage_fit",
    "estimate_probe_angle",
    "build_kicking_calibration",
    "estimate_repumper_angle",
    "fit_dip_fwhm",
    "dd_thermometry_sensitivity",
    "PARAMETER_NAMES",
]

KHZ = 2.0 * np.pi * 1e3


class FitError(RuntimeError):
    """Raised when a fit cannot even start (unevaluable model, bad setup)."""


# ---------------------------------------------------------------------------
# Parameter registry: names, units, transforms


_LOG_PARAMS = frozenset({
    "s_dop", "s_pr", "s_rep", "b_gauss", "t_mk",
    "gamma_dop_khz", "gamma_pr_khz", "gamma_rep_khz", "scale",
})
_ANGLE_PARAMS = frozenset({"alpha_pr_deg", "alpha_rep_deg"})
_LINEAR_PARAMS = frozenset({"delta_dop_mhz", "delta_rep_mhz", "offset"})

PARAMETER_NAMES = tuple(sorted(_LOG_PARAMS | _ANGLE_PARAMS | _LINEAR_PARAMS))

_DEFAULT_BOUNDS = {
    "s_dop": (1e-4, 1e4), "s_pr": (1e-4, 1e4), "s_rep": (1e-4, 1e4),
    "b_gauss": (0.05, 50.0), "t_mk": (0.01, 1e3),
    "gamma_dop_khz": (1e-3, 1e5), "gamma_pr_khz": (1e-3, 1e5),
    "gamma_rep_khz": (1e-3, 1e5),
    "scale": (1e-12, 1e12), "offset": (-1e12, 1e12),
    "delta_dop_mhz": (-500.0, 500.0), "delta_rep_mhz": (-500.0, 500.0),
    "alpha_pr_deg": (0.0, 90.0), "alpha_rep_deg": (0.0, 90.0),
}

# Angles are fitted through alpha = 90*sigmoid(u); pin initial values away
# from the saturated ends where the map has no gradient.
_ANGLE_CLIP = (0.5, 89.5)


def _to_internal(name: str, value: float) -> float:
    if name in _LOG_PARAMS:
        if value <= 0:
            raise FitError(f"{name}: log-space parameter needs a positive value, got {value}")
        return np.log(value)
    if name in _ANGLE_PARAMS:
        a = np.clip(value, *_ANGLE_CLIP)
        return np.log(a / (90.0 - a))
    return value


def _from_internal(name: str, u: float) -> float:
    if name in _LOG_PARAMS:
        return np.exp(u)
    if name in _ANGLE_PARAMS:
        return 90.0 / (1.0 + np.exp(-u))
    return u


def _internal_slope(name: str, value: float) -> float:
    """d(natural)/d(internal) at the given natural value, for the delta
    method on uncertainties."""
    if name in _LOG_PARAMS:
        return value
    if name in _ANGLE_PARAMS:
        return value * (90.0 - value) / 90.0
    return 1.0


def current_value(cfg: ExperimentConfig, name: str) -> float:
    """Read a named parameter (natural units) off a config."""
    if name == "s_dop":
        return cfg.doppler.saturation
    if name == "s_pr":
        return cfg.probe.saturation
    if name == "delta_dop_mhz":
        return cfg.doppler.detuning / MHZ
    if name == "gamma_dop_khz":
        return cfg.doppler.linewidth / KHZ
    if name == "gamma_pr_khz":
        return cfg.probe.linewidth / KHZ
    if name == "alpha_pr_deg":
        return _pol_angle(cfg.probe.polarization)
    if name == "b_gauss":
        return cfg.environment.b_gauss
    if name == "t_mk":
        return cfg.environment.temperature * 1e3
    if name == "scale":
        return cfg.scale
    if name == "offset":
        return cfg.offset
    if name in ("s_rep", "delta_rep_mhz", "gamma_rep_khz", "alpha_rep_deg"):
        if cfg.repumper is None:
            raise FitError(f"{name}: config has no repumper")
        if name == "s_rep":
            return cfg.repumper.saturation
        if name == "delta_rep_mhz":
            return cfg.repumper.detuning / MHZ
        if name == "gamma_rep_khz":
            return cfg.repumper.linewidth / KHZ
        return _pol_angle(cfg.repumper.polarization)
    raise FitError(f"unknown parameter {name!r} (valid: {', '.join(PARAMETER_NAMES)})")


def _pol_angle(pol: Polarization) -> float:
    a_minus, a_zero, _ = pol.spherical()
    return float(np.degrees(np.arctan2(abs(a_minus) * np.sqrt(2.0), abs(a_zero))))


def apply_params(cfg: ExperimentConfig, values: dict) -> ExperimentConfig:
    """Return a copy of cfg with the named parameters replaced."""
    doppler, probe, rep = cfg.doppler, cfg.probe, cfg.repumper
    env, scale, offset = cfg.environment, cfg.scale, cfg.offset
    for name, value in values.items():
        if name == "s_dop":
            doppler = replace(doppler, saturation=value)
        elif name == "s_pr":
            probe = replace(probe, saturation=value)
        elif name == "delta_dop_mhz":
            doppler = replace(doppler, detuning=value * MHZ)
        elif name == "gamma_dop_khz":
            doppler = replace(doppler, linewidth=value * KHZ)
        elif name == "gamma_pr_khz":
            probe = replace(probe, linewidth=value * KHZ)
        elif name == "alpha_pr_deg":
            probe = replace(probe, polarization=Polarization.linear(value))
        elif name == "b_gauss":
            env = replace(env, b_gauss=value)
        elif name == "t_mk":
            env = replace(env, temperature=value * 1e-3)
        elif name == "scale":
            scale = value
        elif name == "offset":
            offset = value
        elif name in ("s_rep", "delta_rep_mhz", "gamma_rep_khz", "alpha_rep_deg"):
            if rep is None:
                raise FitError(f"{name}: config has no repumper")
            if name == "s_rep":
                rep = replace(rep, saturation=value)
            elif name == "delta_rep_mhz":
                rep = replace(rep, detuning=value * MHZ)
            elif name == "gamma_rep_khz":
                rep = replace(rep, linewidth=value * KHZ)
            else:
                rep = replace(rep, polarization=Polarization.linear(value))
        else:
            raise FitError(f"unknown parameter {name!r} (valid: {', '.join(PARAMETER_NAMES)})")
    return replace(cfg, doppler=doppler, probe=probe, repumper=rep,
                   environment=env, scale=scale, offset=offset)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt core


@dataclass
class _LMResult:
    u: np.ndarray
    cov: np.ndarray
    cost: float
    initial_cost: float
    n_iter: int
    n_eval: int
    converged: bool
    message: str


def _fd_jacobian(fun, u, r0, rel_step):
    J = np.empty((r0.size, u.size))
    for j in range(u.size):
        h = rel_step * max(abs(u[j]), 1.0)
        up = u.copy()
        up[j] += h
        J[:, j] = (fun(up) - r0) / h
    return J


def levenberg_marquardt(fun, u0, *, max_iter=100, gtol=1e-8, xtol=1e-10,
                        ftol=1e-12, rel_step=1e-6, lam0=1e-3,
                        lam_up=10.0, lam_down=3.0, lam_max=1e10) -> _LMResult:
    """Minimize ||fun(u)||^2 over u by damped Gauss-Newton.

    fun maps an n-vector to an m-vector of residuals.  Jacobians are
    forward finite differences with per-parameter relative step
    ``rel_step``.  Accepted-step costs are monotone non-increasing;
    rejected trials raise the damping by ``lam_up``, accepted steps lower
    it by ``lam_down``.  Returns the internal-coordinate optimum with
    covariance (J^T J)^{-1} evaluated there.
    """
    u = np.asarray(u0, dtype=float).copy()
    r = np.asarray(fun(u), dtype=float)
    if not np.all(np.isfinite(r)):
        raise FitError("residuals not finite at the initial point")
    cost = float(r @ r)
    initial_cost = cost
    n_eval = 1
    lam = lam0
    n_iter = 0
    converged = False
    message = "max iterations reached"

    for n_iter in range(max_iter + 1):
        J = _fd_jacobian(fun, u, r, rel_step)
        n_eval += u.size
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) <= gtol * (1.0 + cost):
            converged = True
            message = "gradient below tolerance"
            break
        if n_iter == max_iter:
            break
        JTJ = J.T @ J
        diag = np.maximum(np.diag(JTJ), 1e-30)
        accepted = False
        while lam <= lam_max:
            try:
                step = np.linalg.solve(JTJ + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= lam_up
                continue
            r_new = np.asarray(fun(u + step), dtype=float)
            n_eval += 1
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            lam *= lam_up
        if not accepted:
            # no damping produces a descending step: first-order stationary
            # within the numerical resolution of the cost
            converged = True
            message = "no improving step at maximum damping"
            break
        u = u + step
        drop = cost - cost_new
        r, cost = r_new, cost_new
        lam = max(lam / lam_down, 1e-12)
        # under heavy damping the step is short no matter how far the
        # optimum is; only trust the step/decrease tests once lam is modest
        if lam <= 10.0 * lam0:
            if np.linalg.norm(step) <= xtol * (np.linalg.norm(u) + xtol):
                converged = True
                message = "step below tolerance"
                break
            if drop <= ftol * max(cost, 1e-300):
                converged = True
                message = "cost decrease below tolerance"
                break

    J = _fd_jacobian(fun, u, r, rel_step)
    n_eval += u.size
    JTJ = J.T @ J
    cov = np.linalg.pinv(JTJ)
    return _LMResult(u=u, cov=cov, cost=cost, initial_cost=initial_cost,
                     n_iter=n_iter, n_eval=n_eval, converged=converged,
                     message=message)


# ---------------------------------------------------------------------------
# Spectrum fitting


@dataclass(eq=False)
class FitProblem:
    """A spectrum-fit setup: observed data, config template, free params.

    sigmas are per-point 1-sigma noise levels (e.g. sqrt of counts for
    Poisson data).  When omitted, unit weights are used and the covariance
    is rescaled by the reduced chi-square.
    """

    detunings: np.ndarray
    observed: np.ndarray
    template: ExperimentConfig
    free: tuple
    sigmas: np.ndarray | None = None
    init: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.detunings = np.asarray(self.detunings, dtype=float)
        self.observed = np.asarray(self.observed, dtype=float)
        if self.detunings.shape != self.observed.shape:
            raise FitError("detunings and observed values differ in length")
        self.free = tuple(self.free)
        for name in self.free:
            if name not in _DEFAULT_BOUNDS:
                raise FitError(f"unknown parameter {name!r} (valid: {', '.join(PARAMETER_NAMES)})")
        if len(set(self.free)) != len(self.free):
            raise FitError("duplicate free parameter")
        if self.observed.size < 3 * max(len(self.free), 1):
            raise FitError("need at least 3 data points per free parameter")
        if self.sigmas is not None:
            self.sigmas = np.asarray(self.sigmas, dtype=float)
            if self.sigmas.shape != self.observed.shape:
                raise FitError("sigmas length mismatch")
            if np.any(self.sigmas <= 0):
                raise FitError("sigmas must be positive")
        full_init = {}
        full_bounds = {}
        for name in self.free:
            v0 = self.init.get(name)
            if v0 is None:
                v0 = current_value(self.template, name)
            lo, hi = self.bounds.get(name, _DEFAULT_BOUNDS[name])
            if not lo <= v0 <= hi:
                raise FitError(f"{name}: initial value {v0} outside bounds [{lo}, {hi}]")
            full_init[name] = float(v0)
            full_bounds[name] = (float(lo), float(hi))
        self.init = full_init
        self.bounds = full_bounds


@dataclass(eq=False)
class FitResult:
    names: tuple
    estimates: dict
    uncertainties: dict
    bounds: dict
    cost: float
    initial_cost: float
    covariance: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    message: str
    flags: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = []
        for name in self.names:
            lines.append(f"{name} = {self.estimates[name]:.6g} +- {self.uncertainties[name]:.2g}")
        lines.append(f"cost {self.cost:.6g} after {self.n_iter} iterations ({self.message})")
        return "\n".join(lines)


def _model_factory(problem: FitProblem):
    cfg0 = replace(problem.template, grid=problem.detunings)
    names = problem.free

    def model(u):
        values = {n: _from_internal(n, ui) for n, ui in zip(names, u)}
        return probe_scan(apply_params(cfg0, values)).values

    return model


def fit_spectrum(problem: FitProblem, *, max_iter=100, rel_step=1e-6) -> FitResult:
    """Weighted least-squares fit of the steady-state model to a spectrum.

    Returns a FitResult whether or not the iteration limit was reached;
    check ``converged``.  Raises FitError only when the model cannot be
    evaluated at the initial point.
    """
    model = _model_factory(problem)
    obs = problem.observed
    if problem.sigmas is not None:
        sigmas = problem.sigmas
    else:
        # Unit weights, normalized to the data scale so the optimizer's
        # absolute gradient/step tolerances are scale-free.  The constant
        # cancels from the reduced-chi-square covariance below.
        sigmas = np.full_like(obs, max(float(np.max(np.abs(obs))), 1e-300))

    def residuals(u):
        return (model(u) - obs) / sigmas

    u0 = np.array([_to_internal(n, problem.init[n]) for n in problem.free])
    lm = levenberg_marquardt(residuals, u0, max_iter=max_iter, rel_step=rel_step)

    estimates = {n: _from_internal(n, ui) for n, ui in zip(problem.free, lm.u)}
    slopes = np.array([_internal_slope(n, estimates[n]) for n in problem.free])
    cov = lm.cov * np.outer(slopes, slopes)
    if problem.sigmas is None:
        # Unit weights: scale by reduced chi-square to get a noise estimate.
        dof = max(obs.size - len(problem.free), 1)
        cov = cov * (lm.cost / dof)
    sigma_est = {n: float(np.sqrt(max(cov[i, i], 0.0)))
                 for i, n in enumerate(problem.free)}
    return FitResult(
        names=problem.free, estimates=estimates, uncertainties=sigma_est,
        bounds=problem.bounds, cost=lm.cost, initial_cost=lm.initial_cost,
        covariance=cov, n_iter=lm.n_iter, n_eval=lm.n_eval,
        converged=lm.converged, message=lm.message,
    )


def initial_position_guess(detunings, observed, template: ExperimentConfig) -> dict:
    """Data-driven starting values for ``delta_dop_mhz`` and ``b_gauss``.

    The fit is a local method: when the initial detuning and field displace
    the predicted dip pattern by more than about half the smallest dip
    spacing, the optimizer can lock dips onto the wrong data minima and
    converge to a spurious optimum.  This helper reads both position
    parameters off the data instead: the Zeeman offsets of the dark
    resonances come in +- pairs, so the mean observed dip position
    estimates the static-laser detuning, and the outermost dip spacing
    fixes the field through the predictor's offsets-per-gauss.

    Returns {} when the number of observed dips does not match the
    predicted resonance count (pattern not resolved; fall back to the
    nominal configuration values).
    """
    curve = SpectrumCurve(detunings=np.asarray(detunings, dtype=float),
                          values=np.asarray(observed, dtype=float))
    b0 = template.environment.b_gauss
    if b0 == 0.0:
        return {}
    predicted = predict_resonance_positions(template)
    idx = find_minima(curve)
    if len(idx) < 2 or len(idx) != len(predicted):
        return {}
    found = curve.detunings[idx] / MHZ
    offs_per_g = (predicted.positions() - template.doppler.detuning) / MHZ / b0
    span_per_g = float(offs_per_g.max() - offs_per_g.min())
    if span_per_g <= 0.0:
        return {}
    lo_b, hi_b = _DEFAULT_BOUNDS["b_gauss"]
    b_hat = float(np.clip((found.max() - found.min()) / span_per_g, lo_b, hi_b))
    delta_hat = float(np.mean(found) - np.mean(offs_per_g) * b_hat)
    return {"delta_dop_mhz": delta_hat, "b_gauss": b_hat}


def two_stage_fit(reference, three_laser, template: ExperimentConfig,
                  stage1_free, stage2_free, *, sigmas_ref=None,
                  sigmas_three=None, max_iter=100):
    """Fit the two-laser reference spectrum first, then the repumper.

    ``reference`` and ``three_laser`` are (detunings, values) pairs.  Stage
    one fits ``stage1_free`` on the reference data with the repumper
    removed; stage two freezes those estimates into the template and fits
    ``stage2_free`` (typically s_rep, delta_rep_mhz) on the three-laser
    data.  Returns (stage1 FitResult, stage2 FitResult).
    """
    if template.repumper is None:
        raise FitError("two_stage_fit needs a template with a repumper")
    bad = [n for n in stage1_free if n.endswith("_rep") or "_rep_" in n]
    if bad:
        raise FitError(f"repumper parameters {bad} cannot be in stage one")

    ref_template = replace(template, repumper=None)
    p1 = FitProblem(detunings=reference[0], observed=reference[1],
                    template=ref_template, free=tuple(stage1_free),
                    sigmas=sigmas_ref)
    r1 = fit_spectrum(p1, max_iter=max_iter)

    template2 = apply_params(template, r1.estimates)
    p2 = FitProblem(detunings=three_laser[0], observed=three_laser[1],
                    template=template2, free=tuple(stage2_free),
                    sigmas=sigmas_three)
    r2 = fit_spectrum(p2, max_iter=max_iter)
    return r1, r2


# ---------------------------------------------------------------------------
# Probe polarimetry: direct angle fit


_ANGLE_CANDIDATES = (5.0, 25.0, 45.0, 65.0, 85.0)


def estimate_probe_angle(detunings, observed, template: ExperimentConfig, *,
                         sigmas=None, extra_free=(), max_iter=60) -> FitResult:
    """Estimate the probe polarization angle from a spectrum.

    Initialization is a fixed five-point scan over candidate angles (the
    documented alternative to global optimization); the best candidate
    seeds a fit with alpha_pr_deg free (plus any ``extra_free``).  The
    result carries a ``non_identifiable`` flag when the fitted model curve
    is flat compared to the noise level, which happens when no repumper is
    present and the probe is close to pi-polarized.
    """
    detunings = np.asarray(detunings, dtype=float)
    observed = np.asarray(observed, dtype=float)
    sig = np.ones_like(observed) if sigmas is None else np.asarray(sigmas, dtype=float)
    cfg0 = replace(template, grid=detunings)

    best_alpha, best_cost = None, np.inf
    for alpha in _ANGLE_CANDIDATES:
        trial = probe_scan(apply_params(cfg0, {"alpha_pr_deg": alpha})).values
        cost = float(np.sum(((trial - observed) / sig) ** 2))
        if cost < best_cost:
            best_alpha, best_cost = alpha, cost

    problem = FitProblem(
        detunings=detunings, observed=observed, template=template,
        free=("alpha_pr_deg",) + tuple(extra_free), sigmas=sigmas,
        init={"alpha_pr_deg": best_alpha},
    )
    result = fit_spectrum(problem, max_iter=max_iter)

    # no angle information when either the data or the best-fit curve is
    # flat at the noise level (pi-polarized probe with no repumper)
    fitted = probe_scan(apply_params(cfg0, result.estimates)).values
    noise_floor = 3.0 * float(np.median(sig)) if sigmas is not None \
        else 1e-6 * max(float(np.max(np.abs(observed))), 1.0)
    if min(float(np.ptp(fitted)), float(np.ptp(observed))) < noise_floor:
        result.flags["non_identifiable"] = True
    return result


# ---------------------------------------------------------------------------
# Repumper polarimetry: depth-vector calibration ("kicking")


@dataclass(eq=False)
class KickingCalibration:
    """Dark-resonance depth 4-vectors versus repumper polarization angle.

    Built at fixed (S_rep, detuning_rep) and fixed reference-spectrum
    parameters; the config hash guards against using a calibration with
    data taken under different settings.
    """

    alphas_deg: np.ndarray
    depths: np.ndarray
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alphas_deg = np.asarray(self.alphas_deg, dtype=float)
        self.depths = np.asarray(self.depths, dtype=float)
        if self.depths.shape != (self.alphas_deg.size, 4):
            raise ValueError("depths must be (n_alpha, 4)")
        if np.any(np.diff(self.alphas_deg) <= 0):
            raise ValueError("alpha grid must be strictly increasing")
        if self.alphas_deg[0] > 1e-9 or self.alphas_deg[-1] < 90.0 - 1e-9:
            raise ValueError("alpha grid must cover [0, 90] degrees")
        if np.any(self.depths < -1e-9) or np.any(self.depths > 1.0 + 1e-9):
            raise ValueError("depths must lie in [0, 1]")

    def depth_at(self, alpha_deg: float) -> np.ndarray:
        """Linear interpolation of the depth 4-vector at an angle."""
        a = float(np.clip(alpha_deg, 0.0, 90.0))
        return np.array([np.interp(a, self.alphas_deg, self.depths[:, j])
                         for j in range(4)])


def calibration_hash(cfg: ExperimentConfig) -> str:
    """Config hash for calibration matching.

    The repumper polarization fields are excluded: they are exactly what
    the calibration sweeps over and what the estimator later infers.
    """
    from .io import config_to_mapping, stable_hash

    mapping = config_to_mapping(cfg)
    rep = mapping.get("repumper", {})
    rep.pop("polarization", None)
    rep.pop("polarization_angle_deg", None)
    return stable_hash(mapping)


def build_kicking_calibration(cfg: ExperimentConfig,
                              alphas_deg=None) -> KickingCalibration:
    """Simulate resonance depths over a grid of repumper angles.

    cfg must describe a four-resonance reference spectrum (both static
    lasers sigma+ + sigma-) with the repumper detuned outside the scan
    window.  Grid points are independent and could run concurrently; here
    they run in grid order for determinism.
    """
    if cfg.repumper is None:
        raise FitError("kicking calibration needs a repumper in the config")
    if alphas_deg is None:
        alphas_deg = np.arange(0.0, 91.0, 5.0)
    positions = predict_resonance_positions(cfg)
    if len(positions) != 4:
        raise FitError(
            f"reference spectrum must show 4 resonances, predictor finds {len(positions)}"
        )
    rows = []
    for alpha in alphas_deg:
        cfg_a = apply_params(cfg, {"alpha_rep_deg": float(alpha)})
        curve = probe_scan(cfg_a)
        depths = resonance_depths(curve, positions).depths()
        rows.append(np.clip(depths, 0.0, 1.0))
    meta = {
        "s_rep": "%g" % cfg.repumper.saturation,
        "delta_rep_mhz": "%g" % (cfg.repumper.detuning / MHZ),
    }
    return KickingCalibration(alphas_deg=np.asarray(alphas_deg, dtype=float),
                              depths=np.array(rows),
                              config_hash=calibration_hash(cfg), meta=meta)


@dataclass(eq=False)
class AngleEstimate:
    alpha_deg: float
    sigma_deg: float
    flags: dict = field(default_factory=dict)


def estimate_repumper_angle(depths, calib: KickingCalibration, *,
                            sigmas=None) -> AngleEstimate:
    """Invert a measured depth 4-vector to a repumper angle.

    Minimizes the weighted squared distance to the calibration curves over
    a fine angle grid (linear interpolation between calibrated points) and
    takes the 1-sigma uncertainty from the curvature of the distance
    profile at its minimum.  Sets an ``extrapolation`` flag when any
    observed depth falls outside the calibrated range of its resonance.
    """
    depths = np.asarray(depths, dtype=float)
    if depths.shape != (4,):
        raise FitError("expected a 4-vector of resonance depths")
    w = np.ones(4) if sigmas is None else 1.0 / np.asarray(sigmas, dtype=float) ** 2

    flags = {}
    lo = calib.depths.min(axis=0)
    hi = calib.depths.max(axis=0)
    margin = 0.02 + 3.0 * (np.asarray(sigmas, dtype=float) if sigmas is not None else 0.0)
    if np.any(depths < lo - margin) or np.any(depths > hi + margin):
        flags["extrapolation"] = True

    fine = np.arange(0.0, 90.0 + 1e-9, 0.1)
    table = np.stack([np.interp(fine, calib.alphas_deg, calib.depths[:, j])
                      for j in range(4)], axis=1)
    profile = np.sum(w * (table - depths) ** 2, axis=1)
    i = int(np.argmin(profile))
    alpha = float(fine[i])

    # Quadratic curvature at the minimum -> delta(chi^2) = 1 interval.
    if 0 < i < fine.size - 1:
        curv = (profile[i - 1] - 2 * profile[i] + profile[i + 1]) / 0.1 ** 2
    else:
        j = 1 if i == 0 else fine.size - 2
        curv = (profile[j - 1] - 2 * profile[j] + profile[j + 1]) / 0.1 ** 2
        flags["edge"] = True
    sigma = float(np.sqrt(2.0 / curv)) if curv > 0 else np.inf
    if sigmas is None:
        # unit weights carry no scale: calibrate the interval to the residual
        # scatter (reduced chi-square with 4 points and 1 parameter)
        sigma *= float(np.sqrt(profile[i] / 3.0))
    return AngleEstimate(alpha_deg=alpha, sigma_deg=sigma, flags=flags)


# ---------------------------------------------------------------------------
# Lorentzian dip widths and thermometry sensitivity


@dataclass(eq=False)
class DipFit:
    center: float
    fwhm: float
    depth: float
    sigma_fwhm: float
    flag: str = ""


def fit_dip_fwhm(curve: SpectrumCurve, center, window, *, min_contrast=0.02) -> DipFit:
    """Fit one fluorescence dip with a Lorentzian on a linear background.

    center and window are in rad/s (same units as the curve grid); the fit
    runs on points within +-window of center.  Returns NaN width with flag
    'not_found' when there is no dip of at least ``min_contrast`` relative
    depth in the window.
    """
    x = curve.detunings
    y = curve.values
    sel = np.abs(x - center) <= window
    if np.count_nonzero(sel) < 8:
        return DipFit(center=np.nan, fwhm=np.nan, depth=np.nan,
                      sigma_fwhm=np.nan, flag="window_too_small")
    xs = x[sel] - center
    ys = y[sel]

    edge = max(2, xs.size // 8)
    b0 = float(np.median(np.concatenate([ys[:edge], ys[-edge:]])))
    i_min = int(np.argmin(ys))
    amp = b0 - float(ys[i_min])
    if b0 <= 0 or amp < min_contrast * b0:
        return DipFit(center=np.nan, fwhm=np.nan, depth=np.nan,
                      sigma_fwhm=np.nan, flag="not_found")
    step = float(xs[1] - xs[0])
    below = ys < b0 - 0.5 * amp
    w0 = max(float(np.count_nonzero(below)) * step, step)

    # u = (b0, slope, log amp, log fwhm, center shift)
    def model(u):
        base, slope, la, lw, c = u
        with np.errstate(over="ignore", invalid="ignore"):
            half = 0.5 * np.exp(lw)
            return base + slope * xs - np.exp(la) * half ** 2 / ((xs - c) ** 2 + half ** 2)

    scale = max(abs(b0), amp)

    def residuals(u):
        r = (model(u) - ys) / scale
        # non-finite trial points cost +inf so the optimizer backs off
        return np.where(np.isfinite(r), r, 1e150)

    u0 = np.array([b0, 0.0, np.log(amp), np.log(w0), float(xs[i_min])])
    lm = levenberg_marquardt(residuals, u0, max_iter=200)
    fwhm = float(np.exp(lm.u[3]))
    depth = float(np.exp(lm.u[2]) / lm.u[0]) if lm.u[0] > 0 else np.nan
    sigma_fwhm = float(np.sqrt(max(lm.cov[3, 3], 0.0)) * fwhm
                       * np.sqrt(lm.cost / max(xs.size - 5, 1)))
    flag = "" if lm.converged else "no_convergence"
    if (not np.all(np.isfinite(lm.u)) or not np.isfinite(depth)
            or not 0.0 < depth <= 1.5 or abs(lm.u[4]) > window):
        # the optimizer walked away from anything resembling a dip
        flag = "not_found"
    elif not 2.0 * step <= fwhm <= 2.0 * window:
        # narrower than the grid can resolve, or wider than the window
        flag = "unresolved"
    return DipFit(center=float(lm.u[4] + center), fwhm=fwhm, depth=depth,
                  sigma_fwhm=sigma_fwhm, flag=flag)


@dataclass(eq=False)
class SensitivityTable:
    angle_deg: float
    temperatures: np.ndarray
    fwhm: np.ndarray
    flags: tuple
    slope: float

    def fwhm_mhz(self):
        return self.fwhm / MHZ


def dd_thermometry_sensitivity(cfg: ExperimentConfig, beam_angle_deg,
                               temperatures, *, window=None) -> SensitivityTable:
    """D-D resonance width versus temperature for a given beam geometry.

    beam_angle_deg is the angle between the two 866 nm beams: the probe
    propagates along +y and the repumper along
    (sin(angle), cos(angle), 0), so 0 deg is collinear and 180 deg is
    counter-propagating.  For each temperature the predicted D-D resonance
    nearest the centre of the scan grid is fitted with a Lorentzian; the
    returned slope is dFWHM/dT from a straight-line fit over the
    temperatures where the resonance was found.
    """
    if cfg.repumper is None:
        raise FitError("thermometry needs a repumper")
    a = np.radians(beam_angle_deg)
    rep = replace(cfg.repumper, k_hat=(float(np.sin(a)), float(np.cos(a)), 0.0))
    probe = replace(cfg.probe, k_hat=(0.0, 1.0, 0.0))
    base = replace(cfg, probe=probe, repumper=rep)

    positions = predict_dd_positions(base).positions()
    if positions.size == 0:
        raise FitError("no D-D resonance predicted for this configuration")
    # the predicted features sit symmetrically around the repumper detuning,
    # so "nearest the repumper" is a coin flip; aim at the scan window instead
    mid = 0.5 * (base.grid[0] + base.grid[-1])
    target = positions[np.argmin(np.abs(positions - mid))]
    if not base.grid[0] <= target <= base.grid[-1]:
        raise FitError("predicted D-D resonance lies outside the scan grid")
    if window is None:
        window = min(8.0 * MHZ, 0.45 * (base.grid[-1] - base.grid[0]))

    temperatures = np.asarray(temperatures, dtype=float)
    widths = np.full(temperatures.size, np.nan)
    flags = []
    for i, t in enumerate(temperatures):
        cfg_t = replace(base, environment=replace(base.environment, temperature=float(t)))
        curve = dd_scan(cfg_t)
        dip = fit_dip_fwhm(curve, target, window)
        widths[i] = dip.fwhm
        flags.append(dip.flag)

    good = np.isfinite(widths)
    if np.count_nonzero(good) >= 2:
        slope = float(np.polyfit(temperatures[good], widths[good], 1)[0])
    else:
        slope = np.nan
    return SensitivityTable(angle_deg=float(beam_angle_deg),
                            temperatures=temperatures, fwhm=widths,
                            flags=tuple(flags), slope=slope)
