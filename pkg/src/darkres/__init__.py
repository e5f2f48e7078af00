"""Dark-resonance spectra of the eight-level Ca+ system under two or three lasers.

Submodules load lazily so that the command-line entry point can pin BLAS
thread-count environment variables before numpy is first imported.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "atom": (
        "Environment", "LaserField", "LevelScheme", "Polarization",
        "DEFAULT_SCHEME", "build_H0", "build_collapse_operators",
        "coupling_matrix", "zeeman_shifts",
    ),
    "liouville": (
        "LiouvillianSet", "build_L0", "build_L_pm", "build_liouvillian_set",
        "steady_state_two_laser", "time_evolve", "period_averaged_state",
        "unvectorize", "vectorize",
    ),
    "floquet": (
        "AveragedState", "FloquetConfig", "adaptive_nmax", "averaged_steady_state",
    ),
    "spectra": (
        "ExperimentConfig", "ResonanceSet", "SpectrumCurve", "dd_scan",
        "find_minima", "poisson_counts", "predict_resonance_positions",
        "predict_dd_positions", "probe_scan", "resonance_depths", "MHZ",
    ),
    "inference": (
        "FitProblem", "FitResult", "KickingCalibration", "fit_spectrum",
        "two_stage_fit", "estimate_probe_angle", "build_kicking_calibration",
        "estimate_repumper_angle", "fit_dip_fwhm", "dd_thermometry_sensitivity",
        "apply_params",
    ),
    "io": (
        "load_config", "parse_mapping", "config_to_mapping", "stable_hash",
        "write_spectrum_csv", "read_spectrum_csv", "ConfigError",
    ),
}

_ATTR_TO_MODULE = {name: mod for mod, names in _EXPORTS.items() for name in names}

__all__ = sorted(_ATTR_TO_MODULE) + ["__version__"]


def __getattr__(name):
    mod = _ATTR_TO_MODULE.get(name)
    if mod is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{mod}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
