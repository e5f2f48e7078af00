"""Config files and data artifacts: INI experiment configs, spectrum CSV,
fit reports and calibration tables.

Every field that carries a unit has the unit in its name (``detuning_mhz``,
``b_gauss``, ``temperature_mk``) because unit mix-ups are the dominant user
error with tools like this.  Frequencies are MHz in all files and converted
to rad/s exactly once, here.

Spectrum CSVs are self-describing: ``# key=value`` header lines hold the
full resolved config (so a file can be re-fitted without the original INI),
the data block is ``detuning_mhz,fluorescence,flag`` rows, and footer lines
record detected minima and the run-manifest hash.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from pathlib import Path

import numpy as np

from .atom import Environment, LaserField, Polarization
from .spectra import MHZ, ExperimentConfig, SpectrumCurve

__all__ = [
    "ConfigError",
    "load_config",
    "parse_mapping",
    "config_to_mapping",
    "stable_hash",
    "write_spectrum_csv",
    "read_spectrum_csv",
    "write_fit_report",
    "write_calibration_csv",
    "read_calibration_csv",
]

KHZ = 2.0 * np.pi * 1e3

# Canonical float formatting for all artifacts.  %.12g is wide enough to
# round-trip every quantity we care about and never emits locale commas.
_FMT = "%.12g"


class ConfigError(ValueError):
    """Raised for malformed configs, with the offending field path."""


def _fmt(x: float) -> str:
    return _FMT % float(x)


# ---------------------------------------------------------------------------
# INI config <-> ExperimentConfig


_LASER_SECTIONS = {"doppler": "S-P", "probe": "D-P", "repumper": "D-P"}


def _get(section, name: str, path: str, *, required: bool = True, default=None):
    if name not in section:
        if required:
            raise ConfigError(f"{path}.{name}: missing required field")
        return default
    return section[name]


def _get_float(section, name: str, path: str, *, required: bool = True, default=None):
    raw = _get(section, name, path, required=required, default=None)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{path}.{name}: not a number: {raw!r}") from None


def _parse_polarization(section, path: str) -> Polarization:
    kind = _get(section, "polarization", path).strip().lower()
    angle = _get_float(section, "polarization_angle_deg", path, required=False)
    if kind in ("pi", "linear_0"):
        return Polarization.pi()
    if kind in ("sigma+-", "sigma_pm", "sigma"):
        return Polarization.sigma_pm()
    if kind == "linear":
        if angle is None:
            raise ConfigError(f"{path}.polarization_angle_deg: required for linear polarization")
        if not 0.0 <= angle <= 90.0:
            raise ConfigError(f"{path}.polarization_angle_deg: must lie in [0, 90], got {angle}")
        return Polarization.linear(angle)
    raise ConfigError(
        f"{path}.polarization: unknown value {kind!r} (expected pi, sigma+- or linear)"
    )


def _parse_k_hat(section, path: str):
    raw = _get(section, "k_hat", path, required=False)
    if raw is None:
        return (0.0, 1.0, 0.0)
    parts = [p for p in raw.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ConfigError(f"{path}.k_hat: expected three components, got {raw!r}")
    try:
        vec = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{path}.k_hat: not numeric: {raw!r}") from None
    return vec


def _parse_laser(section, name: str) -> LaserField:
    transition = _LASER_SECTIONS[name]
    saturation = _get_float(section, "saturation", name)
    detuning = _get_float(section, "detuning_mhz", name, required=(name != "probe"), default=0.0)
    linewidth = _get_float(section, "linewidth_khz", name, required=False, default=0.0)
    try:
        return LaserField(
            transition=transition,
            saturation=saturation,
            detuning=detuning * MHZ,
            polarization=_parse_polarization(section, name),
            linewidth=linewidth * KHZ,
            k_hat=_parse_k_hat(section, name),
        )
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_mapping(mapping) -> ExperimentConfig:
    """Build an ExperimentConfig from a {section: {field: str}} mapping.

    This is the single place config text becomes physical quantities; both
    the INI loader and the CSV-header reader funnel through it.
    """
    for sec in ("doppler", "probe", "environment", "scan"):
        if sec not in mapping:
            raise ConfigError(f"{sec}: missing required section")

    doppler = _parse_laser(mapping["doppler"], "doppler")
    probe = _parse_laser(mapping["probe"], "probe")
    repumper = None
    if "repumper" in mapping:
        repumper = _parse_laser(mapping["repumper"], "repumper")

    env_sec = mapping["environment"]
    try:
        environment = Environment(
            b_gauss=_get_float(env_sec, "b_gauss", "environment"),
            temperature=_get_float(env_sec, "temperature_mk", "environment",
                                   required=False, default=0.0) * 1e-3,
        )
    except ValueError as exc:
        raise ConfigError(f"environment: {exc}") from None

    scan_sec = mapping["scan"]
    start = _get_float(scan_sec, "start_mhz", "scan")
    stop = _get_float(scan_sec, "stop_mhz", "scan")
    step = _get_float(scan_sec, "step_mhz", "scan")
    if step <= 0:
        raise ConfigError(f"scan.step_mhz: must be positive, got {step}")
    if stop <= start:
        raise ConfigError(f"scan.stop_mhz: must exceed start_mhz ({start} >= {stop})")
    n = int(round((stop - start) / step)) + 1
    grid = (start + step * np.arange(n)) * MHZ

    scale, offset = 1.0, 0.0
    if "detector" in mapping:
        det = mapping["detector"]
        scale = _get_float(det, "scale", "detector", required=False, default=1.0)
        offset = _get_float(det, "offset", "detector", required=False, default=0.0)
        if scale <= 0:
            raise ConfigError(f"detector.scale: must be positive, got {scale}")

    try:
        return ExperimentConfig(
            doppler=doppler,
            probe=probe,
            repumper=repumper,
            environment=environment,
            grid=grid,
            scale=scale,
            offset=offset,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    """Load an experiment config from an INI file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"{path}: cannot read config file")
    mapping = {sec: dict(parser[sec]) for sec in parser.sections()}
    return parse_mapping(mapping)


def _polarization_fields(pol: Polarization) -> dict:
    a_minus, a_zero, a_plus = pol.spherical()
    # Linear polarizations (the only ones we normalize back to text) have
    # a real pi component and opposite-sign sigma components.
    angle = np.degrees(np.arctan2(abs(a_minus) * np.sqrt(2.0), a_zero.real))
    if angle < 1e-9:
        return {"polarization": "pi"}
    if angle > 90.0 - 1e-9:
        return {"polarization": "sigma+-"}
    return {"polarization": "linear", "polarization_angle_deg": _fmt(angle)}


def _laser_fields(laser: LaserField) -> dict:
    fields = {
        "saturation": _fmt(laser.saturation),
        "detuning_mhz": _fmt(laser.detuning / MHZ),
    }
    fields.update(_polarization_fields(laser.polarization))
    if laser.linewidth:
        fields["linewidth_khz"] = _fmt(laser.linewidth / KHZ)
    if tuple(laser.k_hat) != (0.0, 1.0, 0.0):
        fields["k_hat"] = " ".join(_fmt(c) for c in laser.k_hat)
    return fields


def config_to_mapping(cfg: ExperimentConfig) -> dict:
    """Normalized {section: {field: str}} snapshot of a config.

    ``parse_mapping(config_to_mapping(cfg))`` reproduces cfg up to float
    formatting; normalization is idempotent.
    """
    grid_mhz = np.asarray(cfg.grid) / MHZ
    step = float(grid_mhz[1] - grid_mhz[0])
    mapping = {
        "doppler": _laser_fields(cfg.doppler),
        "probe": _laser_fields(cfg.probe),
        "environment": {
            "b_gauss": _fmt(cfg.environment.b_gauss),
            "temperature_mk": _fmt(cfg.environment.temperature * 1e3),
        },
        "detector": {"scale": _fmt(cfg.scale), "offset": _fmt(cfg.offset)},
        "scan": {
            "start_mhz": _fmt(grid_mhz[0]),
            "stop_mhz": _fmt(grid_mhz[-1]),
            "step_mhz": _fmt(step),
        },
    }
    if cfg.repumper is not None:
        mapping["repumper"] = _laser_fields(cfg.repumper)
    return mapping


def write_config(path, cfg: ExperimentConfig) -> None:
    """Write a config back out as INI (normalized form)."""
    parser = configparser.ConfigParser()
    for sec, fields in config_to_mapping(cfg).items():
        parser[sec] = fields
    with open(path, "w") as fh:
        parser.write(fh)


def stable_hash(mapping) -> str:
    """Short content hash of a nested str mapping (order-insensitive)."""
    lines = []
    for sec in sorted(mapping):
        for key in sorted(mapping[sec]):
            lines.append(f"{sec}.{key}={mapping[sec][key]}")
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    return digest[:16]


# ---------------------------------------------------------------------------
# Spectrum CSV


def write_spectrum_csv(path, curve: SpectrumCurve, cfg: ExperimentConfig | None = None,
                       *, manifest_hash: str | None = None,
                       minima_mhz=None, extra_meta: dict | None = None) -> None:
    """Write a spectrum with config header and minima/manifest footer."""
    lines = []
    if cfg is not None:
        for sec, fields in config_to_mapping(cfg).items():
            for key, value in fields.items():
                lines.append(f"# {sec}.{key}={value}")
    for key, value in (extra_meta or {}).items():
        lines.append(f"# {key}={value}")
    lines.append("detuning_mhz,fluorescence,flag")
    flags = curve.flags
    for x, y, f in zip(curve.detunings / MHZ, curve.values, flags):
        lines.append(f"{_fmt(x)},{_fmt(y)},{int(f)}")
    if minima_mhz is not None:
        lines.append("# minima_mhz=" + ";".join(_fmt(m) for m in minima_mhz))
    if manifest_hash is not None:
        lines.append(f"# manifest={manifest_hash}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_spectrum_csv(path):
    """Read a spectrum CSV.

    Returns (detunings rad/s, values, flags, metadata dict).  Header
    ``# sec.key=value`` lines land in metadata under nested keys, footer
    entries under their plain names.
    """
    meta: dict = {}
    xs, ys, fs = [], [], []
    saw_header = False
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            continue
        if line.startswith("detuning_mhz"):
            saw_header = True
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ConfigError(f"{path}: malformed data row {line!r}")
        xs.append(float(parts[0]))
        ys.append(float(parts[1]))
        fs.append(int(parts[2]))
    if not saw_header or not xs:
        raise ConfigError(f"{path}: no spectrum data found")
    return np.array(xs) * MHZ, np.array(ys), np.array(fs), meta


def config_from_metadata(meta: dict) -> ExperimentConfig:
    """Rebuild the generating config from CSV-header metadata."""
    mapping: dict = {}
    for key, value in meta.items():
        if "." not in key:
            continue
        sec, field = key.split(".", 1)
        mapping.setdefault(sec, {})[field] = value
    return parse_mapping(mapping)


# ---------------------------------------------------------------------------
# Fit reports and calibration tables


def write_fit_report(path, result, *, manifest_hash: str | None = None) -> None:
    """Write a fit result as a small CSV: one row per parameter, then a
    convergence block as comments."""
    lines = ["parameter,estimate,sigma,lower,upper"]
    for name in result.names:
        lo, hi = result.bounds[name]
        lines.append(
            f"{name},{_fmt(result.estimates[name])},{_fmt(result.uncertainties[name])},"
            f"{_fmt(lo)},{_fmt(hi)}"
        )
    lines.append(f"# converged={result.converged}")
    lines.append(f"# iterations={result.n_iter}")
    lines.append(f"# cost={_fmt(result.cost)}")
    lines.append(f"# initial_cost={_fmt(result.initial_cost)}")
    lines.append(f"# message={result.message}")
    for key, value in sorted(result.flags.items()):
        lines.append(f"# flag.{key}={value}")
    if manifest_hash is not None:
        lines.append(f"# manifest={manifest_hash}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_calibration_csv(path, calib) -> None:
    """Write a kicking calibration (alpha grid vs four resonance depths)."""
    lines = [f"# config_hash={calib.config_hash}"]
    for key, value in sorted(calib.meta.items()):
        lines.append(f"# {key}={value}")
    lines.append("alpha_deg,depth1,depth2,depth3,depth4")
    for alpha, row in zip(calib.alphas_deg, calib.depths):
        lines.append(",".join([_fmt(alpha)] + [_fmt(d) for d in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_calibration_csv(path):
    """Read a calibration table back; returns a KickingCalibration."""
    from .inference import KickingCalibration

    config_hash = ""
    meta: dict = {}
    alphas, rows = [], []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("alpha_deg"):
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                if key.strip() == "config_hash":
                    config_hash = value.strip()
                else:
                    meta[key.strip()] = value.strip()
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ConfigError(f"{path}: malformed calibration row {line!r}")
        alphas.append(float(parts[0]))
        rows.append([float(p) for p in parts[1:]])
    if not alphas:
        raise ConfigError(f"{path}: no calibration data found")
    return KickingCalibration(
        alphas_deg=np.array(alphas),
        depths=np.array(rows),
        config_hash=config_hash,
        meta=meta,
    )
