"""Command-line interface: simulate, cross-check, fit, calibrate.

Exit codes: 0 success, 1 hard failure (bad config, solver/fit failure),
2 soft failure (warnings such as calibration extrapolation, or usage
errors).

Thread control: ``--threads N`` (or the DARKRES_THREADS environment
variable) caps BLAS parallelism.  The cap works by setting the usual
OMP/BLAS environment variables, which only take effect before numpy is
first imported -- hence every heavy import in this module is deferred
into the command functions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK = 0
EXIT_HARD = 1
EXIT_SOFT = 2

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _set_threads(n) -> None:
    if n is None:
        n = os.environ.get("DARKRES_THREADS")
    if n is None:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


@dataclass
class RunManifest:
    """Record of one CLI run; its hash ties artifacts to their provenance.

    The hash covers command, config snapshot, seed and engine version --
    deliberately not paths or wall time, so re-running the same physics
    yields byte-identical data artifacts.
    """

    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int | None = None
    version: str = ""
    wall_time_s: float = 0.0

    def hash(self) -> str:
        from .io import stable_hash

        mapping = dict(self.config)
        mapping["run"] = {
            "command": self.command,
            "seed": "" if self.seed is None else str(self.seed),
            "version": self.version,
        }
        return stable_hash(mapping)

    def write(self, path) -> None:
        payload = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "version": self.version,
            "wall_time_s": round(self.wall_time_s, 3),
            "hash": self.hash(),
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _manifest(command, cfg, *, seed=None, inputs=None, outputs=None, t0=None) -> RunManifest:
    from . import __version__
    from .io import config_to_mapping

    return RunManifest(
        command=command,
        config=config_to_mapping(cfg) if cfg is not None else {},
        inputs={k: str(v) for k, v in (inputs or {}).items()},
        outputs={k: str(v) for k, v in (outputs or {}).items()},
        seed=seed,
        version=__version__,
        wall_time_s=0.0 if t0 is None else time.perf_counter() - t0,
    )


def _load_config_or_fail(path):
    from .io import ConfigError, load_config

    try:
        return load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_HARD)


# ---------------------------------------------------------------------------
# spectrum


def cmd_spectrum(args) -> int:
    t0 = time.perf_counter()
    import numpy as np

    from .io import write_spectrum_csv
    from .spectra import FLAG_SOLVER, MHZ, dd_scan, find_minima, probe_scan

    cfg = _load_config_or_fail(args.config)
    rep_in_window = (cfg.repumper is not None
                     and cfg.grid[0] <= cfg.repumper.detuning <= cfg.grid[-1])
    curve = dd_scan(cfg) if rep_in_window else probe_scan(cfg)

    minima_mhz = curve.detunings[find_minima(curve)] / MHZ
    extra = {}
    if args.poisson_seed is not None:
        from .spectra import poisson_counts

        curve = poisson_counts(curve, seed=args.poisson_seed)
        extra = {"noise": "poisson", "seed": str(args.poisson_seed)}

    manifest = _manifest("spectrum", cfg, seed=args.poisson_seed,
                         inputs={"config": args.config},
                         outputs={"csv": args.out}, t0=t0)
    write_spectrum_csv(args.out, curve, cfg, manifest_hash=manifest.hash(),
                       minima_mhz=minima_mhz, extra_meta=extra)
    manifest.write(str(args.out) + ".manifest.json")

    if args.plot:
        from .plotting import plot_spectrum

        svg = Path(args.out).with_suffix(".svg")
        plot_spectrum(svg, curve, minima_mhz=minima_mhz,
                      description=f"manifest={manifest.hash()}")

    n_failed = int(np.count_nonzero(curve.flags == FLAG_SOLVER))
    n_total = curve.detunings.size
    print(f"wrote {args.out}: {n_total} points, "
          f"{minima_mhz.size} minima at {np.round(minima_mhz, 3).tolist()} MHz")
    if n_failed:
        print(f"warning: {n_failed} of {n_total} points failed to solve", file=sys.stderr)
        return EXIT_HARD
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle-check


def cmd_oracle_check(args) -> int:
    from dataclasses import replace

    import numpy as np

    from .floquet import averaged_steady_state
    from .liouville import build_liouvillian_set, period_averaged_state
    from .spectra import MHZ, excited_population

    cfg = _load_config_or_fail(args.config)
    idx = np.unique(np.linspace(0, cfg.grid.size - 1, args.points).astype(int))
    print(f"{'detuning_mhz':>14} {'averaged':>14} {'ode_mean':>14} {'abs_diff':>12}")
    worst = 0.0
    for i in idx:
        probe = replace(cfg.probe, detuning=float(cfg.grid[i]))
        lset = build_liouvillian_set(cfg.doppler, probe, cfg.repumper,
                                     cfg.environment)
        avg = averaged_steady_state(lset)
        if avg.degenerate:
            print(f"{cfg.grid[i] / MHZ:14.4f} {'(degenerate tones; no finite period)':>42}")
            continue
        f_avg = cfg.scale * excited_population(avg.rho0) + cfg.offset
        # seeding at the averaged state only shortens the transient; the ODE
        # still relaxes to its own attractor and would drift off a wrong seed
        block_tol = min(1e-6, max(args.tol / 100.0, 1e-9))
        rho_ode = period_averaged_state(lset, rho0=avg.rho0, block_tol=block_tol)
        f_ode = cfg.scale * excited_population(rho_ode) + cfg.offset
        diff = abs(f_avg - f_ode)
        worst = max(worst, diff)
        print(f"{cfg.grid[i] / MHZ:14.4f} {f_avg:14.8g} {f_ode:14.8g} {diff:12.3e}")
    if worst < args.tol:
        print(f"PASS: max deviation {worst:.3e} < tolerance {args.tol:g}")
        return EXIT_OK
    print(f"FAIL: max deviation {worst:.3e} >= tolerance {args.tol:g}")
    return EXIT_HARD


# ---------------------------------------------------------------------------
# fit


def _sigmas_from_meta(values, meta):
    import numpy as np

    if meta.get("noise") == "poisson":
        return np.sqrt(np.maximum(values, 1.0))
    return None


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    from .inference import PARAMETER_NAMES, FitError, FitProblem, fit_spectrum
    from .io import ConfigError, read_spectrum_csv, write_fit_report

    cfg = _load_config_or_fail(args.config)
    try:
        detunings, values, _, meta = read_spectrum_csv(args.data)
    except (ConfigError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_HARD

    free = tuple(p.strip() for p in args.free.split(",") if p.strip())
    bad = [p for p in free if p not in PARAMETER_NAMES]
    if bad:
        print(f"unknown free parameter(s) {', '.join(bad)}; "
              f"valid names: {', '.join(PARAMETER_NAMES)}", file=sys.stderr)
        return EXIT_SOFT

    try:
        problem = FitProblem(
            detunings=detunings, observed=values, template=cfg, free=free,
            sigmas=_sigmas_from_meta(values, meta),
        )
        result = fit_spectrum(problem, max_iter=args.max_iter)
    except FitError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_HARD

    manifest = _manifest("fit", cfg, inputs={"data": args.data, "config": args.config},
                         outputs={"report": args.out}, t0=t0)
    write_fit_report(args.out, result, manifest_hash=manifest.hash())
    manifest.write(str(args.out) + ".manifest.json")
    print(result.summary())
    if not result.converged:
        print("fit did not converge; diagnostics preserved in the report",
              file=sys.stderr)
        return EXIT_HARD
    return EXIT_OK


# ---------------------------------------------------------------------------
# polarimetry


def cmd_polarimetry(args) -> int:
    t0 = time.perf_counter()
    if args.mode == "probe":
        return _polarimetry_probe(args, t0)
    return _polarimetry_kicking(args, t0)


def _polarimetry_probe(args, t0) -> int:
    from .inference import FitError, estimate_probe_angle
    from .io import ConfigError, read_spectrum_csv, write_fit_report

    cfg = _load_config_or_fail(args.config)
    try:
        detunings, values, _, meta = read_spectrum_csv(args.data)
        result = estimate_probe_angle(detunings, values, cfg,
                                      sigmas=_sigmas_from_meta(values, meta))
    except (ConfigError, FitError, OSError) as exc:
        print(f"polarimetry error: {exc}", file=sys.stderr)
        return EXIT_HARD

    alpha = result.estimates["alpha_pr_deg"]
    sigma = result.uncertainties["alpha_pr_deg"]
    print(f"alpha_pr = {alpha:.2f} +- {sigma:.2f} deg")
    if args.out:
        manifest = _manifest("polarimetry-probe", cfg,
                             inputs={"data": args.data, "config": args.config},
                             outputs={"report": args.out}, t0=t0)
        write_fit_report(args.out, result, manifest_hash=manifest.hash())
        manifest.write(str(args.out) + ".manifest.json")
    if result.flags.get("non_identifiable"):
        print("warning: angle not identifiable from these data "
              "(flat spectrum; is the repumper off?)", file=sys.stderr)
        return EXIT_SOFT
    if not result.converged:
        return EXIT_HARD
    return EXIT_OK


def _polarimetry_kicking(args, t0) -> int:
    from .inference import calibration_hash, estimate_repumper_angle
    from .io import ConfigError, read_calibration_csv

    try:
        calib = read_calibration_csv(args.calibration)
    except (ConfigError, OSError) as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_HARD

    if args.config:
        cfg = _load_config_or_fail(args.config)
        if calib.config_hash and calibration_hash(cfg) != calib.config_hash:
            print("calibration/config mismatch: hashes differ "
                  f"({calib.config_hash} vs {calibration_hash(cfg)})", file=sys.stderr)
            return EXIT_HARD

    try:
        depths = [float(d) for d in args.depths.split(",")]
    except ValueError:
        print(f"cannot parse --depths {args.depths!r}: expected four numbers",
              file=sys.stderr)
        return EXIT_SOFT
    if len(depths) != 4:
        print("expected exactly four comma-separated depths", file=sys.stderr)
        return EXIT_SOFT

    est = estimate_repumper_angle(depths, calib)
    print(f"alpha_rep = {est.alpha_deg:.2f} +- {est.sigma_deg:.2f} deg")
    if args.out:
        lines = [
            "quantity,value",
            f"alpha_rep_deg,{est.alpha_deg:.6g}",
            f"sigma_deg,{est.sigma_deg:.6g}",
        ]
        for key, value in sorted(est.flags.items()):
            lines.append(f"# flag.{key}={value}")
        Path(args.out).write_text("\n".join(lines) + "\n")
    if est.flags.get("extrapolation"):
        print("warning: observed depths fall outside the calibrated range",
              file=sys.stderr)
        return EXIT_SOFT
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate


def cmd_calibrate(args) -> int:
    import numpy as np

    from .inference import FitError, build_kicking_calibration
    from .io import write_calibration_csv

    cfg = _load_config_or_fail(args.config)
    alphas = np.arange(0.0, 90.0 + 1e-9, args.step)
    if alphas[-1] < 90.0:
        alphas = np.append(alphas, 90.0)
    try:
        calib = build_kicking_calibration(cfg, alphas_deg=alphas)
    except FitError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_HARD
    write_calibration_csv(args.out, calib)
    print(f"wrote {args.out}: {alphas.size} angles x 4 resonance depths "
          f"(config hash {calib.config_hash})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="darkres",
        description="Dark-resonance spectra of the eight-level Ca+ system: "
                    "simulate, cross-check, fit, calibrate.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (also: DARKRES_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", help="simulate a probe-detuning scan to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true", help="also write an SVG next to the CSV")
    p.add_argument("--poisson-seed", type=int, default=None,
                   help="replace values with Poisson counts drawn at this seed")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("oracle-check",
                       help="compare averaged solver against ODE time averaging")
    p.add_argument("--config", required=True)
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("fit", help="least-squares fit of a spectrum CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="template config with initial values")
    p.add_argument("--free", required=True, help="comma-separated parameter names")
    p.add_argument("--out", required=True)
    p.add_argument("--max-iter", type=int, default=100)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("polarimetry", help="estimate a polarization angle")
    psub = p.add_subparsers(dest="mode", required=True)
    pp = psub.add_parser("probe", help="fit the probe angle to a spectrum")
    pp.add_argument("--data", required=True)
    pp.add_argument("--config", required=True)
    pp.add_argument("--out", default=None)
    pp.set_defaults(func=cmd_polarimetry, mode="probe")
    pk = psub.add_parser("kicking", help="invert resonance depths via a calibration")
    pk.add_argument("--depths", required=True, help="four comma-separated depths")
    pk.add_argument("--calibration", required=True)
    pk.add_argument("--config", default=None, help="verify calibration hash against this config")
    pk.add_argument("--out", default=None)
    pk.set_defaults(func=cmd_polarimetry, mode="kicking")

    p = sub.add_parser("calibrate", help="build a kicking-polarimetry calibration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--step", type=float, default=5.0, help="alpha grid step in degrees")
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage error or --help
        return exc.code if isinstance(exc.code, int) else EXIT_SOFT
    _set_threads(args.threads)
    try:
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_HARD


if __name__ == "__main__":
    sys.exit(main())
