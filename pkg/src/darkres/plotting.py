"""SVG plots of spectra with resonance markers.

Output is deterministic: the SVG backend's hash salt is pinned and date
metadata is stripped, so the same curve always yields the same bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "darkres"

import matplotlib.pyplot as plt
import numpy as np

from .spectra import MHZ, SpectrumCurve

__all__ = ["plot_spectrum"]


def plot_spectrum(path, curve: SpectrumCurve, *, resonances=None,
                  minima_mhz=None, title=None, description=None) -> None:
    """Write a spectrum plot to ``path`` as SVG.

    resonances: optional ResonanceSet whose positions are drawn as dashed
    vertical lines; minima_mhz: detected minima drawn as point markers;
    description: embedded in the SVG metadata (e.g. a manifest hash).
    """
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    x = curve.detunings / MHZ
    ax.plot(x, curve.values, lw=1.0, color="tab:blue")
    if resonances is not None:
        for pos in np.atleast_1d(resonances.positions()):
            ax.axvline(pos / MHZ, color="tab:red", ls="--", lw=0.7, alpha=0.7)
    if minima_mhz is not None:
        idx = [int(np.argmin(np.abs(x - m))) for m in np.atleast_1d(minima_mhz)]
        ax.plot(x[idx], curve.values[idx], "v", color="tab:red", ms=5)
    ax.set_xlabel("probe detuning (MHz)")
    ax.set_ylabel("fluorescence")
    if title:
        ax.set_title(title)
    ax.margins(x=0)
    fig.tight_layout()
    metadata = {"Date": None}
    if description:
        metadata["Description"] = str(description)
    fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)
