"""Figures for displacement maps, spectra and slice profiles (PNG, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    # fixed metadata so identical inputs give identical files
    "svg.hashsalt": "0",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_map_strip(maps, mask, frames, path, title: str | None = None) -> Path:
    """Selected displacement frames as grayscale images on one shared scale."""
    maps = np.asarray(maps)
    mask = np.asarray(mask, dtype=bool)
    frames = [int(i) for i in frames]
    valid = maps[:, mask] if mask.any() else maps.reshape(len(maps), -1)
    lo, hi = float(valid.min()), float(valid.max())
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(frames), figsize=(1.6 * len(frames), 1.9), squeeze=False)
        for ax, i in zip(axes[0], frames):
            img = np.where(mask, maps[i], np.nan)
            ax.imshow(img, cmap="gray", vmin=lo, vmax=hi, interpolation="nearest")
            ax.set_title(f"frame {i}", fontsize=8)
            ax.set_axis_off()
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_spectrum(freqs, power, path, peak_hz: float | None = None, label: str = "estimate") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(freqs, power, lw=1.0, label=label)
        if peak_hz is not None:
            ax.axvline(peak_hz, color="0.5", ls="--", lw=0.8, label=f"peak {peak_hz:.1f} Hz")
        ax.set_xlabel("frequency [Hz]")
        ax.set_ylabel("power")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_traces(t, series: dict, path, xlabel: str = "frame", ylabel: str = "scaled displacement") -> Path:
    """Overlay of named 1-D series sharing the abscissa ``t``."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for name, y in series.items():
            ax.plot(t, y, lw=1.0, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_slices(maps, mask, frames, path, axis: str = "column") -> Path:
    """Row-averaged (axis='column') or column-averaged profiles of selected frames."""
    maps = np.asarray(maps, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    sub = maps[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    prof = sub.mean(axis=1) if axis == "column" else sub.mean(axis=2)
    pos = cols if axis == "column" else rows
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for i in frames:
            ax.plot(pos, prof[int(i)], lw=1.0, label=f"frame {int(i)}")
        ax.set_xlabel("x [pixel]" if axis == "column" else "y [pixel]")
        ax.set_ylabel("displacement")
        ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def plot_linearity(offsets, scaled, path) -> Path:
    offsets = np.asarray(offsets, dtype=np.float64)
    ideal = (offsets - offsets.min()) / (offsets.max() - offsets.min())
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.2, 3.0))
        ax.plot(offsets, ideal, color="0.6", lw=0.8, label="linear")
        ax.plot(offsets, scaled, "o", ms=3, label="estimate")
        ax.set_xlabel("offset")
        ax.set_ylabel("scaled displacement")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
