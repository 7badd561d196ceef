"""Evaluation of recovered displacement against known offsets and reference signals.

Estimates are defined only up to a global sign and scale, so every comparison
here either min-max scales or normalizes first and picks the better sign.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConstantSignal, DimensionMismatch, NoPropagationDetected


def minmax_scale(signal) -> np.ndarray:
    s = np.asarray(signal, dtype=np.float64)
    lo, hi = s.min(), s.max()
    span = hi - lo
    if not span > 1e-12 * max(abs(lo), abs(hi), 1e-300):
        raise ConstantSignal("cannot min-max scale a constant signal")
    return (s - lo) / span


def linearity(d_est, offsets) -> tuple[float, float]:
    """(RMSE, Pearson r) of min-max scaled estimate vs. scaled offsets, better sign."""
    d = np.asarray(d_est, dtype=np.float64)
    t = np.asarray(offsets, dtype=np.float64)
    if d.shape != t.shape:
        raise DimensionMismatch(f"{d.shape} estimates for {t.shape} offsets")
    if np.unique(t).size < 3:
        raise ConstantSignal("need at least 3 distinct offsets")
    ts = minmax_scale(t)
    ds = minmax_scale(d)
    best = min((np.sqrt(np.mean((s - ts) ** 2)), s) for s in (ds, 1.0 - ds))
    return float(best[0]), float(np.corrcoef(best[1], ts)[0, 1])


def linearity_rmse(d_est, offsets) -> float:
    return linearity(d_est, offsets)[0]


def ncc(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise DimensionMismatch(f"ncc needs equal-length 1-D sequences, got {a.shape} and {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ConstantSignal("ncc of a constant sequence")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def aligned_ncc(est, ref) -> tuple[np.ndarray, int]:
    """Per-row NCC after choosing the single global sign that maximizes the median."""
    est = np.atleast_2d(est)
    ref = np.atleast_2d(ref)
    vals = np.array([ncc(a, b) for a, b in zip(est, ref)])
    sign = 1 if np.median(vals) >= 0 else -1
    return sign * vals, sign


def power_spectrum(d, frame_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """(frequencies in Hz, |DFT|^2 of the mean-removed series) over the last axis.

    The one-sided power folds negative frequencies in, so the sum over bins
    equals N times the variance (Parseval).
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[-1]
    if n < 8:
        raise DimensionMismatch(f"power spectrum needs N >= 8, got {n}")
    x = d - d.mean(axis=-1, keepdims=True)
    power = np.abs(np.fft.rfft(x, axis=-1)) ** 2 / n
    # fold in the mirrored half; DC and (even N) Nyquist appear once
    power[..., 1:(n + 1) // 2] *= 2.0
    return np.fft.rfftfreq(n, 1.0 / frame_rate), power


def spectral_peaks(d, frame_rate: float) -> np.ndarray:
    """Frequency of the largest non-DC bin per series."""
    f, p = power_spectrum(d, frame_rate)
    return f[1 + np.argmax(p[..., 1:], axis=-1)]


def _shift_1d(a: np.ndarray, b: np.ndarray, reg: float = 0.1) -> float | None:
    """Sub-sample shift s such that b(x) ~ a(x - s), by phase correlation.

    Zero padding avoids wrap-around; whitening is regularized by ``reg``
    times the peak cross-power so bins without signal are not amplified.
    """
    n = a.size
    fa = np.fft.rfft(a, 2 * n)
    fb = np.fft.rfft(b, 2 * n)
    cross = fb * np.conj(fa)
    mag = np.abs(cross)
    if mag.max() <= 1e-12 * max(np.sum(a ** 2) * np.sum(b ** 2), 1e-300) or mag.max() == 0:
        return None
    r = np.fft.irfft(cross / (mag + reg * mag.max()), 2 * n)
    # a sign flip between frames (oscillation) gives a negative peak
    r = np.abs(r)
    k = int(np.argmax(r))
    y0, y1, y2 = r[k - 1], r[k], r[(k + 1) % r.size]
    denom = y0 - 2 * y1 + y2
    frac = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
    s = k + frac
    return s - r.size if s > r.size / 2 else s


def _profiles(maps: np.ndarray, axis: str) -> np.ndarray:
    prof = maps.mean(axis=1) if axis == "column" else maps.mean(axis=2)
    return prof - np.median(prof, axis=0, keepdims=True)


def wavefront_speed(maps, axis: str = "column", mask=None, min_energy: float = 0.5,
                    inlier_tol: float = 0.25, standardize: bool = True, sd_floor: float = 0.1) -> float:
    """Propagation speed in pixels/frame of a traveling disturbance.

    Each frame is collapsed to a 1-D profile along ``axis`` (mean over the
    other axis, restricted to ``mask``) and the per-position temporal median
    is removed. Consecutive profiles whose energy is at least ``min_energy``
    of the peak are aligned by phase correlation. Pairs while the disturbance
    is entering or leaving the view yield truncated, non-translating profiles,
    so only pairs within ``inlier_tol`` (relative) of the median shift are
    kept. The speed is the least-squares slope of the cumulative wavefront
    position vs. frame index over the longest consecutive run of such pairs.

    With ``standardize`` each pixel's series is reduced to zero mean and unit
    variance before shifts are measured (the deviation is floored at
    ``sd_floor`` of its maximum); liveness is still judged on the raw
    profiles. A traveling pulse gives every pixel the same time course, so
    this is exact on clean data. It also removes spatially varying gain in an
    estimate, which would otherwise drag the profile centroid toward
    high-gain pixels.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3:
        raise DimensionMismatch(f"maps must be N x H x W, got {maps.shape}")
    if axis not in ("row", "column"):
        raise ValueError(f"axis must be 'row' or 'column', got {axis!r}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise NoPropagationDetected("mask is empty")
        maps = maps[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    prof = _profiles(maps, axis)
    energy = np.sum((prof - prof.mean(axis=1, keepdims=True)) ** 2, axis=1)
    if not energy.max() > 1e-20 * max(np.abs(maps).max() ** 2, 1e-300) * prof.shape[1]:
        raise NoPropagationDetected("maps are static")
    live = energy >= min_energy * energy.max()
    if standardize:
        sd = maps.std(axis=0)
        # pixels the disturbance barely reaches are not blown up
        sd = np.maximum(sd, sd_floor * sd.max())
        prof = _profiles((maps - maps.mean(axis=0)) / sd, axis)
    frames, shifts = [], []
    for i in range(prof.shape[0] - 1):
        if live[i] and live[i + 1]:
            s = _shift_1d(prof[i], prof[i + 1])
            if s is not None:
                frames.append(i)
                shifts.append(s)
    if len(shifts) < 2:
        raise NoPropagationDetected("fewer than two frame pairs carry a disturbance")
    frames = np.asarray(frames)
    shifts = np.asarray(shifts)
    med = float(np.median(shifts))
    if abs(med) < 1e-2:
        raise NoPropagationDetected("disturbance does not move between frames")
    keep = np.abs(shifts - med) <= inlier_tol * abs(med)
    frames, shifts = frames[keep], shifts[keep]
    breaks = np.flatnonzero(np.diff(frames) != 1) + 1
    run = max(np.split(np.arange(len(frames)), breaks), key=len)
    if len(run) < 2:
        return med
    pos = np.concatenate([[0.0], np.cumsum(shifts[run])])
    idx = np.concatenate([[frames[run[0]]], frames[run] + 1])
    return float(np.polyfit(idx, pos, 1)[0])


@dataclass
class EvalReport:
    linearity_rmse: float | None = None
    linearity_r: float | None = None
    ncc: dict = field(default_factory=dict)
    spectral_peak_hz: dict = field(default_factory=dict)
    wave_speed: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / "report.json"
        jpath.write_text(self.to_json() + "\n")
        cpath = out / "report.csv"
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "key", "value"])
            for name in ("linearity_rmse", "linearity_r", "wave_speed"):
                value = getattr(self, name)
                if value is not None:
                    w.writerow([name, "", repr(float(value))])
            for group in ("ncc", "spectral_peak_hz"):
                for key, value in getattr(self, group).items():
                    w.writerow([group, key, repr(float(value))])
        return jpath, cpath


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def read_reference_csv(path, column: str | int | None = None) -> np.ndarray:
    """One reference signal from a CSV file (header optional; default last column)."""
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    rows = [r for r in rows if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise DimensionMismatch(f"{path}: empty reference file")
    header = None
    try:
        float(rows[0][-1])
    except ValueError:
        header, rows = rows[0], rows[1:]
    if isinstance(column, str):
        if header is None or column not in header:
            raise DimensionMismatch(f"{path}: no column named {column!r}")
        column = header.index(column)
    col = -1 if column is None else int(column)
    return np.array([float(r[col]) for r in rows])
