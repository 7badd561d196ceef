"""Per-pixel patch feature vectors and Euclidean feature distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import pdist, squareform

from .errors import DimensionMismatch, PatchOutOfBounds
from .imageio import FrameSequence


@dataclass(frozen=True)
class ValidDomain:
    """Pixels at least ``radius`` away from every border.

    Stored as the half-open rectangle ``x0 <= x < x1``, ``y0 <= y < y1``;
    x indexes columns and y indexes rows.
    """

    x0: int
    y0: int
    x1: int
    y1: int

    @classmethod
    def for_shape(cls, shape: tuple[int, int], patch_size: int) -> "ValidDomain":
        h, w = shape
        r = patch_size // 2
        if h < patch_size or w < patch_size:
            raise PatchOutOfBounds(f"image {h}x{w} is smaller than patch {patch_size}")
        return cls(r, r, w - r, h - r)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def pixels(self) -> np.ndarray:
        """All valid pixels as an (n, 2) array of (x, y), row-major."""
        ys, xs = np.mgrid[self.y0:self.y1, self.x0:self.x1]
        return np.column_stack([xs.ravel(), ys.ravel()])

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m

    def as_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}


@dataclass(frozen=True)
class FeatureSeries:
    pixel: tuple[int, int]
    vectors: np.ndarray
    patch_size: int

    @property
    def n_frames(self) -> int:
        return self.vectors.shape[0]


def _check_pixel(shape, pixel, patch_size):
    h, w = shape
    x, y = pixel
    r = patch_size // 2
    if not (r <= x < w - r and r <= y < h - r):
        raise PatchOutOfBounds(
            f"pixel {pixel} is closer than {r} pixels to the border of a {h}x{w} image"
        )


def extract_features(seq: FrameSequence, pixel: tuple[int, int], patch_size: int) -> FeatureSeries:
    """Row i holds the patch around ``pixel`` in frame i, flattened row-major."""
    frames = seq.frames if isinstance(seq, FrameSequence) else np.asarray(seq)
    x, y = int(pixel[0]), int(pixel[1])
    _check_pixel(frames.shape[1:], (x, y), patch_size)
    r = patch_size // 2
    patch = frames[:, y - r:y + r + 1, x - r:x + r + 1]
    vectors = np.ascontiguousarray(patch.reshape(frames.shape[0], -1))
    return FeatureSeries((x, y), vectors, patch_size)


def feature_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"feature vectors differ in length: {a.size} vs {b.size}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pairwise_distance_matrix(fs: FeatureSeries | np.ndarray) -> np.ndarray:
    vectors = fs.vectors if isinstance(fs, FeatureSeries) else np.asarray(fs, dtype=np.float64)
    if vectors.shape[0] < 2:
        raise DimensionMismatch("need at least 2 feature vectors")
    return squareform(pdist(vectors, "euclidean"))


def consecutive_distances(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """‖F_i - F_{i+1}‖ for every valid pixel.

    Returns an array of shape (N - 1, H - 2r, W - 2r) aligned with the valid
    domain of ``frames``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    sq = (frames[:-1] - frames[1:]) ** 2
    win = sliding_window_view(sq, (patch_size, patch_size), axis=(1, 2))
    return np.sqrt(win.sum(axis=(-2, -1)))
