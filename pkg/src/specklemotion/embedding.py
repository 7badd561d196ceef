"""Diffusion-map embedding of each pixel's sequence of patch feature vectors."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from threadpoolctl import threadpool_limits

from .config import PipelineConfig
from .errors import DimensionMismatch, EigSolveFailure, PatchOutOfBounds
from .features import ValidDomain, extract_features, pairwise_distance_matrix
from .imageio import FrameSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """Regular pixel lattice: ``x = x0 + stride * col``, ``y = y0 + stride * row``."""

    x0: int
    y0: int
    stride: int
    nx: int
    ny: int

    @classmethod
    def over(cls, domain: ValidDomain, stride: int = 1) -> "Grid":
        nx = (domain.width - 1) // stride + 1
        ny = (domain.height - 1) // stride + 1
        return cls(domain.x0, domain.y0, stride, nx, ny)

    @classmethod
    def single(cls, x: int, y: int) -> "Grid":
        return cls(x, y, 1, 1, 1)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return self.ny, self.nx

    def pixels(self) -> np.ndarray:
        """(size, 2) array of (x, y), row-major over the lattice."""
        rows, cols = np.mgrid[0:self.ny, 0:self.nx]
        return np.column_stack([self.x0 + self.stride * cols.ravel(),
                                self.y0 + self.stride * rows.ravel()])

    def xs(self) -> np.ndarray:
        return self.x0 + self.stride * np.arange(self.nx)

    def ys(self) -> np.ndarray:
        return self.y0 + self.stride * np.arange(self.ny)

    def as_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "stride": self.stride, "nx": self.nx, "ny": self.ny}


@dataclass
class EmbeddingField:
    grid: Grid
    coords: np.ndarray  # (size, N, l)
    degenerate: np.ndarray  # (size,) bool
    eigenvalues: np.ndarray | None = None  # (size, l)

    @property
    def l(self) -> int:
        return self.coords.shape[2]

    @property
    def n_frames(self) -> int:
        return self.coords.shape[1]

    def with_coords(self, coords: np.ndarray) -> "EmbeddingField":
        return EmbeddingField(self.grid, coords, self.degenerate.copy(), self.eigenvalues)


def _bandwidth(D: np.ndarray, mult: float) -> float:
    off = D[~np.eye(D.shape[0], dtype=bool)]
    sigma = np.median(off)
    if sigma <= 0:
        # more than half the frame pairs identical (static, noise-free patches)
        positive = off[off > 0]
        sigma = np.median(positive) if positive.size else 0.0
    return mult * float(sigma)


def diffusion_map_eig(D, l: int, bandwidth_mult: float = 1.0) -> tuple[np.ndarray, np.ndarray, bool]:
    """Diffusion map returning (coords N x l, eigenvalues l, degenerate flag).

    Gaussian kernel ``exp(-D^2 / sigma^2)`` with ``sigma`` the median
    off-diagonal distance times ``bandwidth_mult``, row-normalized to a Markov
    matrix P. The right eigenvectors of P are obtained from the symmetric
    conjugate ``Q^-1/2 W Q^-1/2`` and normalized to unit length; the trivial
    constant eigenvector is dropped and each remaining column is scaled by its
    eigenvalue. Each column's largest-magnitude entry is made positive.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if D.ndim != 2 or D.shape[1] != n:
        raise DimensionMismatch(f"distance matrix must be square, got {D.shape}")
    if n <= l:
        raise DimensionMismatch(f"need more frames than embedding dimensions ({n} <= {l})")
    sigma = _bandwidth(D, bandwidth_mult)
    if sigma <= 0 or not np.isfinite(sigma):
        return np.zeros((n, l)), np.zeros(l), True
    W = np.exp(-(D / sigma) ** 2)
    q = W.sum(axis=1)
    iq = 1.0 / np.sqrt(q)
    S = W * iq[:, None] * iq[None, :]
    S = 0.5 * (S + S.T)
    try:
        evals, evecs = sla.eigh(S, subset_by_index=[n - l - 1, n - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigSolveFailure(str(exc)) from exc
    evals = evals[::-1][1:]
    vecs = (evecs[:, ::-1] * iq[:, None])[:, 1:]
    vecs /= np.linalg.norm(vecs, axis=0)
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(l)])
    signs[signs == 0] = 1.0
    vecs *= signs
    return vecs * evals, evals, False


def diffusion_map(D, l: int, bandwidth_mult: float = 1.0) -> np.ndarray:
    return diffusion_map_eig(D, l, bandwidth_mult)[0]


def _embed_pixels(frames, pixels, patch_size, l, mult):
    out = np.empty((len(pixels), frames.shape[0], l))
    evals = np.empty((len(pixels), l))
    flags = np.zeros(len(pixels), dtype=bool)
    for j, (x, y) in enumerate(pixels):
        fs = extract_features(frames, (x, y), patch_size)
        out[j], evals[j], flags[j] = diffusion_map_eig(pairwise_distance_matrix(fs), l, mult)
    return out, evals, flags


def embed_all(seq: FrameSequence, cfg: PipelineConfig, grid: Grid, threads: int | None = None) -> EmbeddingField:
    """Embed every grid pixel independently.

    Work is split into contiguous chunks of pixels; results are written back
    in grid order, so the output does not depend on the number of threads.
    """
    frames = seq.frames if isinstance(seq, FrameSequence) else np.asarray(seq, dtype=np.float64)
    domain = ValidDomain.for_shape(frames.shape[1:], cfg.patch_size)
    pixels = grid.pixels()
    for x, y in (pixels[0], pixels[-1]):
        if not domain.contains(x, y):
            raise PatchOutOfBounds(f"grid pixel {(int(x), int(y))} is outside the valid domain")
    threads = threads or cfg.threads
    chunks = np.array_split(np.arange(len(pixels)), max(1, min(threads * 4, len(pixels))))
    coords = np.empty((len(pixels), frames.shape[0], cfg.embed_dim))
    evals = np.empty((len(pixels), cfg.embed_dim))
    flags = np.zeros(len(pixels), dtype=bool)

    def work(idx):
        return idx, _embed_pixels(frames, pixels[idx], cfg.patch_size, cfg.embed_dim, cfg.bandwidth_mult)

    with threadpool_limits(limits=1):
        if threads == 1:
            results = map(work, chunks)
        else:
            pool = ThreadPoolExecutor(max_workers=threads)
            results = pool.map(work, chunks)
        for idx, (c, e, f) in results:
            coords[idx], evals[idx], flags[idx] = c, e, f
        if threads != 1:
            pool.shutdown()
    if flags.any():
        log.info("%d of %d pixels have degenerate distances", int(flags.sum()), len(flags))
    return EmbeddingField(grid, coords, flags, evals)
