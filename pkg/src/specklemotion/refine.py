"""Scale initialization, full-resolution transform interpolation and joint refinement.

The refined objective over all per-pixel transforms M is

    J(M) = (1 / n_t) sum_{p, i} (|psi_i(p) - psi_{i+1}(p)| - |F_i(p) - F_{i+1}(p)|)^2
         + lam (1 / n_s) sum_{i, (p1, p2)} E_s(i, p1, p2)

with psi_i(p) = M(p) Psi_i(p); each sum is divided by its number of terms so
that ``lam = 1`` weighs the two on an equal footing. The norm difference is
smoothed as sqrt(|.|^2 + eps^2).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import PipelineConfig
from .consistency import PlaneParams, TransformField, neighbor_pairs, normal_matrix
from .embedding import EmbeddingField, Grid
from .errors import DimensionMismatch, RankDeficient

log = logging.getLogger(__name__)


@dataclass
class DisplacementMap:
    maps: np.ndarray  # (N, H, W)
    mask: np.ndarray  # (H, W) bool
    frame_rate: float | None = None

    @property
    def n_frames(self) -> int:
        return self.maps.shape[0]


def init_scale(pp: PlaneParams, feature_steps: np.ndarray, epsilon: float = 1e-8) -> PlaneParams:
    """Rescale each pixel's plane parameters by m_F / (m_psi + eps).

    m_psi and m_F are the mean squared consecutive-frame step lengths of psi
    and of the feature vectors, both normalized by N. ``feature_steps`` holds
    |F_i - F_{i+1}| per pixel, shape (pixels, N - 1).
    """
    psi = pp.psi
    n = psi.shape[1]
    if n < 2:
        raise DimensionMismatch("scale initialization needs at least 2 frames")
    steps = np.asarray(feature_steps, dtype=np.float64)
    if steps.shape != (psi.shape[0], n - 1):
        raise DimensionMismatch(f"feature steps {steps.shape}, expected {(psi.shape[0], n - 1)}")
    m_psi = np.sum(np.diff(psi, axis=1) ** 2, axis=(1, 2)) / n
    m_f = np.sum(steps ** 2, axis=1) / n
    scale = m_f / (m_psi + epsilon)
    return PlaneParams(pp.grid, psi * scale[:, None, None])


def _fill_from_nearest(values: np.ndarray, ok: np.ndarray, grid: Grid) -> np.ndarray:
    """Copy rows of ``values`` at ~ok lattice points from the nearest ok point."""
    if ok.all() or not ok.any():
        return values
    rows, cols = np.divmod(np.arange(grid.size), grid.nx)
    good = np.flatnonzero(ok)
    out = values.copy()
    for j in np.flatnonzero(~ok):
        dist = (rows[good] - rows[j]) ** 2 + (cols[good] - cols[j]) ** 2
        out[j] = values[good[np.argmin(dist)]]
    return out


def _axis_weights(q: np.ndarray, origin: int, stride: int, n: int):
    t = np.clip((q - origin) / stride, 0.0, n - 1)
    i0 = np.minimum(np.floor(t).astype(int), max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, t - i0


def bilinear_upsample(values: np.ndarray, grid: Grid, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of lattice samples at pixel columns ``xs`` and rows ``ys``.

    ``values`` is (grid.size, ...) in lattice order; queries outside the
    lattice hull take the nearest edge value. Returns (len(ys), len(xs), ...).
    """
    v = values.reshape(grid.ny, grid.nx, *values.shape[1:])
    x0, x1, wx = _axis_weights(np.asarray(xs, dtype=np.float64), grid.x0, grid.stride, grid.nx)
    y0, y1, wy = _axis_weights(np.asarray(ys, dtype=np.float64), grid.y0, grid.stride, grid.ny)
    extra = (None,) * (v.ndim - 2)
    wx = wx[(None, slice(None)) + extra]
    wy = wy[(slice(None), None) + extra]
    top = v[y0][:, x0] * (1 - wx) + v[y0][:, x1] * wx
    bot = v[y1][:, x0] * (1 - wx) + v[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def solve_local_transform(offsets: np.ndarray, coords: np.ndarray, targets: np.ndarray,
                          rcond: float = 1e-10) -> np.ndarray:
    """Least-squares M with [dx, dy, 1] M Psi_i = target(neighbor, i).

    ``offsets`` (K, 2) neighbor offsets, ``coords`` (N, l) the pixel's
    embedding, ``targets`` (K, N). The design is a Kronecker product, so the
    normal equations factor and M = pinv(H) T pinv(Psi)^T.
    """
    H = np.column_stack([offsets, np.ones(len(offsets))])
    hth = H.T @ H
    ptp = coords.T @ coords
    for gram in (hth, ptp):
        w = np.linalg.eigvalsh(gram)
        if w[0] <= rcond * max(w[-1], np.finfo(float).tiny):
            raise RankDeficient("local least-squares system is rank deficient")
    left = np.linalg.solve(hth, H.T @ targets)  # (3, N)
    return np.linalg.solve(ptp, (left @ coords).T).T


def interpolate_transforms(tf: TransformField, field_full: EmbeddingField, pp_coarse: PlaneParams,
                           patch_size: int = 11) -> TransformField:
    """Full-resolution transforms fitted to the bilinearly upsampled coarse displacement.

    ``field_full`` lives on a stride-1 lattice; each of its pixels is fitted
    against the interpolated displacement of every lattice pixel inside its
    ``patch_size`` window. Rank-deficient pixels copy M from the nearest solved
    pixel and are reported inactive.
    """
    full = field_full.grid
    if full.stride != 1:
        raise DimensionMismatch("full-resolution field must use stride 1")
    coarse = pp_coarse.grid
    d = pp_coarse.displacement  # (G, N)
    ok = tf.active if tf.active.shape[0] == coarse.size else np.ones(coarse.size, bool)
    d = _fill_from_nearest(d, ok, coarse)
    dense = bilinear_upsample(d, coarse, full.xs(), full.ys())  # (ny, nx, N)
    r = patch_size // 2
    l = field_full.l
    M = np.zeros((full.size, 3, l))
    solved = np.zeros(full.size, dtype=bool)
    for j in range(full.size):
        row, col = divmod(j, full.nx)
        if field_full.degenerate[j]:
            continue
        r0, r1 = max(0, row - r), min(full.ny, row + r + 1)
        c0, c1 = max(0, col - r), min(full.nx, col + r + 1)
        dr, dc = np.mgrid[r0 - row:r1 - row, c0 - col:c1 - col]
        offsets = np.column_stack([dc.ravel(), dr.ravel()]).astype(np.float64)
        targets = dense[r0:r1, c0:c1].reshape(-1, dense.shape[-1])
        try:
            M[j] = solve_local_transform(offsets, field_full.coords[j], targets)
            solved[j] = True
        except RankDeficient:
            pass
    if not solved.all():
        log.info("%d pixels rank deficient in transform interpolation", int((~solved).sum()))
        M = _fill_from_nearest(M, solved, full)
    return TransformField(full, M, solved)


# ---- joint refinement ---------------------------------------------------


@dataclass
class RefineProblem:
    """Everything the objective needs, precomputed once."""

    coords: np.ndarray  # (G, N, l)
    steps: np.ndarray  # (G, N - 1) feature step lengths
    pairs: np.ndarray
    offsets: np.ndarray
    grid: Grid
    lam: float = 1.0
    epsilon: float = 1e-8
    slope_weight: float = 0.0
    tile_rows: int | None = None
    dcoords: np.ndarray = field(init=False)

    def __post_init__(self):
        self.dcoords = self.coords[:, :-1] - self.coords[:, 1:]
        n = self.coords.shape[1]
        self.n_t = self.coords.shape[0] * (n - 1)
        self.n_s = max(1, len(self.pairs) * n)

    @classmethod
    def build(cls, field: EmbeddingField, steps: np.ndarray, cfg: PipelineConfig,
              slope_weight: float | None = None, tile_rows: int | None = None) -> "RefineProblem":
        pairs, offsets = neighbor_pairs(field.grid, cfg.neighborhood_radius)
        if slope_weight is None:
            slope_weight = cfg.slope_weight
        return cls(field.coords, np.asarray(steps, dtype=np.float64), pairs, offsets, field.grid,
                   cfg.lam, cfg.epsilon, slope_weight, tile_rows)

    # -- temporal term: independent per pixel
    def _temporal(self, M, sel, want_grad):
        dpsi = np.einsum("gak,gnk->gna", M[sel], self.dcoords[sel])
        s = np.sqrt(np.sum(dpsi ** 2, axis=-1) + self.epsilon ** 2)
        r = s - self.steps[sel]
        value = float(np.sum(r ** 2))
        if not want_grad:
            return value, None
        coef = (r / s)[..., None] * dpsi  # (g, N-1, 3)
        return value, 2.0 * np.einsum("gna,gnk->gak", coef, self.dcoords[sel])

    # -- spatial term over pairs whose first pixel is in ``sel_pairs``
    def _spatial(self, M, sel_pairs, want_grad, grad):
        pairs = self.pairs[sel_pairs]
        offsets = self.offsets[sel_pairs]
        if len(pairs) == 0:
            return 0.0
        c1 = self.coords[pairs[:, 0]]
        c2 = self.coords[pairs[:, 1]]
        psi1 = np.einsum("pak,pnk->pna", M[pairs[:, 0]], c1)
        psi2 = np.einsum("pk,pnk->pn", M[pairs[:, 1], 2], c2)
        h = np.column_stack([offsets, np.ones(len(pairs))])
        r = np.einsum("pa,pna->pn", h, psi1) - psi2
        value = float(np.sum(r ** 2))
        tilt = None
        if self.slope_weight:
            tilt = offsets[:, None, :] * psi1[:, :, :2]  # (P, N, 2)
            value += self.slope_weight * float(np.sum(tilt ** 2))
        if want_grad:
            g1 = 2.0 * np.einsum("pn,pa,pnk->pak", r, h, c1)
            if tilt is not None:
                g1[:, :2] += 2.0 * self.slope_weight * np.einsum("pna,pa,pnk->pak", tilt, offsets, c1)
            g2 = np.zeros_like(g1)
            g2[:, 2] = -2.0 * np.einsum("pn,pnk->pk", r, c2)
            np.add.at(grad, pairs[:, 0], g1)
            np.add.at(grad, pairs[:, 1], g2)
        return value

    def objective(self, M, want_grad: bool = False):
        """J(M) and optionally dJ/dM, evaluated in row tiles when ``tile_rows`` is set."""
        M = np.asarray(M).reshape(self.coords.shape[0], 3, -1)
        grad_s = np.zeros_like(M) if want_grad else None
        grad_t = np.zeros_like(M) if want_grad else None
        e_t = e_s = 0.0
        rows = self.grid.ny
        step = self.tile_rows or rows
        first_row = self.pairs[:, 0] // self.grid.nx
        for r0 in range(0, rows, step):
            sel = slice(r0 * self.grid.nx, min(rows, r0 + step) * self.grid.nx)
            v, g = self._temporal(M, sel, want_grad)
            e_t += v
            if want_grad:
                grad_t[sel] = g
            in_tile = (first_row >= r0) & (first_row < r0 + step)
            e_s += self._spatial(M, in_tile, want_grad, grad_s)
        value = e_t / self.n_t + self.lam * e_s / self.n_s
        if not want_grad:
            return value
        return value, grad_t / self.n_t + self.lam * grad_s / self.n_s

    def terms(self, M) -> tuple[float, float]:
        M = np.asarray(M).reshape(self.coords.shape[0], 3, -1)
        e_t = self._temporal(M, slice(None), False)[0]
        e_s = self._spatial(M, np.ones(len(self.pairs), bool), False, None)
        return e_t / self.n_t, e_s / self.n_s

    def temporal_blocks(self, M) -> np.ndarray:
        """Gauss-Newton blocks of the temporal term, one (3l x 3l) block per pixel."""
        dpsi = np.einsum("gak,gnk->gna", M, self.dcoords)
        s = np.sqrt(np.sum(dpsi ** 2, axis=-1) + self.epsilon ** 2)
        u = dpsi / s[..., None]
        size, l = M.shape[0], M.shape[2]
        uu = np.einsum("gna,gnb->gnab", u, u)
        blocks = np.einsum("gnab,gnk,gnj->gakbj", uu, self.dcoords, self.dcoords)
        return blocks.reshape(size, 3 * l, 3 * l) * (2.0 / self.n_t)


@dataclass
class OptimizeReport:
    iterations: int
    objective: float
    history: list
    converged: bool
    scale: float = 1.0


def _block_diag(blocks: np.ndarray) -> sp.csr_matrix:
    g, b, _ = blocks.shape
    base = (np.arange(g) * b)[:, None, None]
    ar = np.arange(b)
    rows = np.broadcast_to(base + ar[None, :, None], blocks.shape).ravel()
    cols = np.broadcast_to(base + ar[None, None, :], blocks.shape).ravel()
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(g * b, g * b))


def _diag_blocks(A: sp.spmatrix, b: int) -> np.ndarray:
    A = sp.coo_matrix(A)
    keep = (A.row // b) == (A.col // b)
    out = np.zeros((A.shape[0] // b, b, b))
    np.add.at(out, (A.row[keep] // b, A.row[keep] % b, A.col[keep] % b), A.data[keep])
    return out


def _block_jacobi(blocks: np.ndarray):
    g, b, _ = blocks.shape
    inv = np.linalg.pinv(blocks, hermitian=True)

    def apply(v):
        return np.einsum("gij,gj->gi", inv, v.reshape(g, b)).ravel()

    return spla.LinearOperator((g * b, g * b), matvec=apply, dtype=np.float64)


def optimize(tf: TransformField, problem: RefineProblem, max_iters: int = 100, tol: float = 1e-6,
             armijo: float = 1e-4, max_backtracks: int = 30) -> tuple[TransformField, OptimizeReport]:
    """Damped Gauss-Newton with backtracking line search.

    A closed-form optimal global rescaling of M is tried first. Every accepted
    step strictly lowers J; the loop stops when the relative decrease falls
    below ``tol``. Hitting ``max_iters`` returns the best iterate with
    ``converged=False``.
    """
    M = tf.transforms.copy()
    size, _, l = M.shape
    b = 3 * l
    J, g = problem.objective(M, want_grad=True)
    history = [J]

    # optimal global scale along the ray alpha * M
    s = np.sqrt(np.sum(np.einsum("gak,gnk->gna", M, problem.dcoords) ** 2, axis=-1))
    _, e_s = problem.terms(M)
    denom = np.sum(s ** 2) / problem.n_t + problem.lam * e_s
    scale = 1.0
    if denom > 0:
        alpha = (np.sum(s * problem.steps) / problem.n_t) / denom
        if alpha > 0:
            J_a = problem.objective(alpha * M)
            if J_a < J:
                M, scale = alpha * M, alpha
                J, g = problem.objective(M, want_grad=True)
                history.append(J)

    spatial = normal_matrix(problem.coords, problem.pairs, problem.offsets, None, problem.slope_weight)
    spatial = (spatial * (2.0 * problem.lam / problem.n_s)).tocsr()
    spatial_blocks = _diag_blocks(spatial, b)
    damping = 1e-4
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        tblocks = problem.temporal_blocks(M)
        H = _block_diag(tblocks) + spatial
        blocks = tblocks + spatial_blocks
        diag = np.einsum("gii->gi", blocks).ravel()
        floor = 1e-12 * (diag.max() or 1.0)
        accepted = False
        for _ in range(8):
            shift = damping * (diag + floor)
            A = H + sp.diags(shift)
            pre = _block_jacobi(blocks + np.einsum("gi,ij->gij", shift.reshape(-1, b), np.eye(b)))
            step, info = spla.cg(A, -g.ravel(), rtol=1e-10, maxiter=20 * b, M=pre)
            slope = float(g.ravel() @ step)
            if slope >= 0:
                damping *= 10.0
                continue
            t = 1.0
            for _ in range(max_backtracks):
                trial = M + t * step.reshape(M.shape)
                J_new = problem.objective(trial)
                if J_new <= J + armijo * t * slope and J_new < J:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
            damping *= 10.0
        if not accepted:
            converged = True  # no descent step available: stationary to working precision
            break
        decrease = (J - J_new) / max(J, np.finfo(float).tiny)
        M = trial
        J, g = problem.objective(M, want_grad=True)
        history.append(J)
        damping = max(damping * (0.3 if t == 1.0 else 1.0), 1e-10)
        if decrease < tol:
            converged = True
            break
    if not converged:
        log.warning("refinement hit max_iters=%d without reaching tol=%g", max_iters, tol)
    report = OptimizeReport(it, J, history, converged, scale)
    return TransformField(tf.grid, M, tf.active.copy(), tf.eigenvalue), report


def extract_displacement(pp: PlaneParams, shape: tuple[int, int] | None = None,
                         frame_rate: float | None = None) -> DisplacementMap:
    """Third plane component as per-frame maps.

    With ``shape`` the lattice is placed into an H x W image (zeros off the
    lattice, mask marks lattice pixels); without it the maps are lattice-sized.
    """
    d = pp.psi[..., 2]  # (G, N)
    grid = pp.grid
    n = d.shape[1]
    if shape is None:
        maps = d.T.reshape(n, grid.ny, grid.nx).copy()
        return DisplacementMap(maps, np.ones(grid.shape, dtype=bool), frame_rate)
    maps = np.zeros((n,) + tuple(shape))
    mask = np.zeros(shape, dtype=bool)
    px = grid.pixels()
    maps[:, px[:, 1], px[:, 0]] = d.T
    mask[px[:, 1], px[:, 0]] = True
    return DisplacementMap(maps, mask, frame_rate)
