"""Spatial consistency of per-pixel embeddings.

Each pixel gets a 3 x l matrix M mapping its embedding Psi_i to local plane
parameters psi_i = (slope_x, slope_y, height). Neighboring planes must agree on
height at the neighbor's position, which is linear in the stacked unknown m.
The minimizer of ||A m||^2 with ||m|| = 1 is the smallest eigenvector of A^T A.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .embedding import EmbeddingField, Grid
from .errors import ConvergenceFailure, DimensionMismatch, EigSolveFailure, EmptySystem

log = logging.getLogger(__name__)

E3 = np.array([0.0, 0.0, 1.0])


@dataclass
class TransformField:
    grid: Grid
    transforms: np.ndarray  # (size, 3, l)
    active: np.ndarray  # (size,) bool, False where no constraint touched the pixel
    eigenvalue: float = float("nan")

    @property
    def l(self) -> int:
        return self.transforms.shape[2]

    def vector(self) -> np.ndarray:
        return self.transforms.reshape(-1)


@dataclass
class PlaneParams:
    grid: Grid
    psi: np.ndarray  # (size, N, 3)

    @property
    def displacement(self) -> np.ndarray:
        return self.psi[..., 2]


def normalize_temporal_std(field: EmbeddingField, epsilon: float = 1e-8, center: bool = True) -> EmbeddingField:
    """Scale each embedding component to unit temporal std.

    sigma is the population std about the temporal mean; values are divided by
    ``sigma + epsilon``. With ``center`` the temporal mean is subtracted first,
    which keeps a constant offset from passing as a perfectly consistent
    displacement.
    """
    coords = field.coords
    if coords.shape[1] < 2:
        raise DimensionMismatch("temporal normalization needs at least 2 frames")
    sigma = coords.std(axis=1, keepdims=True)
    if center:
        coords = coords - coords.mean(axis=1, keepdims=True)
    return field.with_coords(coords / (sigma + epsilon))


def neighbor_pairs(grid: Grid, radius: int = 1, active: np.ndarray | None = None):
    """Ordered pixel pairs within Chebyshev ``radius`` on the lattice.

    Returns (pairs (P, 2) int of lattice indices, offsets (P, 2) float of
    (x2 - x1, y2 - y1) in pixels). Pairs touching an inactive pixel are dropped.
    """
    rows, cols = np.mgrid[0:grid.ny, 0:grid.nx]
    rows, cols = rows.ravel(), cols.ravel()
    idx = np.arange(grid.size)
    pairs, offs = [], []
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr == 0 and dc == 0:
                continue
            r2, c2 = rows + dr, cols + dc
            ok = (r2 >= 0) & (r2 < grid.ny) & (c2 >= 0) & (c2 < grid.nx)
            p1 = idx[ok]
            p2 = r2[ok] * grid.nx + c2[ok]
            pairs.append(np.column_stack([p1, p2]))
            offs.append(np.tile([dc * grid.stride, dr * grid.stride], (len(p1), 1)))
    pairs = np.concatenate(pairs) if pairs else np.empty((0, 2), int)
    offs = np.concatenate(offs).astype(np.float64) if offs else np.empty((0, 2))
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs, offs = pairs[order], offs[order]
    if active is not None:
        keep = active[pairs[:, 0]] & active[pairs[:, 1]]
        pairs, offs = pairs[keep], offs[keep]
    return pairs, offs


@dataclass
class ConsistencySystem:
    """The stacked constraints, kept in factored form.

    Unknowns are laid out pixel-major over the active pixels, each block being
    M.ravel() (row-major 3 x l). Rows are ordered pair-major, frame-minor.

    ``slope_weight`` adds ``w * (dx^2 slope_x^2 + dy^2 slope_y^2)`` per pair and
    frame. Without it, spatially uniform motion leaves a 3-dimensional null
    space (height fields tilting as a x + b y + c), and the eigenvector can
    change sign across the image.
    """

    field: EmbeddingField
    pairs: np.ndarray
    offsets: np.ndarray
    active: np.ndarray
    slope_weight: float = 0.0

    @property
    def l(self) -> int:
        return self.field.l

    @property
    def block(self) -> int:
        return 3 * self.l

    @property
    def column_of(self) -> np.ndarray:
        col = np.full(self.active.size, -1)
        col[self.active] = np.arange(int(self.active.sum()))
        return col

    @property
    def n_unknowns(self) -> int:
        return int(self.active.sum()) * self.block

    @property
    def n_rows(self) -> int:
        per_pair = 3 if self.slope_weight else 1
        return per_pair * len(self.pairs) * self.field.n_frames

    def matrix(self) -> sp.csr_matrix:
        """Explicit sparse A (rows x unknowns)."""
        psi = self.field.coords
        n, l, b = self.field.n_frames, self.l, self.block
        col = self.column_of
        P = len(self.pairs)
        h = np.column_stack([self.offsets, np.ones(P)])
        psi1 = psi[self.pairs[:, 0]]  # (P, N, l)
        psi2 = psi[self.pairs[:, 1]]
        v1 = np.einsum("pa,pnk->pnak", h, psi1).reshape(P, n, b)
        v2 = -np.einsum("a,pnk->pnak", E3, psi2).reshape(P, n, b)
        rows = np.arange(P * n).reshape(P, n)
        c1 = col[self.pairs[:, 0]][:, None] * b + np.arange(b)
        c2 = col[self.pairs[:, 1]][:, None] * b + np.arange(b)
        r_idx = np.concatenate([np.repeat(rows[..., None], b, 2).ravel()] * 2)
        c_idx = np.concatenate([np.broadcast_to(c1[:, None, :], (P, n, b)).ravel(),
                                np.broadcast_to(c2[:, None, :], (P, n, b)).ravel()])
        data = [v1.ravel(), v2.ravel()]
        if self.slope_weight:
            # tilt penalty rows: one for slope_x, one for slope_y, per pair and frame
            w = np.sqrt(self.slope_weight)
            for axis in (0, 1):
                coef = w * self.offsets[:, axis][:, None, None] * psi1  # (P, N, l)
                tilt_rows = (axis + 1) * P * n + rows
                cols = col[self.pairs[:, 0]][:, None] * b + axis * l + np.arange(l)
                r_idx = np.concatenate([r_idx, np.repeat(tilt_rows[..., None], l, 2).ravel()])
                c_idx = np.concatenate([c_idx, np.broadcast_to(cols[:, None, :], (P, n, l)).ravel()])
                data.append(coef.ravel())
        A = sp.coo_matrix((np.concatenate(data), (r_idx, c_idx)), shape=(self.n_rows, self.n_unknowns))
        return A.tocsr()

    def normal_matrix(self) -> sp.csr_matrix:
        """A^T A assembled from per-pixel and per-pair Gram matrices."""
        return normal_matrix(self.field.coords, self.pairs, self.offsets, self.active, self.slope_weight)

    def residual(self, m: np.ndarray) -> float:
        """||A m||^2 evaluated directly from the per-pixel transforms."""
        M = np.zeros((self.active.size, 3, self.l))
        M[self.active] = np.asarray(m).reshape(-1, 3, self.l)
        return consistency_energy(M, self.field.coords, self.pairs, self.offsets, self.slope_weight)


def consistency_energy(M, coords, pairs, offsets, slope_weight: float = 0.0) -> float:
    """Sum over frames and ordered pairs of squared plane-height mismatch (plus tilt penalty)."""
    psi = np.einsum("gak,gnk->gna", M, coords)
    h = np.column_stack([offsets, np.ones(len(pairs))])
    psi1 = psi[pairs[:, 0]]
    r = np.einsum("pa,pna->pn", h, psi1) - psi[pairs[:, 1], :, 2]
    total = float(np.sum(r ** 2))
    if slope_weight:
        tilt = offsets[:, None, :] * psi1[:, :, :2]
        total += slope_weight * float(np.sum(tilt ** 2))
    return total


def normal_matrix(coords, pairs, offsets, active=None, slope_weight: float = 0.0) -> sp.csr_matrix:
    size, n, l = coords.shape
    if active is None:
        active = np.ones(size, dtype=bool)
    col = np.full(size, -1)
    col[active] = np.arange(int(active.sum()))
    b = 3 * l
    nb = int(active.sum())
    P = len(pairs)
    h = np.column_stack([offsets, np.ones(P)])
    gram = np.einsum("gnk,gnj->gkj", coords, coords)  # (size, l, l)

    # diagonal blocks: sum over pairs of kron(h h^T, G11) and kron(e3 e3^T, G22)
    hh = np.zeros((size, 3, 3))
    np.add.at(hh, pairs[:, 0], np.einsum("pa,pb->pab", h, h))
    cnt2 = np.bincount(pairs[:, 1], minlength=size).astype(np.float64)
    hh[:, 2, 2] += cnt2
    if slope_weight:
        tilt = np.zeros((size, 3, 3))
        np.add.at(tilt, (pairs[:, 0], 0, 0), slope_weight * offsets[:, 0] ** 2)
        np.add.at(tilt, (pairs[:, 0], 1, 1), slope_weight * offsets[:, 1] ** 2)
        hh += tilt
    diag = np.einsum("gab,gkj->gakbj", hh, gram).reshape(size, b, b)

    # off-diagonal blocks (p1, p2): -kron(h e3^T, G12), plus the transpose
    g12 = np.einsum("pnk,pnj->pkj", coords[pairs[:, 0]], coords[pairs[:, 1]])
    he3 = np.einsum("pa,b->pab", h, E3)
    off = -np.einsum("pab,pkj->pakbj", he3, g12).reshape(P, b, b)

    blocks = [diag[active], off, np.transpose(off, (0, 2, 1))]
    brow = [col[active], col[pairs[:, 0]], col[pairs[:, 1]]]
    bcol = [col[active], col[pairs[:, 1]], col[pairs[:, 0]]]
    ar = np.arange(b)
    r_idx, c_idx, data = [], [], []
    for blk, br, bc in zip(blocks, brow, bcol):
        shape = (len(br), b, b)
        r_idx.append(np.broadcast_to(br[:, None, None] * b + ar[None, :, None], shape).ravel())
        c_idx.append(np.broadcast_to(bc[:, None, None] * b + ar[None, None, :], shape).ravel())
        data.append(blk.ravel())
    Q = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(r_idx), np.concatenate(c_idx))),
        shape=(nb * b, nb * b),
    )
    return Q.tocsr()


def build_consistency_system(field: EmbeddingField, radius: int = 1, slope_weight: float = 0.0) -> ConsistencySystem:
    if radius < 1:
        raise DimensionMismatch("neighborhood radius must be >= 1")
    active = ~field.degenerate
    pairs, offsets = neighbor_pairs(field.grid, radius, active)
    if len(pairs) == 0:
        raise EmptySystem("no neighboring pixel pairs to constrain")
    # a pixel with no remaining pair carries no constraint
    touched = np.zeros(active.size, dtype=bool)
    touched[pairs.ravel()] = True
    return ConsistencySystem(field, pairs, offsets, active & touched, slope_weight)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def smallest_eigvec(Q, dense_limit: int = 2000, tol: float = 0.0) -> tuple[np.ndarray, float]:
    """Smallest eigenpair of a symmetric PSD matrix (dense below ``dense_limit`` unknowns)."""
    n = Q.shape[0]
    if n <= dense_limit:
        dense = Q.toarray() if sp.issparse(Q) else np.asarray(Q)
        try:
            w, v = sla.eigh(0.5 * (dense + dense.T), subset_by_index=[0, 0])
        except np.linalg.LinAlgError as exc:
            raise EigSolveFailure(str(exc)) from exc
        vec, val = v[:, 0], float(w[0])
    else:
        Q = sp.csc_matrix(Q)
        scale = float(Q.diagonal().max()) or 1.0
        sigma = -1e-9 * scale
        try:
            w, v = spla.eigsh(Q, k=1, sigma=sigma, which="LM", v0=np.ones(n), tol=tol, maxiter=n * 10)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceFailure(f"sparse eigensolver did not converge: {exc}") from exc
        vec, val = v[:, 0], float(w[0])
    vec = vec / np.linalg.norm(vec)
    return _fix_sign(vec), val


def solve_smallest_eigenvector(system, dense_limit: int = 2000, grid: Grid | None = None, l: int | None = None) -> TransformField:
    """Unit-norm m minimizing ||A m||^2, reshaped into per-pixel 3 x l transforms.

    ``system`` is a ConsistencySystem or an explicit (sparse or dense) A; for a
    bare A, ``l`` and optionally ``grid`` describe the unknown layout.
    """
    if isinstance(system, ConsistencySystem):
        if system.n_unknowns == 0:
            raise EmptySystem("system has no unknowns")
        Q = system.normal_matrix()
        grid, l, active = system.field.grid, system.l, system.active
    else:
        A = sp.csr_matrix(system)
        if A.shape[0] == 0:
            raise EmptySystem("system has no rows")
        if l is None:
            raise DimensionMismatch("l is required when passing a bare matrix")
        if A.shape[1] % (3 * l):
            raise DimensionMismatch(f"{A.shape[1]} unknowns is not a multiple of 3*l = {3 * l}")
        Q = (A.T @ A).tocsr()
        size = A.shape[1] // (3 * l)
        grid = grid or Grid(0, 0, 1, size, 1)
        active = np.ones(size, dtype=bool)
    vec, val = smallest_eigvec(Q, dense_limit)
    transforms = np.zeros((active.size, 3, l))
    transforms[active] = vec.reshape(-1, 3, l)
    log.debug("smallest eigenvalue of A^T A: %.3e", val)
    return TransformField(grid, transforms, active.copy(), val)


def apply_transform(field: EmbeddingField, tf: TransformField) -> PlaneParams:
    if field.coords.shape[0] != tf.transforms.shape[0] or field.l != tf.l:
        raise DimensionMismatch(
            f"embedding ({field.coords.shape[0]} px, l={field.l}) and transforms "
            f"({tf.transforms.shape[0]} px, l={tf.l}) do not match"
        )
    return PlaneParams(field.grid, np.einsum("gak,gnk->gna", tf.transforms, field.coords))
