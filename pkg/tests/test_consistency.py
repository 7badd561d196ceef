import numpy as np
import pytest
import scipy.sparse as sp

from oracles import sign_align, smallest_right_singular
from specklemotion.consistency import (ConsistencySystem, PlaneParams, TransformField, apply_transform,
                                       build_consistency_system, consistency_energy, neighbor_pairs,
                                       normal_matrix, normalize_temporal_std, smallest_eigvec,
                                       solve_smallest_eigenvector)
from specklemotion.embedding import EmbeddingField, Grid
from specklemotion.errors import DimensionMismatch, EmptySystem


def _field(coords, grid, degenerate=None):
    if degenerate is None:
        degenerate = np.zeros(coords.shape[0], dtype=bool)
    return EmbeddingField(grid, coords, degenerate)


def test_normalize_zero_component():
    coords = np.zeros((1, 6, 2))
    coords[0, :, 1] = np.arange(6)
    out = normalize_temporal_std(_field(coords, Grid.single(0, 0)), 1e-8).coords
    assert np.all(out[0, :, 0] == 0)


def test_normalize_alternating():
    eps = 1e-3
    coords = np.array([1.0, -1.0] * 4).reshape(1, 8, 1)
    out = normalize_temporal_std(_field(coords, Grid.single(0, 0)), eps).coords
    np.testing.assert_allclose(out.ravel(), coords.ravel() / (1 + eps), rtol=1e-15)


def test_normalize_unit_std(rng):
    coords = rng.normal(3.0, 5.0, (4, 50, 3))
    field = _field(coords, Grid(0, 0, 1, 2, 2))
    for center in (True, False):
        out = normalize_temporal_std(field, 1e-8, center).coords
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-6)
    # uncentered form divides raw values
    raw = normalize_temporal_std(field, 1e-8, center=False).coords
    np.testing.assert_allclose(raw, coords / (coords.std(axis=1, keepdims=True) + 1e-8))


def test_two_pixel_hand_expansion():
    a, b = 0.7, -1.3
    grid = Grid(0, 0, 4, 2, 1)
    coords = np.array([[[a]], [[b]]])
    system = build_consistency_system(_field(coords, grid), 1)
    A = system.matrix().toarray()
    # both orderings of the pair give a row; the first one is (p1=0, p2=1), offset (+4, 0)
    assert A.shape == (2, 6)
    np.testing.assert_allclose(A[0], [4 * a, 0 * a, a, 0, 0, -b])
    np.testing.assert_allclose(A[1], [0, 0, -a, -4 * b, 0 * b, b])


def test_isolated_pixel():
    with pytest.raises(EmptySystem):
        build_consistency_system(_field(np.ones((1, 3, 2)), Grid.single(5, 5)), 1)
    with pytest.raises(EmptySystem):
        coords = np.ones((2, 3, 2))
        build_consistency_system(_field(coords, Grid(0, 0, 1, 2, 1), np.array([False, True])), 1)


def test_neighbor_pairs_counts():
    pairs, offs = neighbor_pairs(Grid(0, 0, 8, 3, 3), 1)
    # interior 8 neighbors, edge 5, corner 3
    assert len(pairs) == 4 * 3 + 4 * 5 + 8
    assert set(map(tuple, offs.astype(int).tolist())) == {(dx, dy) for dx in (-8, 0, 8) for dy in (-8, 0, 8)} - {(0, 0)}
    pairs2, _ = neighbor_pairs(Grid(0, 0, 1, 5, 5), 2)
    assert len(pairs2) == sum(
        sum(1 for dr in range(-2, 3) for dc in range(-2, 3) if (dr or dc) and 0 <= r + dr < 5 and 0 <= c + dc < 5)
        for r in range(5) for c in range(5))


@pytest.mark.parametrize("slope_weight", [0.0, 0.3])
def test_residual_matches_direct_energy(rng, slope_weight):
    grid = Grid(3, 3, 2, 3, 4)
    coords = rng.normal(size=(grid.size, 7, 2))
    system = build_consistency_system(_field(coords, grid), 1, slope_weight)
    m = rng.normal(size=system.n_unknowns)
    A = system.matrix()
    direct = consistency_energy(m.reshape(-1, 3, 2), coords, system.pairs, system.offsets, slope_weight)
    assert float(np.sum((A @ m) ** 2)) == pytest.approx(direct, rel=1e-10)
    assert system.residual(m) == pytest.approx(direct, rel=1e-10)
    np.testing.assert_allclose((A.T @ A).toarray(), system.normal_matrix().toarray(), atol=1e-10)


def _svd_instance(rng, l, slope_weight=0.0):
    """At most 60 unknowns, with enough frames that the smallest singular vector is unique."""
    grid = Grid(0, 0, 1, 2, 2)
    coords = rng.normal(size=(4, l + int(rng.integers(2, 6)), l))
    return build_consistency_system(_field(coords, grid), 1, slope_weight)


def test_matches_dense_svd(rng):
    for _ in range(5):
        system = _svd_instance(rng, int(rng.integers(1, 6)), float(rng.choice([0.0, 0.1])))
        A = system.matrix()
        ref = smallest_right_singular(A)
        m = solve_smallest_eigenvector(system).vector()
        np.testing.assert_allclose(sign_align(m, ref), ref, atol=1e-8)


def test_unit_norm_and_sign(rng):
    tf = solve_smallest_eigenvector(_svd_instance(rng, 3))
    v = tf.vector()
    assert abs(np.linalg.norm(v) - 1) < 1e-10
    assert v[np.argmax(np.abs(v))] > 0


def test_scaling_invariance(rng):
    A = _svd_instance(rng, 2).matrix()
    a = solve_smallest_eigenvector(A, l=2).vector()
    b = solve_smallest_eigenvector(10 * A, l=2).vector()
    np.testing.assert_allclose(a, b, atol=1e-10)


def planar_null_instance(rng, nx=4, ny=3, stride=2, n=6):
    """Embedding equal to the true plane parameters of a globally planar height field."""
    grid = Grid(1, 1, stride, nx, ny)
    px = grid.pixels().astype(float)
    alpha, beta, gamma = rng.normal(size=(3, n))
    d = alpha[None] * px[:, :1] + beta[None] * px[:, 1:] + gamma[None]
    coords = np.stack([np.broadcast_to(alpha, d.shape), np.broadcast_to(beta, d.shape), d], axis=-1)
    return _field(coords, grid)


def test_constructed_null_space(rng):
    field = planar_null_instance(rng)
    system = build_consistency_system(field, 1)
    eye = np.tile(np.eye(3).ravel(), field.grid.size)
    assert np.linalg.norm(system.matrix() @ eye) < 1e-10
    m = solve_smallest_eigenvector(system).vector()
    assert np.linalg.norm(system.matrix() @ m) <= 1e-10


def test_sparse_and_dense_routes_agree(rng):
    grid = Grid(0, 0, 1, 6, 5)
    coords = rng.normal(size=(grid.size, 9, 3))
    Q = normal_matrix(coords, *neighbor_pairs(grid, 1), slope_weight=0.05)
    v1, w1 = smallest_eigvec(Q, dense_limit=10 ** 6)
    v2, w2 = smallest_eigvec(Q, dense_limit=0)
    assert w1 == pytest.approx(w2, rel=1e-6, abs=1e-12)
    np.testing.assert_allclose(v1, v2, atol=1e-6)


def test_bare_matrix_needs_l(rng):
    with pytest.raises(DimensionMismatch):
        solve_smallest_eigenvector(sp.eye(6, format="csr"))
    with pytest.raises(DimensionMismatch):
        solve_smallest_eigenvector(sp.eye(7, format="csr"), l=1)
    with pytest.raises(EmptySystem):
        solve_smallest_eigenvector(sp.csr_matrix((0, 6)), l=1)


def test_apply_transform_examples(rng):
    grid = Grid(0, 0, 1, 2, 1)
    coords = rng.normal(size=(2, 5, 3))
    field = _field(coords, grid)
    zero = apply_transform(field, TransformField(grid, np.zeros((2, 3, 3)), np.ones(2, bool)))
    assert np.all(zero.psi == 0)
    ident = apply_transform(field, TransformField(grid, np.tile(np.eye(3), (2, 1, 1)), np.ones(2, bool)))
    np.testing.assert_array_equal(ident.psi, coords)
    M = rng.normal(size=(2, 3, 3))
    out = apply_transform(field, TransformField(grid, M, np.ones(2, bool))).psi
    for g in range(2):
        for i in range(5):
            np.testing.assert_allclose(out[g, i], M[g] @ coords[g, i], rtol=1e-12, atol=1e-14)
    with pytest.raises(DimensionMismatch):
        apply_transform(field, TransformField(grid, np.zeros((2, 3, 4)), np.ones(2, bool)))


def test_global_sign_symmetry(rng):
    grid = Grid(0, 0, 1, 3, 2)
    coords = rng.normal(size=(6, 5, 2))
    system = build_consistency_system(_field(coords, grid), 1, 0.1)
    m = rng.normal(size=system.n_unknowns)
    assert system.residual(m) == pytest.approx(system.residual(-m), rel=1e-14)


def test_inactive_pixels_excluded(rng):
    grid = Grid(0, 0, 1, 3, 3)
    coords = rng.normal(size=(9, 5, 2))
    deg = np.zeros(9, bool)
    deg[4] = True
    coords[4] = 0
    system = build_consistency_system(_field(coords, grid, deg), 1)
    assert system.n_unknowns == 8 * 6
    tf = solve_smallest_eigenvector(system)
    assert not tf.active[4] and np.all(tf.transforms[4] == 0)


def test_solution_beats_random_on_traveling_wave():
    from specklemotion.config import PipelineConfig
    from specklemotion.embedding import embed_all
    from specklemotion.features import ValidDomain
    from specklemotion.simulator import make_scenario, render_sequence

    scene, motion = make_scenario("pulse", height=27, width=43, n_frames=24, speed=2.0, pulse_width=8.0)
    seq, _ = render_sequence(scene, motion)
    grid = Grid.over(ValidDomain.for_shape(seq.shape, 11), 4)
    field = normalize_temporal_std(embed_all(seq, PipelineConfig(), grid))
    system = build_consistency_system(field, 1)
    best = system.residual(solve_smallest_eigenvector(system).vector())
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = rng.normal(size=system.n_unknowns)
        assert best <= system.residual(v / np.linalg.norm(v))
