import numpy as np
import pytest

from oracles import align_columns, diffusion_oracle, random_distance_matrix
from specklemotion.config import PipelineConfig
from specklemotion.embedding import Grid, diffusion_map, diffusion_map_eig, embed_all
from specklemotion.errors import DimensionMismatch, PatchOutOfBounds
from specklemotion.features import ValidDomain, extract_features, pairwise_distance_matrix
from specklemotion.imageio import FrameSequence


def test_zero_matrix_is_degenerate():
    coords, evals, flag = diffusion_map_eig(np.zeros((6, 6)), 3)
    assert flag and np.all(coords == 0)


def test_matches_dense_oracle_n8():
    rng = np.random.default_rng(8)
    D = random_distance_matrix(rng, 8, 4)
    ours = diffusion_map(D, 3)
    ref, _ = diffusion_oracle(D, 3)
    np.testing.assert_allclose(align_columns(ours, ref), ref, atol=1e-8)


def test_markov_rows_sum_to_one():
    rng = np.random.default_rng(3)
    _, P = diffusion_oracle(random_distance_matrix(rng, 12), 3)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_sign_convention():
    rng = np.random.default_rng(5)
    coords = diffusion_map(random_distance_matrix(rng, 10), 4)
    vec = coords / np.linalg.norm(coords, axis=0)
    idx = np.argmax(np.abs(vec), axis=0)
    assert np.all(vec[idx, np.arange(4)] > 0)


def test_curve_is_monotone():
    t = np.linspace(0, 1, 20)
    pts = np.column_stack([np.cos(2 * t), np.sin(2 * t), 0.3 * t])
    D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    first = diffusion_map(D, 2)[:, 0]
    d = np.diff(first)
    assert np.all(d > 0) or np.all(d < 0)


def test_bandwidth_fallback_on_mostly_zero():
    D = np.zeros((5, 5))
    D[0, 1:] = D[1:, 0] = 1.0
    coords, _, flag = diffusion_map_eig(D, 2)
    assert not flag and np.all(np.isfinite(coords))


def test_shape_errors():
    with pytest.raises(DimensionMismatch):
        diffusion_map(np.zeros((4, 5)), 2)
    with pytest.raises(DimensionMismatch):
        diffusion_map(np.ones((3, 3)) - np.eye(3), 3)


def _seq(rng, n=10, h=20, w=22):
    return FrameSequence(rng.uniform(size=(n, h, w)), 100.0)


def test_single_pixel_grid_matches_direct(rng):
    seq = _seq(rng)
    cfg = PipelineConfig(patch_size=5, embed_dim=3)
    field = embed_all(seq, cfg, Grid.single(8, 9))
    D = pairwise_distance_matrix(extract_features(seq, (8, 9), 5))
    np.testing.assert_array_equal(field.coords[0], diffusion_map(D, 3))


def test_grid_geometry():
    dom = ValidDomain.for_shape((512, 512), 11)
    g = Grid.over(dom, 8)
    assert g.shape == (63, 63) and g.size == 63 * 63
    assert g.pixels()[1].tolist() == [13, 5]
    assert g.pixels()[g.nx].tolist() == [5, 13]


def test_permuting_frames_permutes_rows(rng):
    seq = _seq(rng, n=9)
    perm = rng.permutation(9)
    cfg = PipelineConfig(patch_size=5, embed_dim=3)
    g = Grid(4, 4, 5, 3, 2)
    a = embed_all(seq, cfg, g).coords
    b = embed_all(FrameSequence(seq.frames[perm], 100.0), cfg, g).coords
    np.testing.assert_allclose(b, a[:, perm], atol=1e-10)


def test_thread_count_does_not_change_bits(rng):
    seq = _seq(rng, n=12)
    cfg = PipelineConfig(patch_size=5, embed_dim=4)
    g = Grid(2, 2, 2, 9, 8)
    one = embed_all(seq, cfg, g, threads=1)
    four = embed_all(seq, cfg, g, threads=4)
    assert one.coords.tobytes() == four.coords.tobytes()


def test_degenerate_pixels_flagged():
    frames = np.full((6, 15, 15), 0.5)
    frames[:, :, 10:] = np.random.default_rng(0).uniform(size=(6, 15, 5))
    field = embed_all(FrameSequence(frames, 1.0), PipelineConfig(patch_size=3, embed_dim=2), Grid(1, 1, 1, 13, 13))
    flags = field.degenerate.reshape(13, 13)
    assert flags[:, :7].all() and not flags[:, 9:].any()
    assert np.all(field.coords[field.degenerate] == 0)


def test_grid_outside_domain(rng):
    with pytest.raises(PatchOutOfBounds):
        embed_all(_seq(rng), PipelineConfig(patch_size=5, embed_dim=2), Grid(1, 1, 1, 3, 3))


def test_embedding_tracks_offsets():
    from scipy.stats import spearmanr

    from specklemotion.simulator import make_scenario, render_sequence

    scene, motion = make_scenario("microstage", height=24, width=24, frames_per_offset=1, noise_sigma=0.0)
    seq, _ = render_sequence(scene, motion)
    field = embed_all(seq, PipelineConfig(), Grid.single(12, 12))
    D = pairwise_distance_matrix(extract_features(seq, (12, 12), 11))
    psi = field.coords[0]
    E = np.sqrt(((psi[:, None] - psi[None]) ** 2).sum(-1))
    iu = np.triu_indices(len(D), 1)
    assert spearmanr(E[iu], D[iu])[0] >= 0.8
