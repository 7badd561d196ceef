import numpy as np
import pytest
from scipy import stats

from specklemotion.errors import InvalidScene, UnknownScenario
from specklemotion.simulator import (MotionField, SpeckleScene, make_scenario, render_sequence, scenario_defaults,
                                     speckle_contrast, traveling_pulse)


def _static(h=16, w=16, n=3):
    return MotionField(np.zeros((n, h, w)), "sine")


def test_static_scene_identical_frames():
    seq, _ = render_sequence(SpeckleScene(16, 16), _static())
    assert np.array_equal(seq.frames[0], seq.frames[1]) and np.array_equal(seq.frames[1], seq.frames[2])


def test_reproducible():
    scene, motion = make_scenario("sine60", height=20, width=20, n_frames=8)
    a, _ = render_sequence(scene, motion)
    b, _ = render_sequence(scene, motion)
    assert a.frames.tobytes() == b.frames.tobytes()
    c, _ = render_sequence(SpeckleScene(20, 20, noise_sigma=0.002, seed=1), motion)
    assert not np.array_equal(a.frames, c.frames)


def test_phase_only_identity():
    d = np.random.default_rng(0).normal(size=(3, 8, 8))
    seq, _ = render_sequence(SpeckleScene(8, 8, angle_spread=1e-12), MotionField(d, "sine"))
    np.testing.assert_allclose(seq.frames[1], seq.frames[0], rtol=1e-6, atol=1e-9)


def test_exponential_statistics_small():
    scene = SpeckleScene(128, 128, full_scale=20.0)
    seq, _ = render_sequence(scene, _static(128, 128, 2))
    x = seq.frames[0]
    assert x.max() < 1.0
    ks = stats.kstest(x.ravel(), "expon", args=(0, x.mean())).statistic
    assert ks <= 0.02
    assert speckle_contrast(x) == pytest.approx(1.0, abs=0.05)


def test_decorrelation_monotone():
    offsets = np.linspace(0, 30, 7)
    d = np.broadcast_to(offsets[:, None, None], (7, 100, 11)).copy()
    seq, _ = render_sequence(SpeckleScene(100, 11), MotionField(d, "step-offset"))
    ref = seq.frames[0]
    corr = []
    for i in range(7):
        cs = [np.corrcoef(ref[r:r + 10].ravel(), seq.frames[i, r:r + 10].ravel())[0, 1] for r in range(0, 100, 10)]
        corr.append(np.mean(cs))
    assert np.all(np.diff(corr) < 0)


def test_microstage_layout():
    scene, motion = make_scenario("microstage", height=12, width=12)
    assert motion.n_frames == 95
    per_frame = motion.d_true[:, 0, 0]
    np.testing.assert_array_equal(per_frame, np.repeat(np.arange(19.0), 5))
    assert motion.kind == "step-offset"


def test_sine60():
    _, motion = make_scenario("sine60", height=8, width=8)
    t = np.arange(256)
    np.testing.assert_allclose(motion.d_true[:, 3, 4], 4.0 * np.sin(2 * np.pi * 60 * t / 1000), atol=1e-12)
    assert np.ptp(motion.d_true, axis=(1, 2)).max() == 0


def test_pulse_translates():
    m = traveling_pulse(4, 80, 10, 1.0, 3.0, 5.0, start=10.0)
    prof = m.d_true[:, 0]
    peaks = np.argmax(prof, axis=1)
    np.testing.assert_array_equal(peaks, 10 + 3 * np.arange(10))
    np.testing.assert_allclose(prof[1, 3:], prof[0, :-3], atol=1e-15)
    rows = traveling_pulse(30, 4, 3, 1.0, 2.0, 3.0, start=5.0, axis="row")
    assert np.argmax(rows.d_true[2, :, 0]) == 9


def test_unknown_and_invalid():
    with pytest.raises(UnknownScenario):
        make_scenario("nope")
    with pytest.raises(UnknownScenario):
        scenario_defaults("nope")
    with pytest.raises(InvalidScene):
        make_scenario("sine60", bogus=1)
    with pytest.raises(InvalidScene):
        SpeckleScene(8, 8, scatterers_per_pixel=4)
    with pytest.raises(InvalidScene):
        SpeckleScene(8, 8, angle_spread=0.0)
    with pytest.raises(InvalidScene):
        render_sequence(SpeckleScene(8, 8), _static(9, 8))


def test_string_overrides():
    scene, motion = make_scenario("pulse", height="20", width="40", speed="2.5", n_frames="6")
    assert scene.height == 20 and motion.n_frames == 6 and motion.params["speed"] == 2.5


def test_truncated_render():
    scene, motion = make_scenario("sine60", height=12, width=12)
    seq, used = render_sequence(scene, motion, n_frames=10)
    assert seq.n_frames == 10 and used.n_frames == 10
