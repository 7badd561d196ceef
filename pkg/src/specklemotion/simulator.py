"""Synthetic speckle video with known out-of-plane displacement.

Each pixel sums the phasors of its own scatterer population,

    a(x, y) = sum_j exp(i (phi_j + c_j d(x, y))),   c_j = (2 pi / wavelength) (1 + cos theta_j)

with phi_j ~ U[0, 2 pi) and theta_j ~ U[0, angle_spread] fixed per scene. The
recorded intensity is |a|^2 / scatterers, divided by ``full_scale`` (the mean
intensity lands at 1 / full_scale), plus Gaussian noise, clipped to [0, 1].

A common phase shift cancels in |a|^2, so only the spread of c_j (set by
``angle_spread``) turns out-of-plane motion into speckle decorrelation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidScene, UnknownScenario
from .imageio import FrameSequence

# phasors per rendering block; bounds peak memory
_BLOCK = 1 << 20


@dataclass(frozen=True)
class SpeckleScene:
    height: int
    width: int
    scatterers_per_pixel: int = 64
    wavelength: float = 0.633
    angle_spread: float = 0.2
    noise_sigma: float = 0.0
    full_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidScene(f"scene must be at least 1x1, got {self.height}x{self.width}")
        if self.scatterers_per_pixel < 8:
            raise InvalidScene("scatterers_per_pixel must be >= 8 for developed speckle")
        if not self.angle_spread > 0:
            raise InvalidScene("angle_spread must be > 0")
        if not self.wavelength > 0 or not self.full_scale > 0:
            raise InvalidScene("wavelength and full_scale must be > 0")
        if self.noise_sigma < 0:
            raise InvalidScene("noise_sigma must be >= 0")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MotionField:
    d_true: np.ndarray  # (N, H, W)
    kind: str
    frame_rate: float = 1000.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.d_true = np.asarray(self.d_true, dtype=np.float64)
        if self.d_true.ndim != 3:
            raise InvalidScene(f"d_true must be N x H x W, got {self.d_true.shape}")
        if not np.all(np.isfinite(self.d_true)):
            raise InvalidScene("d_true must be finite")

    @property
    def n_frames(self) -> int:
        return self.d_true.shape[0]


def _scatterers(scene: SpeckleScene, y: int):
    rng = np.random.default_rng([scene.seed, 0, y])
    s = scene.scatterers_per_pixel
    phase = rng.uniform(0.0, 2.0 * np.pi, (scene.width, s))
    theta = rng.uniform(0.0, scene.angle_spread, (scene.width, s))
    sens = (2.0 * np.pi / scene.wavelength) * (1.0 + np.cos(theta))
    return phase, sens


def render_sequence(scene: SpeckleScene, motion: MotionField, n_frames: int | None = None,
                    frame_rate: float | None = None) -> tuple[FrameSequence, MotionField]:
    d = motion.d_true
    if d.shape[1:] != (scene.height, scene.width):
        raise InvalidScene(f"motion is {d.shape[1:]}, scene is {(scene.height, scene.width)}")
    if n_frames is not None:
        if n_frames > d.shape[0]:
            raise InvalidScene(f"motion defines {d.shape[0]} frames, {n_frames} requested")
        d = d[:n_frames]
    n = d.shape[0]
    frame_rate = motion.frame_rate if frame_rate is None else frame_rate
    s = scene.scatterers_per_pixel
    out = np.empty((n, scene.height, scene.width))
    rows = max(1, _BLOCK // (scene.width * s))
    for y0 in range(0, scene.height, rows):
        ys = range(y0, min(scene.height, y0 + rows))
        parts = [_scatterers(scene, y) for y in ys]
        base = np.exp(1j * np.stack([p[0] for p in parts]))
        sens = np.stack([p[1] for p in parts])
        for i in range(n):
            amp = np.sum(base * np.exp(1j * sens * d[i, y0:y0 + len(ys), :, None]), axis=-1)
            out[i, y0:y0 + len(ys)] = (amp.real ** 2 + amp.imag ** 2) / s
    out /= scene.full_scale
    if scene.noise_sigma > 0:
        for i in range(n):
            out[i] += np.random.default_rng([scene.seed, 1, i]).normal(0.0, scene.noise_sigma, out[i].shape)
    np.clip(out, 0.0, 1.0, out=out)
    used = motion if n == motion.n_frames else MotionField(d, motion.kind, frame_rate, dict(motion.params))
    return FrameSequence(out, float(frame_rate), 16), used


# ---- motion fields ------------------------------------------------------


def step_offsets(height: int, width: int, offsets=None, frames_per_offset: int = 5) -> MotionField:
    offsets = np.arange(19.0) if offsets is None else np.asarray(offsets, dtype=np.float64)
    seq = np.repeat(offsets, frames_per_offset)
    d = np.broadcast_to(seq[:, None, None], (len(seq), height, width)).copy()
    return MotionField(d, "step-offset", params={"offsets": offsets.tolist(),
                                                 "frames_per_offset": frames_per_offset})


def sine(height: int, width: int, n_frames: int, amplitude: float, freq: float, frame_rate: float) -> MotionField:
    t = np.arange(n_frames) / frame_rate
    seq = amplitude * np.sin(2.0 * np.pi * freq * t)
    d = np.broadcast_to(seq[:, None, None], (n_frames, height, width)).copy()
    return MotionField(d, "sine", frame_rate, {"amplitude": amplitude, "freq": freq})


def traveling_pulse(height: int, width: int, n_frames: int, amplitude: float, speed: float,
                    pulse_width: float, start: float | None = None, axis: str = "column",
                    frame_rate: float = 1000.0) -> MotionField:
    """Gaussian ridge whose center moves ``speed`` pixels per frame.

    ``axis='column'`` moves it along x (across columns), ``'row'`` along y.
    The center sits at ``start + speed * i`` in frame i.
    """
    if axis not in ("row", "column"):
        raise InvalidScene(f"axis must be 'row' or 'column', got {axis!r}")
    length = width if axis == "column" else height
    if start is None:
        start = -3.0 * pulse_width
    pos = np.arange(length, dtype=np.float64)
    centers = start + speed * np.arange(n_frames)
    prof = amplitude * np.exp(-0.5 * ((pos[None, :] - centers[:, None]) / pulse_width) ** 2)
    if axis == "column":
        d = np.broadcast_to(prof[:, None, :], (n_frames, height, width)).copy()
    else:
        d = np.broadcast_to(prof[:, :, None], (n_frames, height, width)).copy()
    return MotionField(d, "traveling-pulse", frame_rate,
                       {"amplitude": amplitude, "speed": speed, "pulse_width": pulse_width,
                        "start": start, "axis": axis})


def standing_wave(height: int, width: int, n_frames: int, amplitude: float, freq: float,
                  frame_rate: float, modes: float = 1.0, axis: str = "row") -> MotionField:
    length = height if axis == "row" else width
    shape = np.sin(np.pi * modes * (np.arange(length) + 0.5) / length)
    t = np.sin(2.0 * np.pi * freq * np.arange(n_frames) / frame_rate)
    prof = amplitude * t[:, None] * shape[None, :]
    if axis == "row":
        d = np.broadcast_to(prof[:, :, None], (n_frames, height, width)).copy()
    else:
        d = np.broadcast_to(prof[:, None, :], (n_frames, height, width)).copy()
    return MotionField(d, "standing-wave", frame_rate,
                       {"amplitude": amplitude, "freq": freq, "modes": modes, "axis": axis})


# ---- named scenarios ----------------------------------------------------

_SCENE_KEYS = {"scatterers_per_pixel", "wavelength", "angle_spread", "noise_sigma", "full_scale", "seed"}

SCENARIOS = {
    "microstage": dict(height=74, width=74, frames_per_offset=5, n_offsets=19, step=1.0,
                       angle_spread=0.2, noise_sigma=0.002, frame_rate=1000.0),
    "sine60": dict(height=64, width=64, n_frames=256, amplitude=4.0, freq=60.0,
                   frame_rate=1000.0, angle_spread=0.2, noise_sigma=0.002),
    "pulse": dict(height=32, width=96, n_frames=48, amplitude=6.0, speed=4.0, pulse_width=10.0, start=None,
                  axis="column", frame_rate=1000.0, angle_spread=0.2, noise_sigma=0.002),
    "standing": dict(height=64, width=64, n_frames=128, amplitude=4.0, freq=60.0, modes=1.0,
                     axis="row", frame_rate=1000.0, angle_spread=0.2, noise_sigma=0.002),
}


def scenario_defaults(name: str) -> dict:
    if name not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {name!r}; known: {', '.join(sorted(SCENARIOS))}")
    return dict(SCENARIOS[name], seed=0)


def make_scenario(name: str, **params) -> tuple[SpeckleScene, MotionField]:
    """Scene and motion for a named experiment, with keyword overrides."""
    values = scenario_defaults(name)
    unknown = set(params) - set(values) - _SCENE_KEYS
    if unknown:
        raise InvalidScene(f"unknown parameters for {name}: {', '.join(sorted(unknown))}")
    for key, value in params.items():
        default = values.get(key)
        if isinstance(value, str) and key != "axis":
            try:
                value = int(float(value)) if isinstance(default, int) else float(value)
            except ValueError:
                raise InvalidScene(f"{key} must be numeric, got {value!r}") from None
        values[key] = value
    scene = SpeckleScene(height=int(values["height"]), width=int(values["width"]),
                         **{k: values[k] for k in _SCENE_KEYS if k in values})
    h, w, rate = scene.height, scene.width, float(values["frame_rate"])
    if name == "microstage":
        offsets = np.arange(int(values["n_offsets"])) * float(values["step"])
        motion = step_offsets(h, w, offsets, int(values["frames_per_offset"]))
        motion.frame_rate = rate
    elif name == "sine60":
        motion = sine(h, w, int(values["n_frames"]), float(values["amplitude"]), float(values["freq"]), rate)
    elif name == "pulse":
        motion = traveling_pulse(h, w, int(values["n_frames"]), float(values["amplitude"]),
                                 float(values["speed"]), float(values["pulse_width"]),
                                 values.get("start"), values["axis"], rate)
    else:
        motion = standing_wave(h, w, int(values["n_frames"]), float(values["amplitude"]),
                               float(values["freq"]), rate, float(values["modes"]), values["axis"])
    motion.params["scenario"] = name
    return scene, motion


def speckle_contrast(frame: np.ndarray) -> float:
    frame = np.asarray(frame, dtype=np.float64)
    return float(frame.std() / frame.mean())
