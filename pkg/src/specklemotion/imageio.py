"""Frame-sequence loading and displacement-map output.

Inputs are numbered 8/16-bit grayscale PNG or PGM files addressed by a path
pattern with an ``{index}`` placeholder, e.g. ``frames/frame_{index}.png``
matching ``frame_0000.png``, ``frame_0001.png``, ...

Displacement output layout (one directory):

* ``disp_NNNN.f32``: frame ``NNNN`` as little-endian float32, H x W, row-major
* ``mask.u8``: valid-domain mask, uint8 (1 = valid), H x W, row-major
* ``displacement.json``: sidecar with N, H, W, frame_rate, dtype, file list,
  SHA-256 checksums and the config echo
* ``preview_NNNN.png`` (optional): 16-bit gray previews, min-max scaled over
  the whole sequence
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping

import numpy as np
from PIL import Image

from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    MissingFrame,
    SpeckleMotionError,
    UnsupportedBitDepth,
)

if TYPE_CHECKING:
    from .refine import DisplacementMap

SIDECAR = "displacement.json"
MASK_FILE = "mask.u8"
RAW_DTYPE = "<f4"


@dataclass(frozen=True)
class FrameSequence:
    frames: np.ndarray
    frame_rate: float
    bit_depth: int = 16

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise DimensionMismatch(f"frames must be N x H x W, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise SpeckleMotionError("a sequence needs at least 2 frames")
        if not np.all(np.isfinite(frames)):
            raise SpeckleMotionError("frame intensities must be finite")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise SpeckleMotionError("frame intensities must lie in [0, 1]")
        if self.bit_depth not in (8, 16):
            raise UnsupportedBitDepth(f"bit depth {self.bit_depth}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


def _pattern_regex(path_pattern: str) -> tuple[Path, re.Pattern]:
    path = Path(path_pattern)
    if "{index}" not in path.name:
        raise SpeckleMotionError(f"pattern must contain '{{index}}' in its file name: {path_pattern}")
    head, tail = path.name.split("{index}", 1)
    return path.parent, re.compile(re.escape(head) + r"(\d+)" + re.escape(tail) + r"$")


def list_frames(path_pattern: str) -> list[Path]:
    """Return the files matching ``path_pattern`` in ascending index order."""
    folder, rx = _pattern_regex(path_pattern)
    found = {}
    if folder.is_dir():
        for p in folder.iterdir():
            m = rx.match(p.name)
            if m:
                found[int(m.group(1))] = p
    if not found:
        raise MissingFrame(f"no files match {path_pattern}")
    indices = sorted(found)
    expected = range(indices[0], indices[0] + len(indices))
    missing = sorted(set(expected) - set(indices))
    if missing or indices[-1] != expected[-1]:
        gap = missing[0] if missing else indices[-1]
        raise MissingFrame(f"gap in frame indices of {path_pattern} near index {gap}")
    return [found[i] for i in indices]


def read_gray(path: str | Path) -> tuple[np.ndarray, int]:
    """Read one grayscale image; returns (integer array, bit depth)."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if mode == "L":
        return arr.astype(np.uint16), 8
    if mode in ("I;16", "I;16B", "I;16L"):
        return arr.astype(np.uint16), 16
    if mode == "I" and arr.size and arr.min() >= 0 and arr.max() <= 65535:
        return arr.astype(np.uint16), 16
    raise UnsupportedBitDepth(f"{path}: unsupported image mode {mode!r}")


def load_sequence(path_pattern: str, frame_rate: float) -> FrameSequence:
    files = list_frames(path_pattern)
    if len(files) < 2:
        raise MissingFrame(f"need at least 2 frames, found {len(files)} for {path_pattern}")
    frames = []
    depth = None
    for f in files:
        arr, bits = read_gray(f)
        if frames and arr.shape != frames[0].shape:
            raise DimensionMismatch(f"{f.name} is {arr.shape}, expected {frames[0].shape}")
        if depth is not None and bits != depth:
            raise UnsupportedBitDepth(f"{f.name}: mixed bit depths {bits} and {depth}")
        depth = bits
        frames.append(arr)
    stack = np.stack(frames).astype(np.float64) / float(2 ** depth - 1)
    return FrameSequence(stack, float(frame_rate), depth)


def index_width(n: int) -> int:
    return max(4, len(str(n - 1)))


def write_frames(seq: FrameSequence, out_dir: str | Path, stem: str = "frame_") -> str:
    """Quantize and write a sequence as 16-bit PNG; returns the path pattern."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = index_width(seq.n_frames)
    scale = float(2 ** seq.bit_depth - 1)
    dtype = np.uint16 if seq.bit_depth == 16 else np.uint8
    for i, frame in enumerate(seq.frames):
        q = np.rint(frame * scale).astype(dtype)
        Image.fromarray(q).save(out / f"{stem}{i:0{width}d}.png")
    return str(out / f"{stem}{{index}}.png")


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_raw(array: np.ndarray, path: str | Path) -> None:
    np.ascontiguousarray(array, dtype=RAW_DTYPE).tofile(path)


def read_raw(path: str | Path, shape: tuple[int, int]) -> np.ndarray:
    data = np.fromfile(path, dtype=RAW_DTYPE)
    if data.size != shape[0] * shape[1]:
        raise DimensionMismatch(f"{path}: {data.size} values, expected {shape[0] * shape[1]}")
    return data.reshape(shape)


def write_displacement(
    maps: "DisplacementMap | np.ndarray",
    out_dir: str | Path,
    frame_rate: float | None = None,
    config: Mapping[str, Any] | None = None,
    previews: bool = False,
    extra: Mapping[str, Any] | None = None,
    prefix: str = "disp_",
) -> dict:
    """Write displacement maps in the raw float32 + JSON sidecar layout.

    ``maps`` is a DisplacementMap or a bare N x H x W array (mask = all valid).
    Returns the sidecar dictionary.
    """
    values = np.asarray(getattr(maps, "maps", maps), dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    mask = getattr(maps, "mask", None)
    if mask is None:
        mask = np.ones(values.shape[1:], dtype=bool)
    if frame_rate is None:
        frame_rate = getattr(maps, "frame_rate", None)
    if not np.all(np.isfinite(values)):
        raise SpeckleMotionError("displacement maps must be finite")
    n, h, w = values.shape
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        width = index_width(n)
        files, sums = [], {}
        for i in range(n):
            name = f"{prefix}{i:0{width}d}.f32"
            write_raw(values[i], out / name)
            files.append(name)
            sums[name] = sha256(out / name)
        np.ascontiguousarray(mask, dtype=np.uint8).tofile(out / MASK_FILE)
        sums[MASK_FILE] = sha256(out / MASK_FILE)
        preview_files = []
        if previews:
            preview_files = write_previews(values, mask, out, width)
        meta = {
            "N": n,
            "H": h,
            "W": w,
            "frame_rate": frame_rate,
            "dtype": "float32",
            "byte_order": "little",
            "layout": "row-major",
            "files": files,
            "mask": MASK_FILE,
            "previews": preview_files,
            "sha256": sums,
            "config": dict(config or {}),
        }
        meta.update(extra or {})
        (out / SIDECAR).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise SpeckleMotionError(f"cannot write displacement to {out}: {exc}") from exc
    return meta


def write_previews(values: np.ndarray, mask: np.ndarray, out: Path, width: int) -> list[str]:
    valid = values[:, mask] if mask.any() else values.reshape(len(values), -1)
    lo, hi = float(valid.min()), float(valid.max())
    span = hi - lo if hi > lo else 1.0
    names = []
    for i, frame in enumerate(values):
        img = np.clip((frame - lo) / span, 0.0, 1.0)
        img[~mask] = 0.0
        name = f"preview_{i:0{width}d}.png"
        Image.fromarray(np.rint(img * 65535).astype(np.uint16)).save(out / name)
        names.append(name)
    return names


def read_displacement(out_dir: str | Path, verify: bool = True) -> tuple[np.ndarray, np.ndarray, dict]:
    """Read maps written by :func:`write_displacement`.

    Returns (maps N x H x W float32, mask H x W bool, sidecar). With ``verify``
    every file's SHA-256 is checked against the sidecar first.
    """
    out = Path(out_dir)
    meta = json.loads((out / SIDECAR).read_text())
    if verify:
        for name, digest in meta.get("sha256", {}).items():
            if sha256(out / name) != digest:
                raise ChecksumMismatch(f"{out / name} does not match its recorded checksum")
    shape = (meta["H"], meta["W"])
    maps = np.stack([read_raw(out / f, shape) for f in meta["files"]])
    mask = np.fromfile(out / meta["mask"], dtype=np.uint8).reshape(shape).astype(bool)
    return maps, mask, meta
