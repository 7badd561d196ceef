"""End-to-end displacement estimation: embed, solve for consistency, refine."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .consistency import (PlaneParams, TransformField, apply_transform, build_consistency_system,
                          normalize_temporal_std, solve_smallest_eigenvector)
from .embedding import EmbeddingField, Grid, embed_all
from .errors import SpeckleMotionError
from .features import ValidDomain, consecutive_distances
from .imageio import FrameSequence
from .refine import (DisplacementMap, OptimizeReport, RefineProblem, extract_displacement, init_scale,
                     interpolate_transforms, optimize)

log = logging.getLogger(__name__)


class StageError(SpeckleMotionError):
    """Wraps an error raised inside a pipeline stage, keeping the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class AnalysisResult:
    displacement: DisplacementMap
    coarse: PlaneParams
    coarse_transforms: TransformField
    domain: ValidDomain
    transforms: TransformField | None = None
    report: OptimizeReport | None = None
    timings: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "domain": self.domain.as_dict(),
            "coarse_grid": self.coarse.grid.as_dict(),
            "coarse_eigenvalue": float(self.coarse_transforms.eigenvalue),
            "coarse_active": int(self.coarse_transforms.active.sum()),
            "timings": {k: round(v, 3) for k, v in self.timings.items()},
        }
        if self.report is not None:
            r = self.report
            out["optimizer"] = {"iterations": r.iterations, "objective": float(r.objective),
                                "initial_objective": float(r.history[0]), "converged": r.converged,
                                "global_scale": float(r.scale),
                                "monotone": bool(np.all(np.diff(r.history) <= 0))}
        return out


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except SpeckleMotionError as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
        log.info("stage %s: %.2fs", name, self.timings[name])
        return result


def steps_at(steps: np.ndarray, grid: Grid, radius: int) -> np.ndarray:
    """Feature step lengths (pixels, N - 1) at lattice pixels from a consecutive_distances array."""
    px = grid.pixels()
    return steps[:, px[:, 1] - radius, px[:, 0] - radius].T


def coarse_solve(seq: FrameSequence, cfg: PipelineConfig, stages: _Stages | None = None,
                 threads: int | None = None):
    stages = stages or _Stages()
    domain = stages.run("features", ValidDomain.for_shape, seq.shape, cfg.patch_size)
    grid = Grid.over(domain, cfg.subsample_stride)
    field_c = stages.run("embedding", embed_all, seq, cfg, grid, threads)
    norm = normalize_temporal_std(field_c, cfg.epsilon, cfg.center_embedding)
    system = stages.run("consistency", build_consistency_system, norm, cfg.neighborhood_radius,
                        cfg.slope_weight)
    tf = stages.run("consistency", solve_smallest_eigenvector, system, cfg.dense_eig_limit)
    return domain, field_c, norm, tf, apply_transform(norm, tf)


def analyze(seq: FrameSequence, cfg: PipelineConfig | None = None, threads: int | None = None,
            tile_rows: int | None = None, on_coarse=None) -> AnalysisResult:
    """Estimate per-frame out-of-plane displacement maps, up to global sign and scale.

    With ``cfg.temporal`` false only the coarse consistency solve runs and the
    maps are lattice-sized; otherwise the coarse solution seeds the
    full-resolution refinement and maps are H x W with a valid-domain mask.
    ``on_coarse(plane_params)`` is called as soon as the coarse solve is done,
    so callers can persist it before the expensive stages.
    """
    cfg = cfg or PipelineConfig()
    stages = _Stages()
    domain, field_c, norm_c, tf_c, pp_c = coarse_solve(seq, cfg, stages, threads)
    if on_coarse is not None:
        on_coarse(pp_c)
    if not cfg.temporal:
        disp = extract_displacement(pp_c, frame_rate=seq.frame_rate)
        return AnalysisResult(disp, pp_c, tf_c, domain, timings=stages.timings)

    r = cfg.radius
    steps = stages.run("features", consecutive_distances, seq.frames, cfg.patch_size)
    pp_s = stages.run("refine", init_scale, pp_c, steps_at(steps, pp_c.grid, r), cfg.epsilon)
    full = Grid.over(domain, 1)
    if cfg.subsample_stride == 1:
        field_f = field_c
    else:
        field_f = stages.run("embedding", embed_all, seq, cfg, full, threads)
    norm_f = normalize_temporal_std(field_f, cfg.epsilon, cfg.center_embedding)
    tf_f = stages.run("refine", interpolate_transforms, tf_c, norm_f, pp_s, cfg.patch_size)
    problem = RefineProblem.build(norm_f, steps_at(steps, full, r), cfg, tile_rows=tile_rows)
    tf_o, report = stages.run("refine", optimize, tf_f, problem, cfg.max_iters, cfg.tol)
    pp = apply_transform(norm_f, tf_o)
    disp = extract_displacement(pp, seq.shape, seq.frame_rate)
    return AnalysisResult(disp, pp_c, tf_c, domain, tf_o, report, stages.timings)
