"""Command-line workflow: simulate -> analyze -> metrics -> render.

Every command writes a ``manifest.json`` next to its outputs holding the full
config, inputs with checksums, package versions, per-stage timings and the
seed; ``analyze --manifest`` replays a previous run from that file.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad arguments,
unknown scenario, missing input frames, invalid config).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import PipelineConfig, parse_overrides, read_kv
from .errors import ConfigError, InvalidScene, MissingFrame, SpeckleMotionError, UnknownScenario
from .imageio import load_sequence, read_displacement, sha256, write_displacement, write_frames
from .pipeline import StageError, analyze
from .simulator import make_scenario, render_sequence, scenario_defaults

log = logging.getLogger("specklemotion")

MANIFEST = "manifest.json"
USAGE_ERRORS = (UnknownScenario, MissingFrame, ConfigError, InvalidScene)


class UsageError(SpeckleMotionError):
    pass


def versions() -> dict:
    return {"specklemotion": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out: Path, payload: dict) -> Path:
    payload = dict(payload, versions=versions())
    path = out / MANIFEST
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_plain) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        raise UsageError(f"no manifest at {path}")
    return json.loads(path.read_text())


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _existing(path: str, what: str) -> Path:
    if not Path(path).is_file():
        raise UsageError(f"no {what} file at {path}")
    return Path(path)


def _checksums(root: Path, names) -> dict:
    return {str(n): sha256(root / n) for n in names}


# ---- simulate -----------------------------------------------------------


def cmd_simulate(args) -> int:
    overrides = read_kv(_existing(args.params, "params")) if args.params else {}
    overrides.update(parse_overrides(args.set))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    t0 = time.perf_counter()
    scene, motion = make_scenario(args.scenario, **overrides)
    seq, motion = render_sequence(scene, motion)
    t_render = time.perf_counter() - t0
    out = Path(args.out)
    pattern = write_frames(seq, out / "frames")
    write_displacement(motion.d_true, out / "truth", frame_rate=motion.frame_rate,
                       extra={"kind": motion.kind, "params": motion.params})
    frame_names = sorted(p.name for p in (out / "frames").glob("*.png"))
    params = scenario_defaults(args.scenario)
    params.update(overrides)
    write_manifest(out, {
        "command": "simulate",
        "scenario": args.scenario,
        "params": params,
        "scene": scene.as_dict(),
        "motion": {"kind": motion.kind, "params": motion.params},
        "seed": scene.seed,
        "frame_rate": seq.frame_rate,
        "n_frames": seq.n_frames,
        "shape": list(seq.shape),
        "frames": str(Path("frames") / Path(pattern).name),
        "truth": "truth",
        "outputs": _checksums(out / "frames", frame_names),
        "timings": {"render": round(t_render, 3)},
    })
    print(f"wrote {seq.n_frames} frames of {seq.shape[0]}x{seq.shape[1]} to {out}")
    return 0


# ---- analyze ------------------------------------------------------------


def _resolve_input(src: str, frame_rate: float | None) -> tuple[str, float, dict]:
    """Frame pattern, frame rate and (if any) the producing manifest for an input."""
    path = Path(src)
    if path.is_dir():
        meta = read_manifest(path) if (path / MANIFEST).is_file() else {}
        if "frames" in meta:
            pattern = str(path / meta["frames"])
        elif list(path.glob("frame_*.png")):
            pattern = str(path / "frame_{index}.png")
        else:
            raise MissingFrame(f"no frames found in {path}")
        rate = frame_rate or meta.get("frame_rate")
    else:
        pattern, meta, rate = src, {}, frame_rate
    if not rate:
        raise UsageError("frame rate unknown: pass --frame-rate")
    return pattern, float(rate), meta


def _load_config(args, manifest: dict | None) -> PipelineConfig:
    values: dict = {}
    if manifest is not None:
        values.update(manifest.get("config", {}))
    if args.config:
        values.update(read_kv(_existing(args.config, "config")))
    values.update(parse_overrides(args.set))
    if args.threads:
        values["threads"] = args.threads
    return PipelineConfig.from_mapping(values)


def cmd_analyze(args) -> int:
    replay = read_manifest(args.manifest) if args.manifest else None
    src = args.input
    if src is None:
        if replay is None:
            raise UsageError("analyze needs an input directory, a frame pattern or --manifest")
        src = replay["input"]
    cfg = _load_config(args, replay)
    if cfg.extra:
        log.warning("ignoring unknown config keys: %s", ", ".join(sorted(cfg.extra)))
    rate = args.frame_rate or (replay or {}).get("frame_rate")
    pattern, rate, in_meta = _resolve_input(src, rate)
    t0 = time.perf_counter()
    seq = load_sequence(pattern, rate)
    t_load = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # thread count is excluded from the written config so outputs do not depend on it
    echo = {k: v for k, v in cfg.to_dict().items() if k != "threads"}

    def keep_coarse(pp):
        d = pp.displacement.T.reshape(seq.n_frames, pp.grid.ny, pp.grid.nx)
        write_displacement(d, out / "coarse", rate, echo, extra={"grid": pp.grid.as_dict()})

    try:
        res = analyze(seq, cfg, on_coarse=keep_coarse)
    except StageError as exc:
        write_manifest(out, {"command": "analyze", "input": src, "status": "failed",
                             "stage": exc.stage, "error": str(exc), "config": cfg.to_dict()})
        raise
    disp_meta = write_displacement(
        res.displacement, out / "displacement", rate, echo, previews=cfg.previews,
        extra={"grid": (res.coarse.grid if not cfg.temporal else res.transforms.grid).as_dict(),
               "temporal": cfg.temporal},
    )
    summary = res.summary()
    summary["timings"]["load"] = round(t_load, 3)
    write_manifest(out, {
        "command": "analyze",
        "status": "ok",
        "input": str(src),
        "frames": pattern,
        "frame_rate": rate,
        "n_frames": seq.n_frames,
        "input_manifest": in_meta.get("scenario"),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "summary": summary,
        "timings": summary["timings"],
        "outputs": {f"displacement/{k}": v for k, v in disp_meta["sha256"].items()},
    })
    opt = summary.get("optimizer")
    if opt:
        print(f"refined in {opt['iterations']} iterations, objective "
              f"{opt['initial_objective']:.4g} -> {opt['objective']:.4g}")
    print(f"wrote {seq.n_frames} displacement maps to {out / 'displacement'}")
    return 0


# ---- metrics ------------------------------------------------------------


def _truth_at(truth: np.ndarray, meta: dict, shape) -> np.ndarray:
    """Ground truth sampled where the estimate lives (lattice or full image)."""
    if truth.shape[1:] == tuple(shape):
        return truth
    g = meta.get("grid")
    if not g:
        raise UsageError(f"estimate {tuple(shape)} and truth {truth.shape[1:]} do not align")
    ys = g["y0"] + g["stride"] * np.arange(g["ny"])
    xs = g["x0"] + g["stride"] * np.arange(g["nx"])
    return truth[:, ys][:, :, xs]


def evaluate(run: Path, truth_dir: Path | None, reference: Path | None, pixel, n_pixels: int,
             seed: int, axis: str | None):
    from . import metrics

    maps, mask, meta = read_displacement(run / "displacement")
    maps = maps.astype(np.float64)
    rate = meta.get("frame_rate") or 1.0
    report = metrics.EvalReport(metadata={"run": str(run), "n_frames": int(maps.shape[0]),
                                          "valid_pixels": int(mask.sum())})
    series = maps[:, mask].T  # (pixels, N)
    plots = {}
    if truth_dir is not None:
        truth, _, tmeta = read_displacement(truth_dir)
        truth = _truth_at(truth.astype(np.float64), meta, maps.shape[1:])
        tseries = truth[:, mask].T
        kind = tmeta.get("kind", "")
        report.metadata["truth_kind"] = kind
        moving = np.ptp(tseries, axis=1) > 0
        if kind == "step-offset":
            frames_per = int(tmeta["params"]["frames_per_offset"])
            offsets = np.asarray(tmeta["params"]["offsets"], dtype=np.float64)
            per_frame = series.mean(axis=0)
            est = per_frame.reshape(len(offsets), frames_per).mean(axis=1)
            report.linearity_rmse, report.linearity_r = metrics.linearity(est, offsets)
            scaled = metrics.minmax_scale(est)
            if np.corrcoef(scaled, offsets)[0, 1] < 0:
                scaled = 1.0 - scaled
            plots["linearity"] = (offsets, scaled)
        elif moving.any():
            vals, sign = metrics.aligned_ncc(series[moving], tseries[moving])
            rng = np.random.default_rng(seed)
            pick = np.sort(rng.choice(len(vals), size=min(n_pixels, len(vals)), replace=False))
            ys, xs = np.nonzero(mask)
            idx = np.flatnonzero(moving)[pick]
            report.ncc.update({f"{xs[i]},{ys[i]}": float(vals[j]) for i, j in zip(idx, pick)})
            report.ncc["median_all"] = float(np.median(vals))
            report.ncc["min_all"] = float(vals.min())
            report.metadata["sign"] = sign
            if maps.shape[0] >= 8:
                # nominal drive frequency when the truth records one, else the truth's own peak
                f_true = tmeta.get("params", {}).get("freq")
                if f_true is None:
                    f_true = metrics.spectral_peaks(tseries[moving].mean(axis=0), rate)
                peaks = metrics.spectral_peaks(series, rate)
                bin_hz = rate / maps.shape[0]
                report.spectral_peak_hz.update({
                    "truth": float(f_true), "median": float(np.median(peaks)),
                    "fraction_within_bin": float(np.mean(np.abs(peaks - f_true) <= bin_hz + 1e-9)),
                    "bin_width": bin_hz})
                f, p = metrics.power_spectrum(series, rate)
                plots["spectrum"] = (f, p.mean(axis=0), float(np.median(peaks)))
            plots["trace"] = (series[pick[0] if len(pick) else 0], tseries[pick[0] if len(pick) else 0])
        if kind == "traveling-pulse":
            ax = axis or tmeta["params"].get("axis", "column")
            report.wave_speed = metrics.wavefront_speed(maps, ax, mask)
            report.metadata["wave_axis"] = ax
            report.metadata["true_speed"] = tmeta["params"].get("speed")
    if reference is not None:
        ref = metrics.read_reference_csv(reference)
        if ref.size != maps.shape[0]:
            raise UsageError(f"reference has {ref.size} samples, run has {maps.shape[0]} frames")
        if pixel is None:
            trace = series.mean(axis=0)
            key = "reference:mean"
        else:
            x, y = pixel
            if not (0 <= y < mask.shape[0] and 0 <= x < mask.shape[1] and mask[y, x]):
                raise UsageError(f"pixel {(x, y)} is outside the valid mask")
            trace = maps[:, y, x]
            key = f"reference:{x},{y}"
        report.ncc[key] = abs(metrics.ncc(trace, ref))
        plots.setdefault("trace", (trace, ref))
    return report, plots, (maps, mask, meta)


def cmd_metrics(args) -> int:
    from . import plotting

    run = Path(args.run)
    if not (run / "displacement").is_dir():
        raise UsageError(f"{run} is not an analyze run (no displacement/ directory)")
    truth_dir = None
    if args.truth:
        truth_dir = Path(args.truth)
        if (truth_dir / "truth").is_dir():
            truth_dir = truth_dir / "truth"
        if not truth_dir.is_dir():
            raise UsageError(f"no ground truth at {args.truth}")
    if args.reference and not Path(args.reference).is_file():
        raise UsageError(f"no reference file at {args.reference}")
    if truth_dir is None and not args.reference:
        raise UsageError("metrics needs --truth or --reference")
    pixel = tuple(int(v) for v in args.pixel.split(",")) if args.pixel else None
    report, plots, (maps, mask, _) = evaluate(run, truth_dir, Path(args.reference) if args.reference else None,
                                              pixel, args.pixels, args.seed, args.axis)
    out = Path(args.out or run / "metrics")
    jpath, cpath = report.write(out)
    figs = []
    if "linearity" in plots:
        figs.append(plotting.plot_linearity(*plots["linearity"], out / "linearity.png"))
    if "spectrum" in plots:
        f, p, peak = plots["spectrum"]
        figs.append(plotting.plot_spectrum(f, p, out / "spectrum.png", peak))
    if "trace" in plots:
        from .metrics import minmax_scale

        est, ref = plots["trace"]
        if np.corrcoef(est, ref)[0, 1] < 0:
            est = -est
        try:
            figs.append(plotting.plot_traces(np.arange(len(est)), {"estimate": minmax_scale(est),
                                                                    "reference": minmax_scale(ref)},
                                             out / "trace.png"))
        except SpeckleMotionError:
            pass
    if report.wave_speed is not None:
        live = np.argsort(np.abs(maps[:, mask]).mean(axis=1))[-4:]
        figs.append(plotting.plot_slices(maps, mask, np.sort(live), out / "slices.png",
                                         report.metadata.get("wave_axis", "column")))
    print(report.to_json())
    print(f"wrote {jpath}, {cpath} and {len(figs)} figure(s)")
    return 0


# ---- render -------------------------------------------------------------


def cmd_render(args) -> int:
    from . import plotting

    run = Path(args.run)
    src = run / "displacement" if (run / "displacement").is_dir() else run
    maps, mask, meta = read_displacement(src)
    n = maps.shape[0]
    if args.frames:
        frames = [int(v) for v in args.frames.split(",")]
        bad = [i for i in frames if not 0 <= i < n]
        if bad:
            raise UsageError(f"frames {bad} out of range 0..{n - 1}")
    else:
        frames = np.linspace(0, n - 1, min(args.count, n)).round().astype(int).tolist()
    out = Path(args.out or run / "figures")
    paths = [plotting.plot_map_strip(maps, mask, frames, out / "maps.png"),
             plotting.plot_slices(maps, mask, frames, out / "slices.png", args.axis)]
    trace = maps[:, mask].mean(axis=1).astype(np.float64)
    rate = meta.get("frame_rate") or 1.0
    np.savetxt(out / "mean_trace.csv", np.column_stack([np.arange(n), np.arange(n) / rate, trace]),
               delimiter=",", header="frame,time_s,mean_displacement", comments="", fmt="%.9g")
    if n >= 8:
        from .metrics import power_spectrum

        f, p = power_spectrum(maps[:, mask].T.astype(np.float64), rate)
        paths.append(plotting.plot_spectrum(f, p.mean(axis=0), out / "spectrum.png"))
    print(f"wrote {len(paths)} figure(s) and mean_trace.csv to {out}")
    return 0


# ---- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specklemotion", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic speckle scenario")
    s.add_argument("scenario")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--params", help="key = value file of scenario parameters")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario parameter")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="estimate displacement maps from a frame sequence")
    a.add_argument("input", nargs="?", help="simulate output directory or frame pattern with {index}")
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="key = value config file")
    a.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    a.add_argument("--threads", type=int)
    a.add_argument("--frame-rate", type=float)
    a.add_argument("--manifest", help="replay the config and input of a previous analyze run")
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("metrics", help="evaluate a run against ground truth or a reference signal")
    m.add_argument("run")
    m.add_argument("--truth", help="simulate output directory or truth directory")
    m.add_argument("--reference", help="CSV file with one reference signal")
    m.add_argument("--pixel", help="x,y pixel compared with the reference (default: spatial mean)")
    m.add_argument("--pixels", type=int, default=10, help="number of random pixels reported")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--axis", choices=("row", "column"))
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)

    r = sub.add_parser("render", help="render displacement maps and profiles to PNG")
    r.add_argument("run")
    r.add_argument("--out")
    r.add_argument("--frames", help="comma-separated frame indices")
    r.add_argument("--count", type=int, default=6)
    r.add_argument("--axis", choices=("row", "column"), default="column")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        if isinstance(exc.cause, USAGE_ERRORS):
            print(f"error: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, *USAGE_ERRORS) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (SpeckleMotionError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
