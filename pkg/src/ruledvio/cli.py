"""Command-line interface: simulate, estimate, evaluate, inspect.

Exit codes: 0 success, 2 input error, 3 detection failure, 4 estimation
infeasible.  `estimate` is deterministic: the same dataset, config and seed
produce byte-identical trajectory output.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .detect import EdgeMap
from .errors import EstimationInfeasible, NotEnoughLines, RuledVioError
from .geometry import FramePoints, canonicalize_line
from .pipeline import PipelineConfig, run_sequence
from .sim import ScenarioSpec, evaluate, synthesize

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DETECTION = 3
EXIT_INFEASIBLE = 4


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _parse_overrides(pairs):
    """--set key=value pairs into a nested dict; values parsed as JSON when
    possible, kept as strings otherwise."""
    out: dict = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        _err(f"{spec_path}: no such spec file")
        return EXIT_INPUT
    try:
        spec = ScenarioSpec.from_dict(io.read_json(spec_path))
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        _err(f"{spec_path}: {e}")
        return EXIT_INPUT
    problems = spec.validate()
    if problems:
        for p in problems:
            _err(f"{spec_path}: {p}")
        return EXIT_INPUT

    result = synthesize(spec)
    config = PipelineConfig()
    config.solver.seed = spec.seed
    io.write_dataset(args.out, result, config=config.to_dict())
    n_obs = sum(len(f) for f in result.frames)
    print(f"wrote {len(result.frames)} frames, {n_obs} observations, "
          f"{len(result.imu.times)} IMU samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def _harvest_frames_from_rasters(times, images, intrinsics, config: PipelineConfig):
    """Gradient-threshold every raster into a normalized point cloud."""
    frames = []
    for t, img in zip(times, images):
        em = EdgeMap.from_image(img, config.edge_threshold)
        frames.append(FramePoints(t=float(t), points=intrinsics.pixels_to_normalized(em.active)))
    return frames


def cmd_estimate(args) -> int:
    layout = io.DatasetLayout(args.dataset)
    problems = layout.validate()
    if problems:
        for p in problems:
            _err(f"{args.dataset}: {p}")
        return EXIT_INPUT

    try:
        config_dict = _merge(layout.load_config(), _parse_overrides(args.set))
        config = PipelineConfig.from_dict(config_dict)
    except (ValueError, json.JSONDecodeError) as e:
        _err(f"config: {e}")
        return EXIT_INPUT

    try:
        track = layout.load_imu()
        intrinsics = layout.load_intrinsics()
        raster_data = layout.load_rasters()
        if layout.observations_path.is_file():
            frames = layout.load_frames()
        else:
            frames = _harvest_frames_from_rasters(*raster_data, intrinsics, config)
    except (ValueError, OSError) as e:
        _err(str(e))
        return EXIT_INPUT

    rasters = None
    if raster_data is not None:
        rasters = raster_data[1]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    windows_path = out / "windows.jsonl"
    windows_fh = open(windows_path, "w", encoding="utf-8")

    def on_window(idx, w):
        record = {"index": idx, "t_start": w.t_start, "t_end": w.t_end}
        record.update({k: v for k, v in w.diagnostics.items()})
        windows_fh.write(json.dumps(record, sort_keys=True) + "\n")
        windows_fh.flush()

    start = time.perf_counter()
    try:
        seq = run_sequence(frames, track, config, intrinsics=intrinsics,
                           rasters=rasters, on_window=on_window)
    except NotEnoughLines as e:
        windows_fh.close()
        _err(f"detection failed: {e}")
        return EXIT_DETECTION
    except EstimationInfeasible as e:
        windows_fh.close()
        _err(f"estimation infeasible: {e}")
        return EXIT_INFEASIBLE
    except (ValueError, RuledVioError) as e:
        windows_fh.close()
        _err(str(e))
        return EXIT_INPUT
    finally:
        if not windows_fh.closed:
            windows_fh.close()

    io.write_trajectory_csv(out / "trajectory.csv", seq.odometry.timestamps, seq.odometry.positions)
    io.write_lines_csv(out / "lines.csv", seq.odometry)
    elapsed = time.perf_counter() - start
    print(f"estimated {len(seq.windows)} windows over {len(frames)} frames "
          f"in {elapsed:.1f}s -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


class _LoadedEstimate:
    def __init__(self, timestamps, positions, basis_line_states):
        self.timestamps = timestamps
        self.positions = positions
        self.basis_line_states = basis_line_states


def _load_lines_csv(path):
    if not Path(path).is_file():
        return None, None
    window_times = []
    per_window: list = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        try:
            idx = {name: header.index(name) for name in
                   ("t_start", "line", "basis_x0_x", "basis_x0_y", "basis_x0_z",
                    "basis_v0_x", "basis_v0_y", "basis_v0_z")}
        except ValueError as e:
            raise ValueError(f"{path}: missing column ({e})")
        for row in fh:
            row = row.strip()
            if not row:
                continue
            vals = row.split(",")
            t = float(vals[idx["t_start"]])
            if not window_times or t != window_times[-1]:
                window_times.append(t)
                per_window.append([])
            x0 = [float(vals[idx[f"basis_x0_{ax}"]]) for ax in "xyz"]
            v0 = [float(vals[idx[f"basis_v0_{ax}"]]) for ax in "xyz"]
            per_window[-1].append(canonicalize_line(x0, v0))
    return np.array(window_times), per_window


def _write_plot_data(out: Path, est, truth, odometry_lines, window_times):
    t = truth.frame_times
    est_interp = np.empty((len(t), 3))
    for k in range(3):
        est_interp[:, k] = np.interp(t, est.timestamps, est.positions[:, k])
    true_pos = truth.basis_positions(t)
    rows = ["t,est_x,true_x,est_y,true_y,est_z,true_z"]
    for i, ti in enumerate(t):
        vals = [ti]
        for k in range(3):
            vals += [est_interp[i, k], true_pos[i, k]]
        rows.append(",".join(format(v, ".10g") for v in vals))
    io.atomic_write_text(out / "plot_trajectory.csv", "\n".join(rows) + "\n")

    if odometry_lines:
        rows_x0 = ["t_start,line,x,y,z"]
        rows_v0 = ["t_start,line,vx,vy,vz"]
        for t_start, lines in zip(window_times, odometry_lines):
            for i, line in enumerate(lines):
                rows_x0.append(",".join([format(t_start, ".10g"), str(i)]
                                        + [format(v, ".10g") for v in line.x0]))
                rows_v0.append(",".join([format(t_start, ".10g"), str(i)]
                                        + [format(v, ".10g") for v in line.v0]))
        io.atomic_write_text(out / "plot_directrix.csv", "\n".join(rows_x0) + "\n")
        io.atomic_write_text(out / "plot_ruling.csv", "\n".join(rows_v0) + "\n")


def _write_svg_plots(out: Path, truth):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = np.loadtxt(out / "plot_trajectory.csv", delimiter=",", skiprows=1, ndmin=2)
    fig, axes = plt.subplots(3, 1, figsize=(8, 9), sharex=True)
    for k, name in enumerate("XYZ"):
        axes[k].plot(data[:, 0], data[:, 2 * k + 2], label="true", lw=1.5)
        axes[k].plot(data[:, 0], data[:, 2 * k + 1], label="estimated", lw=1.0)
        axes[k].set_ylabel(f"{name} (m)")
        axes[k].legend(loc="upper right")
    axes[-1].set_xlabel("t (s)")
    fig.tight_layout()
    fig.savefig(out / "trajectory.svg")
    plt.close(fig)


def cmd_evaluate(args) -> int:
    est_dir = Path(args.estimate)
    traj_path = est_dir / "trajectory.csv"
    if not traj_path.is_file():
        _err(f"{traj_path}: missing")
        return EXIT_INPUT

    truth_path = Path(args.truth)
    if truth_path.is_dir():
        truth_path = truth_path / "truth.json"
    if not truth_path.is_file():
        _err(f"{truth_path}: missing")
        return EXIT_INPUT

    from .sim import GroundTruth
    try:
        truth = GroundTruth.from_dict(io.read_json(truth_path))
        timestamps, positions = io.read_trajectory_csv(traj_path)
        window_times, basis_lines = _load_lines_csv(est_dir / "lines.csv")
    except (ValueError, KeyError, OSError) as e:
        _err(str(e))
        return EXIT_INPUT

    est = _LoadedEstimate(timestamps, positions, basis_lines)
    try:
        report = evaluate(est, truth)
    except RuledVioError as e:
        _err(str(e))
        return EXIT_INPUT

    out = Path(args.out) if args.out else est_dir
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "report.json", report.to_dict())
    _write_plot_data(out, est, truth, basis_lines, window_times)
    if args.svg:
        _write_svg_plots(out, truth)

    for ax in "XYZ":
        s = report.axes[ax]
        print(f"{ax}: {s.mean:.4f} ± {s.std:.4f} m")
    for i, s in enumerate(report.lines or []):
        print(f"line {i}: {s.mean:.4f} ± {s.std:.4f} m")
    print(f"report -> {out / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> int:
    layout = io.DatasetLayout(args.dataset)
    problems = layout.validate()
    if problems:
        for p in problems:
            _err(f"{args.dataset}: {p}")
        return EXIT_INPUT
    try:
        track = layout.load_imu()
        frames = layout.load_frames() if layout.observations_path.is_file() else []
        config = layout.load_config()
    except (ValueError, OSError) as e:
        _err(str(e))
        return EXIT_INPUT

    print(f"dataset: {layout.root}")
    dt = np.diff(track.times)
    print(f"imu: {len(track.times)} samples, {1.0 / np.median(dt):.1f} Hz, "
          f"span [{track.t_start:.3f}, {track.t_end:.3f}] s")
    if frames:
        counts = [len(f) for f in frames]
        rate = (len(frames) - 1) / (frames[-1].t - frames[0].t) if len(frames) > 1 else 0.0
        print(f"frames: {len(frames)} at {rate:.1f} fps, "
              f"span [{frames[0].t:.3f}, {frames[-1].t:.3f}] s")
        print(f"observations per frame: min {min(counts)}, "
              f"mean {sum(counts) / len(counts):.1f}, max {max(counts)}")
    raster = layout.load_rasters()
    if raster is not None:
        print(f"rasters: {len(raster[0])} PGM frames")
    print(f"truth: {'present' if layout.truth_path.is_file() else 'absent'}")
    if config:
        print("config:")
        for line in json.dumps(config, indent=2, sort_keys=True).splitlines():
            print(f"  {line}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ruledvio",
        description="Correspondence-free visual-inertial odometry from ruled surfaces")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a dataset from a scenario spec")
    p.add_argument("spec", help="scenario JSON file")
    p.add_argument("out", help="output dataset directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run the sliding-window estimator on a dataset")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("out", help="output directory for trajectory.csv etc.")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, e.g. --set solver.seed=7 or --set window_frames=60")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="compare an estimate against ground truth")
    p.add_argument("estimate", help="directory holding trajectory.csv")
    p.add_argument("truth", help="truth.json file or dataset directory containing it")
    p.add_argument("--out", default=None, help="report/plot output directory (default: estimate dir)")
    p.add_argument("--svg", action="store_true", help="also render SVG plots (needs matplotlib)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="summarize a dataset directory")
    p.add_argument("dataset", help="dataset directory")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
