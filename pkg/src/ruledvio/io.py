"""Dataset layout and file formats.

A dataset directory holds:

    imu.csv           "t,ax,ay,az,gx,gy,gz", seconds and SI units
    observations.csv  "t,x,y", normalized undistorted coordinates
    frames.csv        "t,filename" index of frames/ (optional raster source)
    frames/*.pgm      8-bit grayscale, binary P5
    intrinsics.json   fx, fy, cx, cy, width, height in pixels
    truth.json        frame-time-indexed camera states and world line endpoints
    config.json       pipeline + solver knobs

All writes go through a write-temp-then-rename helper so interrupted runs
never leave a partial file that parses.  Floats are serialized with repr-
level precision so identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import FramePoints, Intrinsics
from .imu import ImuTrack


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# CSV formats


def write_imu_csv(path, track: ImuTrack):
    rows = ["t,ax,ay,az,gx,gy,gz"]
    for t, a, g in zip(track.times, track.accel, track.gyro):
        rows.append(",".join([_fmt(t), _fmt(a[0]), _fmt(a[1]), _fmt(a[2]),
                              _fmt(g[0]), _fmt(g[1]), _fmt(g[2])]))
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_imu_csv(path) -> ImuTrack:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 7:
        raise ValueError(f"{path}: expected 7 columns t,ax,ay,az,gx,gy,gz")
    return ImuTrack(data[:, 0], data[:, 1:4], data[:, 4:7])


def write_observations_csv(path, frames: list):
    rows = ["t,x,y"]
    for fp in frames:
        ts = _fmt(fp.t)
        for p in fp.points:
            rows.append(f"{ts},{_fmt(p[0])},{_fmt(p[1])}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_observations_csv(path) -> list:
    """Rows grouped into FramePoints by exact repeated timestamp."""
    frames = []
    cur_t = None
    cur_pts: list = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "t,x,y":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            ts, xs, ys = line.split(",")
            t = float(ts)
            if cur_t is None or t != cur_t:
                if cur_t is not None:
                    frames.append(FramePoints(t=cur_t, points=np.array(cur_pts)))
                cur_t = t
                cur_pts = []
            cur_pts.append((float(xs), float(ys)))
    if cur_t is not None:
        frames.append(FramePoints(t=cur_t, points=np.array(cur_pts)))
    return frames


def write_trajectory_csv(path, timestamps, positions):
    rows = ["t,x,y,z"]
    for t, p in zip(timestamps, positions):
        rows.append(f"{_fmt(t)},{_fmt(p[0])},{_fmt(p[1])},{_fmt(p[2])}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_trajectory_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:4]


def write_lines_csv(path, odometry):
    header = ("t_start,line,x0_x,x0_y,x0_z,v0_x,v0_y,v0_z,"
              "basis_x0_x,basis_x0_y,basis_x0_z,basis_v0_x,basis_v0_y,basis_v0_z")
    rows = [header]
    for w, (cam, basis) in enumerate(zip(odometry.window_line_states, odometry.basis_line_states)):
        t = _fmt(odometry.window_times[w])
        for i, (lc, lb) in enumerate(zip(cam, basis)):
            vals = [t, str(i)]
            vals += [_fmt(v) for v in lc.x0] + [_fmt(v) for v in lc.v0]
            vals += [_fmt(v) for v in lb.x0] + [_fmt(v) for v in lb.v0]
            rows.append(",".join(vals))
    atomic_write_text(path, "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# PGM rasters


def write_pgm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM writer expects a 2-D uint8 image")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    img = np.frombuffer(data[pos:pos + width * height], dtype=np.uint8)
    return img.reshape(height, width)


# ---------------------------------------------------------------------------
# Intrinsics and dataset layout


def write_intrinsics_json(path, intr: Intrinsics):
    write_json(path, {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                      "width": intr.width, "height": intr.height})


def read_intrinsics_json(path) -> Intrinsics:
    d = read_json(path)
    return Intrinsics(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                      cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))


@dataclass
class DatasetLayout:
    """A dataset directory with its mandatory and optional members."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def imu_path(self) -> Path:
        return self.root / "imu.csv"

    @property
    def observations_path(self) -> Path:
        return self.root / "observations.csv"

    @property
    def frames_csv_path(self) -> Path:
        return self.root / "frames.csv"

    @property
    def frames_dir(self) -> Path:
        return self.root / "frames"

    @property
    def intrinsics_path(self) -> Path:
        return self.root / "intrinsics.json"

    @property
    def truth_path(self) -> Path:
        return self.root / "truth.json"

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    def validate(self) -> list[str]:
        problems = []
        if not self.root.is_dir():
            return [f"{self.root}: not a directory"]
        if not self.imu_path.is_file():
            problems.append("imu.csv: missing")
        if not (self.observations_path.is_file() or self.frames_csv_path.is_file()):
            problems.append("observations.csv or frames.csv: one observation source required")
        if not self.intrinsics_path.is_file():
            problems.append("intrinsics.json: missing")
        return problems

    def load_imu(self) -> ImuTrack:
        return read_imu_csv(self.imu_path)

    def load_frames(self) -> list:
        return read_observations_csv(self.observations_path)

    def load_rasters(self):
        """(times, images) from frames.csv, or None when absent."""
        if not self.frames_csv_path.is_file():
            return None
        times = []
        images = []
        with open(self.frames_csv_path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "t,filename":
                raise ValueError(f"{self.frames_csv_path}: unexpected header {header!r}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                ts, name = line.split(",", 1)
                times.append(float(ts))
                images.append(read_pgm(self.frames_dir / name))
        return times, images

    def load_intrinsics(self) -> Intrinsics:
        return read_intrinsics_json(self.intrinsics_path)

    def load_truth(self):
        if not self.truth_path.is_file():
            return None
        from .sim import GroundTruth
        return GroundTruth.from_dict(read_json(self.truth_path))

    def load_config(self) -> dict:
        if not self.config_path.is_file():
            return {}
        return read_json(self.config_path)


def write_dataset(out_dir, sim_result, config: dict | None = None):
    """Persist a synthesized sequence as a DatasetLayout directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout = DatasetLayout(out)
    write_imu_csv(layout.imu_path, sim_result.imu)
    write_observations_csv(layout.observations_path, sim_result.frames)
    write_intrinsics_json(layout.intrinsics_path, sim_result.spec.intrinsics)
    write_json(layout.truth_path, sim_result.truth.to_dict())
    if config is not None:
        write_json(layout.config_path, config)
    if sim_result.rasters is not None:
        layout.frames_dir.mkdir(exist_ok=True)
        rows = ["t,filename"]
        for i, (fp, img) in enumerate(zip(sim_result.frames, sim_result.rasters)):
            name = f"frame_{i:06d}.pgm"
            write_pgm(layout.frames_dir / name, img)
            rows.append(f"{_fmt(fp.t)},{name}")
        atomic_write_text(layout.frames_csv_path, "\n".join(rows) + "\n")
    return layout
