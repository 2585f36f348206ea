"""Synthetic ground-truth generator.

Builds closed-form camera trajectories over a static scene of 3D lines,
synthesizes the IMU stream (specific force with gravity, bias and white
noise; body rates with noise), samples image-time point clouds from the
visible stretch of every ruling, and optionally renders raster frames.  The
analytic trajectory doubles as the oracle for every accuracy statement made
about the estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import LineNotVisible, TimeRangeMismatch
from .estimator import PointSet, SurfaceSetParams
from .geometry import FramePoints, Intrinsics, LineState, canonicalize_line
from .imu import ImuTrack
from .rotations import quat_conj, quat_from_rotvec, quat_rotate, quat_slerp

DEFAULT_INTRINSICS = Intrinsics(fx=500.0, fy=500.0, cx=319.5, cy=239.5, width=640, height=480)

_GEN_DEPTH_MIN = 0.01   # generation-side visibility floor, meters
_ALPHA_CAP = 100.0      # cap on sampled ruling displacement, meters

TRAJECTORY_KINDS = (
    "linear_parallel",
    "linear_perpendicular",
    "circular_parallel",
    "circular_perpendicular",
    "circular_tilted",
    "zigzag",
    "square",
    "waypoints",
)

ROTATION_KINDS = ("none", "rot_x", "rot_y", "rot_z")


# ---------------------------------------------------------------------------
# Closed-form trajectories


class SinusoidTrajectory:
    """C(t) = amplitude * sin(omega t) * direction."""

    def __init__(self, direction, amplitude: float, period: float):
        self.u = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
        self.A = float(amplitude)
        self.omega = 2.0 * math.pi / float(period)

    def position(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.A * np.sin(self.omega * t)[:, None] * self.u[None, :]

    def velocity(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.A * self.omega * np.cos(self.omega * t)[:, None] * self.u[None, :]

    def acceleration(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return -self.A * self.omega**2 * np.sin(self.omega * t)[:, None] * self.u[None, :]


class CircleTrajectory:
    """Circle of radius ``amplitude`` through the origin in the (u1, u2) plane."""

    def __init__(self, u1, u2, amplitude: float, period: float):
        self.u1 = np.asarray(u1, dtype=float) / np.linalg.norm(u1)
        self.u2 = np.asarray(u2, dtype=float) / np.linalg.norm(u2)
        self.A = float(amplitude)
        self.omega = 2.0 * math.pi / float(period)

    def position(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.sin(self.omega * t)[:, None]
        c = (1.0 - np.cos(self.omega * t))[:, None]
        return self.A * (s * self.u1[None, :] + c * self.u2[None, :])

    def velocity(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.sin(self.omega * t)[:, None]
        c = np.cos(self.omega * t)[:, None]
        return self.A * self.omega * (c * self.u1[None, :] + s * self.u2[None, :])

    def acceleration(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.sin(self.omega * t)[:, None]
        c = np.cos(self.omega * t)[:, None]
        return self.A * self.omega**2 * (-s * self.u1[None, :] + c * self.u2[None, :])


class PiecewiseConstantAccelTrajectory:
    """Exact integration of a schedule of (duration, acceleration) segments.

    Past the end of the schedule the body coasts with its final velocity.
    """

    def __init__(self, segments):
        durs = np.array([s[0] for s in segments], dtype=float)
        accs = np.array([s[1] for s in segments], dtype=float).reshape(-1, 3)
        if np.any(durs <= 0):
            raise ValueError("segment durations must be positive")
        self.bounds = np.concatenate([[0.0], np.cumsum(durs)])
        self.accs = accs
        n = len(segments)
        self.v0 = np.zeros((n + 1, 3))
        self.p0 = np.zeros((n + 1, 3))
        for k in range(n):
            dt = durs[k]
            self.v0[k + 1] = self.v0[k] + accs[k] * dt
            self.p0[k + 1] = self.p0[k] + self.v0[k] * dt + 0.5 * accs[k] * dt * dt

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.bounds, t, side="right") - 1, 0, len(self.accs) - 1)
        dt = t - self.bounds[idx]
        # clamp past-the-end queries onto a coasting extension
        past = t > self.bounds[-1]
        return idx, dt, past

    def position(self, t):
        idx, dt, past = self._locate(t)
        pos = self.p0[idx] + self.v0[idx] * dt[:, None] + 0.5 * self.accs[idx] * dt[:, None] ** 2
        if np.any(past):
            over = np.atleast_1d(np.asarray(t, dtype=float))[past] - self.bounds[-1]
            pos[past] = self.p0[-1] + self.v0[-1] * over[:, None]
        return pos

    def velocity(self, t):
        idx, dt, past = self._locate(t)
        vel = self.v0[idx] + self.accs[idx] * dt[:, None]
        if np.any(past):
            vel[past] = self.v0[-1]
        return vel

    def acceleration(self, t):
        idx, _, past = self._locate(t)
        acc = self.accs[idx].copy()
        if np.any(past):
            acc[past] = 0.0
        return acc


class WaypointTrajectory:
    """Clamped cubic spline through (time, position) waypoints."""

    def __init__(self, times, positions):
        times = np.asarray(times, dtype=float)
        positions = np.asarray(positions, dtype=float).reshape(len(times), 3)
        positions = positions - positions[0]  # camera starts at the origin
        self.spline = CubicSpline(times, positions, bc_type="clamped")
        self._dv = self.spline.derivative(1)
        self._da = self.spline.derivative(2)

    def position(self, t):
        return np.atleast_2d(self.spline(np.atleast_1d(t)))

    def velocity(self, t):
        return np.atleast_2d(self._dv(np.atleast_1d(t)))

    def acceleration(self, t):
        return np.atleast_2d(self._da(np.atleast_1d(t)))


def _zigzag_segments(amplitude: float, period: float, duration: float):
    # trapezoidal velocity: short acceleration bursts at each reversal,
    # constant-velocity legs between, so the position traces a zigzag with
    # rounded (finite-acceleration) corners
    ta = period / 8.0
    tc = period / 4.0
    a = 64.0 * amplitude / (3.0 * period**2)
    ex = np.array([1.0, 0.0, 0.0])
    cycle = [
        (ta, a * ex), (tc, 0 * ex), (2 * ta, -a * ex), (tc, 0 * ex), (ta, a * ex),
    ]
    laps = max(1, math.ceil(duration / period))
    return cycle * laps


def _square_segments(amplitude: float, period: float, dwell: float, duration: float):
    # four trapezoidal-velocity edges per lap with a full stop at each corner
    te = (period - 4.0 * dwell) / 4.0
    if te <= 0:
        raise ValueError("square period too short for the requested corner dwell")
    ta = te / 4.0
    tc = te / 2.0
    a = 16.0 * amplitude / (3.0 * te**2)
    dirs = [np.array(d, dtype=float) for d in ((1, 0, 0), (0, 1, 0), (-1, 0, 0), (0, -1, 0))]
    cycle = []
    for u in dirs:
        cycle += [(ta, a * u), (tc, 0 * u), (ta, -a * u)]
        if dwell > 0:
            cycle.append((dwell, 0 * u))
    laps = max(1, math.ceil(duration / period))
    return cycle * laps


def _build_trajectory(spec: "ScenarioSpec"):
    kind = spec.trajectory
    if kind == "linear_parallel":
        return SinusoidTrajectory((1, 0, 0), spec.amplitude, spec.period)
    if kind == "linear_perpendicular":
        return SinusoidTrajectory((0, 0, 1), spec.amplitude, spec.period)
    if kind == "circular_parallel":
        return CircleTrajectory((1, 0, 0), (0, 1, 0), spec.amplitude, spec.period)
    if kind == "circular_perpendicular":
        return CircleTrajectory((1, 0, 0), (0, 0, 1), spec.amplitude, spec.period)
    if kind == "circular_tilted":
        s = 1.0 / math.sqrt(2.0)
        return CircleTrajectory((1, 0, 0), (0, s, s), spec.amplitude, spec.period)
    if kind == "zigzag":
        return PiecewiseConstantAccelTrajectory(_zigzag_segments(spec.amplitude, spec.period, spec.duration))
    if kind == "square":
        return PiecewiseConstantAccelTrajectory(
            _square_segments(spec.amplitude, spec.period, spec.corner_dwell, spec.duration))
    if kind == "waypoints":
        wp = np.asarray(spec.waypoints, dtype=float)
        return WaypointTrajectory(wp[:, 0], wp[:, 1:4])
    raise ValueError(f"unknown trajectory kind {kind!r}")


class RotationProfile:
    """Constant body-frame angular rate about one camera axis."""

    _AXES = {"none": None, "rot_x": (1, 0, 0), "rot_y": (0, 1, 0), "rot_z": (0, 0, 1)}

    def __init__(self, kind: str, rate: float):
        if kind not in self._AXES:
            raise ValueError(f"unknown rotation kind {kind!r}")
        axis = self._AXES[kind]
        self.omega = np.zeros(3) if axis is None else float(rate) * np.asarray(axis, dtype=float)

    def quat_wc(self, t):
        """World-from-camera orientation(s); identity at t = 0."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return quat_from_rotvec(t[:, None] * self.omega[None, :])

    def omega_body(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.broadcast_to(self.omega, (len(t), 3)).copy()


# ---------------------------------------------------------------------------
# Scenario description


def default_scene(depth: float = 2.0, half_side: float = 0.5) -> list[LineState]:
    """Four coplanar lines forming a square at the given depth."""
    return [
        canonicalize_line((0, half_side, depth), (1, 0, 0)),
        canonicalize_line((0, -half_side, depth), (1, 0, 0)),
        canonicalize_line((half_side, 0, depth), (0, 1, 0)),
        canonicalize_line((-half_side, 0, depth), (0, 1, 0)),
    ]


@dataclass
class ScenarioSpec:
    """Everything needed to reproduce one synthetic sequence bit for bit."""

    lines: list = field(default_factory=default_scene)
    trajectory: str = "linear_parallel"
    amplitude: float = 0.3
    period: float = 4.0
    corner_dwell: float = 0.25
    waypoints: list | None = None
    rotation: str = "none"
    rotation_rate: float = 0.0
    duration: float = 12.0
    fps: float = 90.0
    imu_rate: float = 200.0
    accel_sigma: float = 0.0
    gyro_sigma: float = 0.0
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gravity: tuple = (0.0, -9.81, 0.0)
    obs_sigma: float = 0.0
    outlier_fraction: float = 0.0
    points_per_line: int = 50
    seed: int = 0
    raster: bool = False
    intrinsics: Intrinsics = DEFAULT_INTRINSICS

    def validate(self) -> list[str]:
        """Field-naming problem list; empty when the spec is usable."""
        problems = []
        if self.duration <= 0:
            problems.append("duration: must be positive")
        if self.fps <= 0:
            problems.append("fps: must be positive")
        if self.imu_rate <= 0:
            problems.append("imu_rate: must be positive")
        if not self.lines:
            problems.append("lines: at least one line is required")
        if self.trajectory not in TRAJECTORY_KINDS:
            problems.append(f"trajectory: unknown kind {self.trajectory!r}")
        if self.rotation not in ROTATION_KINDS:
            problems.append(f"rotation: unknown kind {self.rotation!r}")
        if self.trajectory == "waypoints":
            if not self.waypoints or len(self.waypoints) < 2:
                problems.append("waypoints: need at least two (t, x, y, z) rows")
        for name in ("accel_sigma", "gyro_sigma", "obs_sigma"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            problems.append("outlier_fraction: must be in [0, 1)")
        if self.points_per_line <= 0:
            problems.append("points_per_line: must be positive")
        if self.trajectory == "square" and self.period - 4.0 * self.corner_dwell <= 0:
            problems.append("corner_dwell: leaves no time for square edges")
        return problems

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lines":
                v = [{"point": list(map(float, l.x0)), "direction": list(map(float, l.v0))} for l in v]
            elif f.name == "intrinsics":
                v = {"fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy, "width": v.width, "height": v.height}
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        if "trajectory" in d and d["trajectory"] == "custom-waypoints":
            d["trajectory"] = "waypoints"
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        if "lines" in d:
            d["lines"] = [canonicalize_line(l["point"], l["direction"]) for l in d["lines"]]
        if "intrinsics" in d and isinstance(d["intrinsics"], dict):
            d["intrinsics"] = Intrinsics(**d["intrinsics"])
        for name in ("accel_bias", "gravity"):
            if name in d:
                d[name] = tuple(float(x) for x in d[name])
        return cls(**d)


# ---------------------------------------------------------------------------
# Ground truth


class GroundTruth:
    """Per-frame camera states plus analytic handles for oracle queries."""

    def __init__(self, frame_times, positions, quats_wc, lines, gravity,
                 trajectory=None, rotation_profile=None):
        self.frame_times = np.asarray(frame_times, dtype=float)
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.quats_wc = np.asarray(quats_wc, dtype=float).reshape(-1, 4)
        self.lines = tuple(lines)
        self.gravity = np.asarray(gravity, dtype=float).reshape(3)
        self._trajectory = trajectory
        self._rotation = rotation_profile

    # -- state queries ------------------------------------------------------

    def camera_positions(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if self._trajectory is not None:
            return self._trajectory.position(times)
        out = np.empty((len(times), 3))
        for k in range(3):
            out[:, k] = np.interp(times, self.frame_times, self.positions[:, k])
        return out

    def quat_wc_at(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if self._rotation is not None:
            return self._rotation.quat_wc(times)
        idx = np.clip(np.searchsorted(self.frame_times, times, side="right") - 1,
                      0, len(self.frame_times) - 2)
        dt = self.frame_times[idx + 1] - self.frame_times[idx]
        u = np.clip((times - self.frame_times[idx]) / dt, 0.0, 1.0)
        return quat_slerp(self.quats_wc[idx], self.quats_wc[idx + 1], u)

    # -- oracle queries in a window's derotated frame ------------------------

    def window_translation(self, t_start: float, times) -> np.ndarray:
        """True scene-relative translation X(t) for a window anchored at t_start."""
        q_cw = quat_conj(self.quat_wc_at(t_start)[0])
        c0 = self.camera_positions([t_start])[0]
        c = self.camera_positions(times)
        return quat_rotate(q_cw, c0[None, :] - c)

    def basis_positions(self, times) -> np.ndarray:
        """True camera displacement in the basis frame (initial camera pose)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        q_cw0 = quat_conj(self.quat_wc_at(self.frame_times[0])[0])
        rel = self.camera_positions(times) - self.camera_positions([self.frame_times[0]])[0]
        return quat_rotate(q_cw0, rel)

    def window_velocity(self, t_start: float) -> np.ndarray:
        """d/dt of the scene-relative translation at the window origin."""
        q_cw = quat_conj(self.quat_wc_at(t_start)[0])
        if self._trajectory is not None:
            v = self._trajectory.velocity([t_start])[0]
        else:
            h = 1e-4
            pts = self.camera_positions([t_start - h, t_start + h])
            v = (pts[1] - pts[0]) / (2 * h)
        return quat_rotate(q_cw, -v)

    def lines_in_window(self, t_start: float) -> list[LineState]:
        """Scene lines in the derotated camera frame at t_start."""
        q_cw = quat_conj(self.quat_wc_at(t_start)[0])
        c0 = self.camera_positions([t_start])[0]
        out = []
        for line in self.lines:
            x0 = quat_rotate(q_cw, line.x0 - c0)
            v0 = quat_rotate(q_cw, line.v0)
            out.append(canonicalize_line(x0, v0))
        return out

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "times": self.frame_times.tolist(),
            "positions": self.positions.tolist(),
            "orientations_wc": self.quats_wc.tolist(),
            "lines": [
                {"point": list(map(float, l.x0)), "direction": list(map(float, l.v0))}
                for l in self.lines
            ],
            "gravity": self.gravity.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        lines = [canonicalize_line(l["point"], l["direction"]) for l in d["lines"]]
        return cls(d["times"], d["positions"], d["orientations_wc"], lines, d["gravity"])


@dataclass
class SimResult:
    imu: ImuTrack
    frames: list
    rasters: list | None
    truth: GroundTruth
    spec: ScenarioSpec


# ---------------------------------------------------------------------------
# Synthesis


def _visible_alpha_interval(y0, yv, bx, by):
    """Displacement interval along the camera-frame line that is in front of
    the camera and inside the normalized field-of-view box, or None."""
    lo, hi = -_ALPHA_CAP, _ALPHA_CAP
    constraints = [
        (y0[2] - _GEN_DEPTH_MIN, yv[2]),
        (bx * y0[2] - y0[0], bx * yv[2] - yv[0]),
        (bx * y0[2] + y0[0], bx * yv[2] + yv[0]),
        (by * y0[2] - y0[1], by * yv[2] - yv[1]),
        (by * y0[2] + y0[1], by * yv[2] + yv[1]),
    ]
    for c0, c1 in constraints:
        if abs(c1) < 1e-15:
            if c0 < 0:
                return None
            continue
        r = -c0 / c1
        if c1 > 0:
            lo = max(lo, r)
        else:
            hi = min(hi, r)
    if lo >= hi:
        return None
    return lo, hi


def render_frame(segments_px, intrinsics: Intrinsics, background: int = 32,
                 foreground: int = 224, line_width: float = 2.0) -> np.ndarray:
    """Draw anti-aliased segments onto a uint8 canvas."""
    img = np.full((intrinsics.height, intrinsics.width), background, dtype=float)
    half = 0.5 * line_width
    for p0, p1 in segments_px:
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        lo = np.floor(np.minimum(p0, p1) - half - 1).astype(int)
        hi = np.ceil(np.maximum(p0, p1) + half + 1).astype(int)
        x0, y0 = np.maximum(lo, 0)
        x1 = min(hi[0], intrinsics.width - 1)
        y1 = min(hi[1], intrinsics.height - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        seg = p1 - p0
        seg_len2 = float(seg @ seg)
        if seg_len2 < 1e-12:
            continue
        tpar = ((xs - p0[0]) * seg[0] + (ys - p0[1]) * seg[1]) / seg_len2
        tpar = np.clip(tpar, 0.0, 1.0)
        dx = xs - (p0[0] + tpar * seg[0])
        dy = ys - (p0[1] + tpar * seg[1])
        dist = np.hypot(dx, dy)
        coverage = np.clip(half + 0.5 - dist, 0.0, 1.0)
        patch = img[y0:y1 + 1, x0:x1 + 1]
        np.maximum(patch, background + (foreground - background) * coverage, out=patch)
    return img.astype(np.uint8)


def synthesize(spec: ScenarioSpec) -> SimResult:
    """Generate (IMU track, per-frame point clouds, optional rasters, truth).

    Deterministic in the spec's seed.  Raises LineNotVisible when a line has
    no visible stretch in more than 10% of the frames.
    """
    problems = spec.validate()
    if problems:
        raise ValueError("; ".join(problems))

    rng = np.random.default_rng(spec.seed)
    traj = _build_trajectory(spec)
    rot = RotationProfile(spec.rotation, spec.rotation_rate)
    gravity = np.asarray(spec.gravity, dtype=float)
    bias = np.asarray(spec.accel_bias, dtype=float)

    n_frames = int(round(spec.duration * spec.fps))
    frame_times = np.arange(n_frames) / spec.fps
    n_imu = int(math.floor(spec.duration * spec.imu_rate)) + 1
    imu_times = np.arange(n_imu) / spec.imu_rate
    if imu_times[-1] < frame_times[-1]:
        imu_times = np.append(imu_times, frame_times[-1])

    # IMU: specific force expressed in the camera frame, plus bias and noise
    q_wc = rot.quat_wc(imu_times)
    q_cw = quat_conj(q_wc)
    accel_world = traj.acceleration(imu_times) + gravity[None, :]
    accel = quat_rotate(q_cw, accel_world) + bias[None, :]
    gyro = rot.omega_body(imu_times)
    if spec.accel_sigma > 0:
        accel = accel + rng.normal(0.0, spec.accel_sigma, accel.shape)
    if spec.gyro_sigma > 0:
        gyro = gyro + rng.normal(0.0, spec.gyro_sigma, gyro.shape)
    track = ImuTrack(imu_times, accel, gyro, sample_rate_hint=spec.imu_rate)

    bx, by = spec.intrinsics.fov_bounds
    frame_q_wc = rot.quat_wc(frame_times)
    frame_q_cw = quat_conj(frame_q_wc)
    frame_pos = traj.position(frame_times)

    frames = []
    rasters = [] if spec.raster else None
    misses = np.zeros(len(spec.lines), dtype=int)
    for fi, t in enumerate(frame_times):
        pts_frame = []
        segments_px = []
        for li, line in enumerate(spec.lines):
            y0 = quat_rotate(frame_q_cw[fi], line.x0 - frame_pos[fi])
            yv = quat_rotate(frame_q_cw[fi], line.v0)
            interval = _visible_alpha_interval(y0, yv, bx, by)
            if interval is None:
                misses[li] += 1
                continue
            lo, hi = interval
            alphas = rng.uniform(lo, hi, spec.points_per_line)
            pts3 = y0[None, :] + alphas[:, None] * yv[None, :]
            pts = pts3[:, :2] / pts3[:, 2:3]
            if spec.obs_sigma > 0:
                pts = pts + rng.normal(0.0, spec.obs_sigma, pts.shape)
            if spec.outlier_fraction > 0:
                n_out = int(round(spec.outlier_fraction * len(pts)))
                if n_out:
                    idx = rng.choice(len(pts), size=n_out, replace=False)
                    pts[idx, 0] = rng.uniform(-bx, bx, n_out)
                    pts[idx, 1] = rng.uniform(-by, by, n_out)
            pts_frame.append(pts)
            if spec.raster:
                ends3 = y0[None, :] + np.array([[lo], [hi]]) * yv[None, :]
                ends = ends3[:, :2] / ends3[:, 2:3]
                segments_px.append(tuple(spec.intrinsics.normalized_to_pixels(ends)))
        if pts_frame:
            merged = np.concatenate(pts_frame, axis=0)
            rng.shuffle(merged, axis=0)  # lines arrive unlabeled
        else:
            merged = np.empty((0, 2))
        frames.append(FramePoints(t=float(t), points=merged))
        if spec.raster:
            rasters.append(render_frame(segments_px, spec.intrinsics))

    bad = np.nonzero(misses > 0.1 * n_frames)[0]
    if len(bad):
        raise LineNotVisible(f"lines {bad.tolist()} invisible in more than 10% of frames")

    truth = GroundTruth(frame_times, frame_pos, frame_q_wc, spec.lines, gravity,
                        trajectory=traj, rotation_profile=rot)
    return SimResult(imu=track, frames=frames, rasters=rasters, truth=truth, spec=spec)


def sample_surface_points(params: SurfaceSetParams, gamma, frame_times, n_per_frame: int,
                          alpha_range=(-0.6, 0.6), rng=None, noise: float = 0.0):
    """Sample exact image points from a parameterized surface set.

    Direct generative sampling from the projection model, useful for
    solver-level tests where the translation signal is prescribed by a gamma
    table rather than a simulated IMU.  Returns one PointSet per line.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    frame_times = np.asarray(frame_times, dtype=float)
    signal = params.translation_signal(gamma)
    xts = np.repeat(signal.positions(frame_times), n_per_frame, axis=0)
    out = []
    for i in range(params.n_lines):
        line = params.line_state(i)
        ts = np.repeat(frame_times, n_per_frame)
        alphas = rng.uniform(alpha_range[0], alpha_range[1], len(ts))
        pts3 = line.x0[None, :] + alphas[:, None] * line.v0[None, :] + xts
        if np.any(pts3[:, 2] <= 0):
            raise ValueError("sampling produced non-positive depth; shrink alpha_range")
        pts = pts3[:, :2] / pts3[:, 2:3]
        if noise > 0:
            pts = pts + rng.normal(0.0, noise, pts.shape)
        out.append(PointSet(ts, pts))
    return out


# ---------------------------------------------------------------------------
# Evaluation against ground truth


@dataclass
class AxisErrorStats:
    mean: float
    std: float


@dataclass
class EvaluationReport:
    """Per-axis trajectory error and optional per-line 3D distance stats."""

    axes: dict
    lines: list

    def to_dict(self) -> dict:
        d = {k: {"mean": v.mean, "std": v.std} for k, v in self.axes.items()}
        if self.lines:
            d["lines"] = [{"line": i, "mean": s.mean, "std": s.std} for i, s in enumerate(self.lines)]
        return d


def _line_distance_stats(windows_lines, truth_lines_basis, sample_span: float = 1.0):
    """Mean 3D distance from sampled true-line points to each estimated line."""
    if not windows_lines:
        return []
    from scipy.optimize import linear_sum_assignment

    alphas = np.linspace(-sample_span, sample_span, 9)
    n_est = len(windows_lines[0])
    n_true = len(truth_lines_basis)

    def dist(est: LineState, true: LineState) -> float:
        pts = true.x0[None, :] + alphas[:, None] * true.v0[None, :]
        rel = pts - est.x0[None, :]
        return float(np.mean(np.linalg.norm(np.cross(rel, est.v0[None, :]), axis=1)))

    cost = np.zeros((n_est, n_true))
    for i, est in enumerate(windows_lines[0]):
        for j, true in enumerate(truth_lines_basis):
            cost[i, j] = dist(est, true)
    rows, cols = linear_sum_assignment(cost)
    pairing = dict(zip(rows, cols))

    per_window = np.zeros((len(windows_lines), n_est))
    for w, est_lines in enumerate(windows_lines):
        for i, est in enumerate(est_lines):
            per_window[w, i] = dist(est, truth_lines_basis[pairing[i]])
    return [AxisErrorStats(mean=float(per_window[:, i].mean()), std=float(per_window[:, i].std()))
            for i in range(n_est)]


def evaluate(estimate, truth: GroundTruth, include_lines: bool = True) -> EvaluationReport:
    """Per-axis mean/std of |estimated - true| camera position.

    The estimate is interpolated onto the truth's frame times; raises
    TimeRangeMismatch when the estimate does not cover them.  When the
    estimate carries per-window line states in the basis frame, per-line 3D
    distance statistics are included.
    """
    est_t = np.asarray(estimate.timestamps, dtype=float)
    est_p = np.asarray(estimate.positions, dtype=float)
    tt = truth.frame_times
    if est_t[0] > tt[0] + 1e-6 or est_t[-1] < tt[-1] - 1e-6:
        raise TimeRangeMismatch(
            f"estimate [{est_t[0]:g}, {est_t[-1]:g}] does not cover truth [{tt[0]:g}, {tt[-1]:g}]")

    est_on_truth = np.empty((len(tt), 3))
    for k in range(3):
        est_on_truth[:, k] = np.interp(tt, est_t, est_p[:, k])
    # displacement in the basis frame (camera pose at the first truth time)
    q_cw0 = quat_conj(truth.quat_wc_at(tt[0])[0])
    true_rel = quat_rotate(q_cw0, truth.camera_positions(tt) - truth.camera_positions([tt[0]])[0])
    diff = np.abs(est_on_truth - true_rel)
    axes = {name: AxisErrorStats(mean=float(diff[:, k].mean()), std=float(diff[:, k].std()))
            for k, name in enumerate("XYZ")}

    line_stats = []
    if include_lines and getattr(estimate, "basis_line_states", None):
        truth_basis = truth.lines_in_window(tt[0])
        line_stats = _line_distance_stats(estimate.basis_line_states, truth_basis)
    return EvaluationReport(axes=axes, lines=line_stats)
