"""IMU ingestion and integration.

Rotations are accumulated from gyro rates as unit quaternions with a
piecewise-constant angular velocity per inter-sample interval (the rate
measured at a sample holds until the next sample).  Accelerations are
rotated into a window's rotation-center frame before being double
integrated with the trapezoidal rule, so the resulting displacement table
lives in a single (non-rotating) frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange
from .geometry import DEPTH_FLOOR, Observation
from .rotations import quat_conj, quat_mul, quat_normalize, quat_rotate, quat_slerp

_TIME_EPS = 1e-9


@dataclass(frozen=True)
class ImuSample:
    """One timestamped accelerometer + gyro reading (camera frame, SI units)."""

    t: float
    accel: np.ndarray
    gyro: np.ndarray


class ImuTrack:
    """Ordered accelerometer/gyro stream with vectorized storage."""

    def __init__(self, times, accel, gyro, sample_rate_hint: float | None = None):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        self.gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
        if len(self.times) < 2:
            raise ValueError("an IMU track needs at least 2 samples")
        if self.accel.shape[0] != len(self.times) or self.gyro.shape[0] != len(self.times):
            raise ValueError("times, accel and gyro lengths disagree")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")
        if not (np.all(np.isfinite(self.accel)) and np.all(np.isfinite(self.gyro))):
            raise ValueError("IMU samples contain NaN/Inf")
        if sample_rate_hint is None:
            sample_rate_hint = 1.0 / float(np.median(np.diff(self.times)))
        self.sample_rate_hint = float(sample_rate_hint)

    @classmethod
    def from_samples(cls, samples: list[ImuSample], sample_rate_hint: float | None = None) -> "ImuTrack":
        return cls(
            [s.t for s in samples],
            [s.accel for s in samples],
            [s.gyro for s in samples],
            sample_rate_hint,
        )

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def covers(self, t: float) -> bool:
        return self.times[0] - _TIME_EPS <= t <= self.times[-1] + _TIME_EPS

    def slice_span(self, t0: float, t1: float) -> "ImuTrack":
        """Sub-track whose samples bracket [t0, t1]."""
        if not (self.covers(t0) and self.covers(t1)):
            raise OutOfRange(f"[{t0:g}, {t1:g}] outside track span [{self.t_start:g}, {self.t_end:g}]")
        lo = max(int(np.searchsorted(self.times, t0, side="right")) - 1, 0)
        hi = min(int(np.searchsorted(self.times, t1, side="left")) + 1, len(self.times))
        if hi - lo < 2:
            hi = min(lo + 2, len(self.times))
            lo = hi - 2
        return ImuTrack(self.times[lo:hi], self.accel[lo:hi], self.gyro[lo:hi], self.sample_rate_hint)

    def accel_at(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.empty((len(times), 3))
        for k in range(3):
            out[:, k] = np.interp(times, self.times, self.accel[:, k])
        return out


class RotationTable:
    """Camera-from-reference quaternions sampled over a window.

    The reference frame is the camera frame at ``center_time``, where the
    entry is the identity.  Lookups between samples interpolate along the
    geodesic, which is exact for piecewise-constant angular velocity.
    """

    def __init__(self, times, quats, center_time: float):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.quats = np.asarray(quats, dtype=float).reshape(-1, 4)
        self.center_time = float(center_time)
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("rotation table quaternions must be unit norm")

    def _check_cover(self, times: np.ndarray):
        if np.any(times < self.times[0] - _TIME_EPS) or np.any(times > self.times[-1] + _TIME_EPS):
            raise OutOfRange("query time outside rotation table span")

    def camera_from_reference(self, times) -> np.ndarray:
        """Quaternion(s) mapping reference-frame vectors to the camera frame at t."""
        scalar = np.isscalar(times) or np.ndim(times) == 0
        t = np.atleast_1d(np.asarray(times, dtype=float))
        self._check_cover(t)
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        dt = self.times[idx + 1] - self.times[idx]
        u = np.clip((t - self.times[idx]) / dt, 0.0, 1.0)
        q = quat_slerp(self.quats[idx], self.quats[idx + 1], u)
        return q[0] if scalar else q

    def reference_from_camera(self, times) -> np.ndarray:
        """Inverse lookup: the rotation that derotates a camera-frame vector."""
        return quat_conj(self.camera_from_reference(times))


class GammaTable:
    """Double time-integral of acceleration, tabulated relative to t0.

    ``values`` and ``derivs`` hold the double and single integrals at each
    knot; both are exactly zero at t0 so the table contributes neither
    initial displacement nor initial velocity.
    """

    def __init__(self, t0: float, times, values, derivs):
        self.t0 = float(t0)
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.values = np.asarray(values, dtype=float).reshape(-1, 3)
        self.derivs = np.asarray(derivs, dtype=float).reshape(-1, 3)
        i0 = int(np.searchsorted(self.times, self.t0))
        if i0 >= len(self.times) or self.times[i0] != self.t0:
            raise ValueError("t0 must be one of the table knots")
        if np.any(self.values[i0] != 0.0) or np.any(self.derivs[i0] != 0.0):
            raise ValueError("gamma table must vanish exactly at t0")

    def _interp(self, table: np.ndarray, times) -> np.ndarray:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(t < self.times[0] - _TIME_EPS) or np.any(t > self.times[-1] + _TIME_EPS):
            raise OutOfRange("query time outside gamma table span")
        out = np.empty((len(t), 3))
        for k in range(3):
            out[:, k] = np.interp(t, self.times, table[:, k])
        return out

    def values_at(self, times) -> np.ndarray:
        return self._interp(self.values, times)

    def value_at(self, t: float) -> np.ndarray:
        return self._interp(self.values, [t])[0]

    def derivatives_at(self, times) -> np.ndarray:
        return self._interp(self.derivs, times)

    def negated(self) -> "GammaTable":
        """Same table with the sign of the integrated acceleration flipped."""
        return GammaTable(self.t0, self.times, -self.values, -self.derivs)


def _cumtrapz(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    dx = np.diff(x)[:, None]
    seg = 0.5 * (y[1:] + y[:-1]) * dx
    out = np.zeros_like(y)
    np.cumsum(seg, axis=0, out=out[1:])
    return out


def integrate_gyro(track: ImuTrack, center_time: float) -> RotationTable:
    """Integrate gyro rates into a rotation table centered at center_time.

    Raises OutOfRange when center_time is not covered by the track.
    """
    if not track.covers(center_time):
        raise OutOfRange(f"center time {center_time:g} outside track span")

    times = track.times
    grid = times
    if center_time not in times:
        grid = np.sort(np.append(times, center_time))

    # World here means the camera frame at the first grid knot; w[k] is
    # world-from-camera at grid[k], advanced by the left sample's rate.
    n = len(grid)
    w = np.empty((n, 4))
    w[0] = (1.0, 0.0, 0.0, 0.0)
    sample_idx = np.clip(np.searchsorted(times, grid[:-1], side="right") - 1, 0, len(times) - 1)
    omegas = track.gyro[sample_idx]
    dts = np.diff(grid)
    qw, qx, qy, qz = 1.0, 0.0, 0.0, 0.0
    for k in range(n - 1):
        wx, wy, wz = omegas[k]
        angle = np.sqrt(wx * wx + wy * wy + wz * wz) * dts[k]
        if angle > 1e-14:
            half = 0.5 * angle
            s = np.sin(half) / (angle / dts[k])
            ew, ex, ey, ez = np.cos(half), wx * s, wy * s, wz * s
            nw = qw * ew - qx * ex - qy * ey - qz * ez
            nx = qw * ex + qx * ew + qy * ez - qz * ey
            ny = qw * ey - qx * ez + qy * ew + qz * ex
            nz = qw * ez + qx * ey - qy * ex + qz * ew
            inv = 1.0 / np.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
            qw, qx, qy, qz = nw * inv, nx * inv, ny * inv, nz * inv
        w[k + 1] = (qw, qx, qy, qz)

    i_c = int(np.searchsorted(grid, center_time))
    w_center = w[i_c]
    # camera-from-center = w(t)^-1 * w(center)
    quats = quat_normalize(quat_mul(quat_conj(w), w_center))
    return RotationTable(grid, quats, center_time)


def integrate_gamma(track: ImuTrack, t0: float, query_times, derotation: RotationTable) -> GammaTable:
    """Derotate accelerations into the rotation-center frame and double
    integrate them with the trapezoidal rule.

    The integration grid is the union of the track samples spanning the
    queries, t0, and the query times themselves, so queried values need no
    further interpolation.  Raises OutOfRange if t0 or any query is outside
    the track span.
    """
    query_times = np.atleast_1d(np.asarray(query_times, dtype=float))
    lo = min(float(np.min(query_times)), t0) if len(query_times) else t0
    hi = max(float(np.max(query_times)), t0) if len(query_times) else t0
    if not (track.covers(lo) and track.covers(hi)):
        raise OutOfRange("t0 or a query time outside the track span")

    inner = track.times[(track.times > lo) & (track.times < hi)]
    grid = np.unique(np.concatenate([[lo, hi, t0], query_times, inner]))
    accel = track.accel_at(grid)
    q_ref = derotation.reference_from_camera(grid)
    accel = quat_rotate(q_ref, accel)

    vel = _cumtrapz(accel, grid)
    i0 = int(np.searchsorted(grid, t0))
    vel = vel - vel[i0]
    val = _cumtrapz(vel, grid)
    val = val - val[i0]
    return GammaTable(t0, grid, val, vel)


def derotate_points(times, points, rot: RotationTable) -> tuple[np.ndarray, np.ndarray]:
    """Array-level derotation of image points.

    Lifts each point to its unit-depth ray, rotates the ray into the
    rotation-center frame, and reprojects.  Returns (keep_mask, derotated
    points); points whose derotated ray has non-positive depth or leaves the
    sane coordinate range are masked out.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    rays = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    q = rot.reference_from_camera(times)
    rotated = quat_rotate(q, rays)
    depth = rotated[:, 2]
    keep = depth > DEPTH_FLOOR
    out = np.zeros_like(points)
    out[keep] = rotated[keep, :2] / depth[keep, None]
    keep = keep & np.all(np.abs(out) <= 10.0, axis=1)
    return keep, out


def derotate_observations(obs: list[Observation], rot: RotationTable) -> tuple[list[Observation], int]:
    """Derotate a list of observations; returns (kept, dropped_count)."""
    if not obs:
        return [], 0
    times = np.array([o.t for o in obs])
    points = np.array([o.p for o in obs])
    keep, out = derotate_points(times, points, rot)
    kept = [Observation(t=float(t), p=p) for t, p, ok in zip(times, out, keep) if ok]
    return kept, int(np.sum(~keep))


def rechain_window_rotation(rot_prev_center_from_global: np.ndarray, rot: RotationTable, new_center: float) -> np.ndarray:
    """Chain the accumulated basis rotation with the window rotation at new_center.

    Composes the previous center's basis rotation with the window's
    center-from-camera rotation at the new center, producing the quaternion
    that maps the next window's estimates into the common basis frame.
    """
    step = rot.reference_from_camera(new_center)
    return quat_normalize(quat_mul(np.asarray(rot_prev_center_from_global, dtype=float), step))
