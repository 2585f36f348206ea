"""Canonical 3D line representation, pinhole projection of rulings, and
image-plane distances.

Coordinates are normalized undistorted image coordinates (focal length 1,
principal point at the origin); depths and positions are in meters.  A 3D
line is stored as a perpendicular-foot point ``x0`` plus a unit direction
``v0``, which removes the two gauge freedoms of an unbounded line (sliding
the anchor along the line, rescaling the direction).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import DegenerateProjection, NonPositiveDepth, ZeroDirection

if TYPE_CHECKING:
    from .imu import GammaTable

# Minimum admissible depth in meters; avoids division blowup at the image plane.
DEPTH_FLOOR = 1e-6

# Components smaller than this are treated as zero by the canonical sign rule.
SIGN_EPS = 1e-9


def canonical_sign(v: np.ndarray) -> float:
    """+1 if the first significantly nonzero component of v is positive, else -1."""
    for comp in v:
        if abs(comp) > SIGN_EPS:
            return 1.0 if comp > 0 else -1.0
    return 1.0


@dataclass(frozen=True)
class Observation:
    """A single 2D image-plane point with its timestamp.

    t is in seconds relative to the owning window's origin; p holds
    normalized undistorted coordinates (x/z, y/z).
    """

    t: float
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(2)
        object.__setattr__(self, "p", p)
        if not np.all(np.isfinite(p)) or np.any(np.abs(p) > 10.0):
            raise ValueError(f"observation coordinates out of sane range: {p}")


@dataclass
class FramePoints:
    """All image points observed at one frame time, lines unlabeled."""

    t: float
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class LineState:
    """Canonical unbounded 3D line: perpendicular foot x0 and unit direction v0."""

    x0: np.ndarray
    v0: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(3)
        v0 = np.asarray(self.v0, dtype=float).reshape(3)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "v0", v0)
        if abs(np.linalg.norm(v0) - 1.0) > 1e-9:
            raise ValueError("v0 must be unit norm; use canonicalize_line")
        if abs(float(x0 @ v0)) > 1e-9:
            raise ValueError("x0 must be perpendicular to v0; use canonicalize_line")
        if canonical_sign(v0) < 0:
            raise ValueError("v0 violates the canonical sign rule; use canonicalize_line")

    def point_at(self, alpha: float) -> np.ndarray:
        return self.x0 + alpha * self.v0


def canonicalize_line(x0_raw, v0_raw) -> LineState:
    """Reduce any (point, direction) pair to the canonical LineState.

    The direction is normalized, the anchor is replaced by the foot of the
    perpendicular from the origin, and the sign of the direction is fixed so
    equal lines map to bitwise-equal states.

    Raises ZeroDirection if the direction is shorter than 1e-12.
    """
    x0 = np.asarray(x0_raw, dtype=float).reshape(3)
    v0 = np.asarray(v0_raw, dtype=float).reshape(3)
    norm = np.linalg.norm(v0)
    if norm <= 1e-12:
        raise ZeroDirection(f"direction norm {norm:g} below 1e-12")
    v0 = v0 / norm
    v0 = canonical_sign(v0) * v0
    x0 = x0 - (x0 @ v0) * v0
    return LineState(x0=x0, v0=v0)


@dataclass(frozen=True)
class RulingParams:
    """Flat parameter block for one ruled surface.

    Per-line entries: a (depth of the foot, m), c (depth component of the
    direction), d (image-plane direction components), e (image-plane foot
    components, m).  Shared motion entries: b (depth velocity plus lumped
    bias, m/s), f (image-plane velocity plus lumped bias, m/s), g
    (gravitational/accelerometer bias absorbed as a constant acceleration,
    m/s^2).
    """

    a: float
    b: float
    c: float
    d: np.ndarray
    e: np.ndarray
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).reshape(2))
        object.__setattr__(self, "e", np.asarray(self.e, dtype=float).reshape(2))
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float).reshape(2))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float).reshape(3))

    def to_line_state(self) -> LineState:
        """The canonical line encoded by (a, c, d, e)."""
        return canonicalize_line(
            np.array([self.e[0], self.e[1], self.a]),
            np.array([self.d[0], self.d[1], self.c]),
        )

    @staticmethod
    def from_line_state(line: LineState, b: float = 0.0, f=(0.0, 0.0), g=(0.0, 0.0, 0.0)) -> "RulingParams":
        return RulingParams(
            a=float(line.x0[2]),
            b=float(b),
            c=float(line.v0[2]),
            d=line.v0[:2].copy(),
            e=line.x0[:2].copy(),
            f=np.asarray(f, dtype=float),
            g=np.asarray(g, dtype=float),
        )


class TranslationSignal:
    """Translation of the scene relative to the camera over a window.

    Evaluates x(t) = (t - t0) * v + gamma(t) + 0.5 (t - t0)^2 * g, where v
    stacks the estimated initial velocity (f, b), gamma is the sampled double
    integral of the window's acceleration, and g is the estimated constant
    acceleration bias.  x(t0) is exactly zero.
    """

    def __init__(self, velocity: np.ndarray, gamma: "GammaTable", gravity_bias: np.ndarray):
        self.velocity = np.asarray(velocity, dtype=float).reshape(3)
        self.gamma = gamma
        self.gravity_bias = np.asarray(gravity_bias, dtype=float).reshape(3)

    @property
    def t0(self) -> float:
        return self.gamma.t0

    def positions(self, times) -> np.ndarray:
        """x(t) for an array of absolute times, shape (n, 3)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        tau = times - self.gamma.t0
        return (
            tau[:, None] * self.velocity[None, :]
            + self.gamma.values_at(times)
            + 0.5 * tau[:, None] ** 2 * self.gravity_bias[None, :]
        )

    def position(self, t: float) -> np.ndarray:
        return self.positions([t])[0]

    def velocities(self, times) -> np.ndarray:
        """dx/dt at an array of absolute times, shape (n, 3)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        tau = times - self.gamma.t0
        return (
            self.velocity[None, :]
            + self.gamma.derivatives_at(times)
            + tau[:, None] * self.gravity_bias[None, :]
        )


def project_ruling_point(line: LineState, xt, alpha: float) -> np.ndarray:
    """Project the point at displacement alpha along the translated ruling.

    xt is the 3-vector scene translation at the evaluation time.  Raises
    NonPositiveDepth when the point is not safely in front of the camera.
    """
    xt = np.asarray(xt, dtype=float).reshape(3)
    point = line.x0 + alpha * line.v0 + xt
    depth = point[2]
    if depth <= DEPTH_FLOOR:
        raise NonPositiveDepth(f"depth {depth:g} at alpha={alpha:g}")
    return point[:2] / depth


def ruling_endpoints_in_image(line: LineState, xt) -> tuple[np.ndarray, np.ndarray]:
    """Image points of the ruling at alpha = 0 and alpha = 1.

    Raises NonPositiveDepth if either endpoint is behind the camera and
    DegenerateProjection if the two projections coincide (the ruling is
    viewed end-on and has no image-line direction).
    """
    r1 = project_ruling_point(line, xt, 0.0)
    r2 = project_ruling_point(line, xt, 1.0)
    if np.linalg.norm(r1 - r2) < 1e-9:
        raise DegenerateProjection("ruling projects to a single image point")
    return r1, r2


def point_to_ruling_distance(p, line: LineState, xt) -> float:
    """Absolute perpendicular distance from p to the projected ruling.

    Uses the two-point form of the image line through the alpha = 0 and
    alpha = 1 projections; the magnitude (not the signed value) is returned
    because association thresholds compare against a radius.
    """
    p = np.asarray(p, dtype=float).reshape(2)
    r1, r2 = ruling_endpoints_in_image(line, xt)
    dx = r2[0] - r1[0]
    dy = r2[1] - r1[1]
    num = dy * p[0] - dx * p[1] + r2[0] * r1[1] - r2[1] * r1[0]
    return abs(num) / np.hypot(dx, dy)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics used only for pixel <-> normalized conversion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def pixels_to_normalized(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        out = np.empty_like(px)
        out[..., 0] = (px[..., 0] - self.cx) / self.fx
        out[..., 1] = (px[..., 1] - self.cy) / self.fy
        return out

    def normalized_to_pixels(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = np.empty_like(p)
        out[..., 0] = p[..., 0] * self.fx + self.cx
        out[..., 1] = p[..., 1] * self.fy + self.cy
        return out

    @property
    def fov_bounds(self) -> tuple[float, float]:
        """Half-extent of the image in normalized coordinates (x, y)."""
        return (0.5 * self.width / self.fx, 0.5 * self.height / self.fy)
