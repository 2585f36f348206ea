"""Initial line detection: thresholded image gradients plus a Hough transform.

Works on raster frames (Sobel gradient magnitude thresholded into an
event-like point cloud) or directly on point clouds that are already in
normalized image coordinates.  Candidate accumulator peaks are validated by
a run-length test (minimum spatial extent, maximum gap between consecutive
inliers) and refined with a total-least-squares fit before the surrounding
points are suppressed and the search repeats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NotEnoughLines
from .geometry import Intrinsics, Observation

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass
class EdgeMap:
    """Thresholded gradient map of one frame; active pixels are exactly the
    pixels whose gradient magnitude reaches the threshold."""

    width: int
    height: int
    magnitude: np.ndarray
    direction: np.ndarray
    threshold: float
    active: np.ndarray  # (K, 2) pixel coordinates (x, y)

    @classmethod
    def from_image(cls, image: np.ndarray, threshold: float) -> "EdgeMap":
        img = np.asarray(image, dtype=float)
        gx = ndimage.convolve(img, _SOBEL_X, mode="reflect")
        gy = ndimage.convolve(img, _SOBEL_X.T, mode="reflect")
        mag = np.hypot(gx, gy)
        direction = np.arctan2(gy, gx)
        ys, xs = np.nonzero(mag >= threshold)
        active = np.column_stack([xs, ys]).astype(float)
        return cls(width=img.shape[1], height=img.shape[0], magnitude=mag,
                   direction=direction, threshold=float(threshold), active=active)


@dataclass
class HoughLine:
    """One detected image line in (rho, theta) pixel form."""

    rho: float
    theta: float
    votes: int
    inlier_idx: np.ndarray


def line_param_distance(rho1: float, theta1: float, rho2: float, theta2: float) -> tuple[float, float]:
    """(|d rho|, |d theta|) between two (rho, theta) lines, handling the
    theta wrap at pi where rho changes sign."""
    dt = theta1 - theta2
    direct = (abs(rho1 - rho2), abs(dt))
    wrapped = (abs(rho1 + rho2), min(abs(dt - math.pi), abs(dt + math.pi)))
    return min(direct, wrapped, key=lambda pair: pair[1])


def _tls_refine(pts: np.ndarray) -> tuple[float, float]:
    """Total-least-squares (rho, theta) of a point cloud, theta in [0, pi)."""
    mu = pts.mean(axis=0)
    centered = pts - mu
    cov = centered.T @ centered
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[:, 0]  # smallest-variance direction
    if normal[1] < 0 or (normal[1] == 0 and normal[0] < 0):
        normal = -normal
    theta = math.atan2(normal[1], normal[0]) % math.pi
    rho = float(normal @ mu)
    return rho, theta


def _longest_run(s: np.ndarray, max_gap: float | None) -> tuple[float, np.ndarray]:
    """Span and member indices of the longest gap-bounded run of sorted
    coordinates s (indices refer to the unsorted input).  max_gap=None
    treats everything as one run."""
    order = np.argsort(s)
    ss = s[order]
    if max_gap is None:
        return float(ss[-1] - ss[0]), order
    breaks = np.nonzero(np.diff(ss) > max_gap)[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [len(ss) - 1]])
    spans = ss[ends] - ss[starts]
    k = int(np.argmax(spans))
    return float(spans[k]), order[starts[k]:ends[k] + 1]


def hough_lines(points: np.ndarray, n_lines: int, *,
                rho_res: float = 5.0, theta_res_deg: float = 1.0,
                vote_threshold: int = 100, min_length: float = 100.0,
                max_gap: float | None = 5.0, suppression_radius: float = 25.0,
                max_attempts: int = 500) -> list[HoughLine]:
    """Iteratively extract up to n_lines peak lines from a pixel point cloud.

    After each accepted peak, points within suppression_radius of the
    refined line are removed and the accumulator is rebuilt.  Peaks that
    fail the run-length validation are cleared and skipped.  Returns fewer
    than n_lines when the accumulator runs out of qualifying peaks.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n_theta = int(round(180.0 / theta_res_deg))
    thetas = np.arange(n_theta) * math.radians(theta_res_deg)
    cos_t = np.cos(thetas)
    sin_t = np.sin(thetas)
    rho_max = float(np.max(np.abs(points))) * math.sqrt(2.0) + rho_res if len(points) else rho_res
    n_rho = int(math.ceil(2.0 * rho_max / rho_res)) + 1

    active = np.ones(len(points), dtype=bool)

    def build_accumulator():
        acc = np.zeros((n_rho, n_theta), dtype=np.int64)
        pts = points[active]
        if not len(pts):
            return acc
        for j in range(n_theta):
            rho = pts[:, 0] * cos_t[j] + pts[:, 1] * sin_t[j]
            idx = ((rho + rho_max) / rho_res).astype(np.int64)
            np.add.at(acc[:, j], np.clip(idx, 0, n_rho - 1), 1)
        return acc

    acc = build_accumulator()
    found: list[HoughLine] = []
    for _ in range(max_attempts):
        if len(found) >= n_lines:
            break
        flat = int(np.argmax(acc))
        i_rho, i_theta = np.unravel_index(flat, acc.shape)
        votes = int(acc[i_rho, i_theta])
        if votes < vote_threshold:
            break
        theta0 = thetas[i_theta]
        rho0 = i_rho * rho_res - rho_max + 0.5 * rho_res

        cand_idx = np.nonzero(active)[0]
        pts = points[cand_idx]
        d = np.abs(pts[:, 0] * math.cos(theta0) + pts[:, 1] * math.sin(theta0) - rho0)
        band = d <= rho_res
        if np.sum(band) >= 2:
            band_idx = cand_idx[band]
            s = -points[band_idx, 0] * math.sin(theta0) + points[band_idx, 1] * math.cos(theta0)
            span, run = _longest_run(s, max_gap)
            if span >= min_length:
                run_idx = band_idx[run]
                rho, theta = _tls_refine(points[run_idx])
                # final inliers against the refined line
                c, s2 = math.cos(theta), math.sin(theta)
                dist_all = np.abs(points[cand_idx, 0] * c + points[cand_idx, 1] * s2 - rho)
                inliers = cand_idx[dist_all <= 0.5 * rho_res]
                if len(inliers) >= 2:
                    s_in = -points[inliers, 0] * s2 + points[inliers, 1] * c
                    _, run2 = _longest_run(s_in, max_gap)
                    inliers = inliers[run2]
                found.append(HoughLine(rho=rho, theta=theta, votes=votes, inlier_idx=inliers))
                suppress = dist_all <= suppression_radius
                active[cand_idx[suppress]] = False
                acc = build_accumulator()
                continue
        acc[i_rho, i_theta] = 0
    return found


@dataclass
class LineDetection:
    """A detected line with its pixel-space parameters, its normalized-space
    geometry, and the inlier observations grouped by frame time."""

    rho_px: float
    theta: float
    votes: int
    foot_n: np.ndarray
    direction_n: np.ndarray
    times: np.ndarray
    points_n: np.ndarray

    @property
    def n_inliers(self) -> int:
        return len(self.times)

    def observations(self) -> list[Observation]:
        return [Observation(t=float(t), p=p.copy()) for t, p in zip(self.times, self.points_n)]

    def frame_groups(self) -> list[tuple[float, np.ndarray]]:
        """Inlier points grouped by (exactly equal) frame timestamp."""
        out = []
        for t in np.unique(self.times):
            out.append((float(t), self.points_n[self.times == t]))
        return out


def _normalized_line_geometry(rho: float, theta: float, intrinsics: Intrinsics):
    p1 = np.array([rho * math.cos(theta), rho * math.sin(theta)])
    p2 = p1 + np.array([-math.sin(theta), math.cos(theta)]) * 100.0
    n1 = intrinsics.pixels_to_normalized(p1)
    n2 = intrinsics.pixels_to_normalized(p2)
    direction = n2 - n1
    direction = direction / np.linalg.norm(direction)
    foot = n1 - (n1 @ direction) * direction
    return foot, direction


def _detections_from_hough(lines: list[HoughLine], points_px: np.ndarray, times: np.ndarray,
                           intrinsics: Intrinsics) -> list[LineDetection]:
    out = []
    for hl in lines:
        foot, direction = _normalized_line_geometry(hl.rho, hl.theta, intrinsics)
        pts_n = intrinsics.pixels_to_normalized(points_px[hl.inlier_idx])
        out.append(LineDetection(
            rho_px=hl.rho, theta=hl.theta, votes=hl.votes,
            foot_n=foot, direction_n=direction,
            times=times[hl.inlier_idx].copy(), points_n=pts_n,
        ))
    return out


def detect_initial_lines(frames, intrinsics: Intrinsics, n_lines: int = 4, *,
                         edge_threshold: float = 150.0, rho_res: float = 5.0,
                         theta_res_deg: float = 1.0, vote_threshold: int = 100,
                         min_length: float = 100.0, max_gap: float = 5.0,
                         suppression_radius: float = 0.05,
                         denoise_median: int = 3) -> list[LineDetection]:
    """Detect n_lines straight edges in a short burst of raster frames.

    frames is a list of (time, image) pairs covering the detection interval;
    gradient pixels from all frames vote together.  suppression_radius is in
    normalized units and converted through the intrinsics.  A median
    prefilter (denoise_median x denoise_median, <= 1 disables) strips
    impulse noise that would otherwise flood the gradient map.  Raises
    NotEnoughLines when fewer than n_lines peaks survive validation.
    """
    pts_list = []
    t_list = []
    for t, img in frames:
        if denoise_median and denoise_median > 1:
            img = ndimage.median_filter(np.asarray(img), size=denoise_median)
        em = EdgeMap.from_image(img, edge_threshold)
        pts_list.append(em.active)
        t_list.append(np.full(len(em.active), float(t)))
    points_px = np.concatenate(pts_list, axis=0) if pts_list else np.empty((0, 2))
    times = np.concatenate(t_list) if t_list else np.empty(0)

    lines = hough_lines(points_px, n_lines, rho_res=rho_res, theta_res_deg=theta_res_deg,
                        vote_threshold=vote_threshold, min_length=min_length, max_gap=max_gap,
                        suppression_radius=suppression_radius * intrinsics.fx)
    if len(lines) < n_lines:
        raise NotEnoughLines(f"found {len(lines)} of {n_lines} requested lines")
    return _detections_from_hough(lines, points_px, times, intrinsics)


def detect_initial_lines_from_points(frame_points, intrinsics: Intrinsics, n_lines: int = 4, *,
                                     rho_res: float = 5.0, theta_res_deg: float = 1.0,
                                     vote_threshold: int = 100, min_length: float = 100.0,
                                     max_gap: float | None = None,
                                     suppression_radius: float = 0.05) -> list[LineDetection]:
    """Detection for datasets that ship point clouds instead of rasters.

    frame_points is a list of objects with .t and .points (normalized
    coordinates); the points are mapped through the intrinsics so the same
    pixel-tuned Hough parameters apply.  Sparse point clouds sample lines
    with large random gaps, so the gap validation is disabled by default;
    the vote threshold and the overall span requirement still apply.
    """
    pts_list = []
    t_list = []
    for fp in frame_points:
        if len(fp.points) == 0:
            continue
        pts_list.append(intrinsics.normalized_to_pixels(fp.points))
        t_list.append(np.full(len(fp.points), float(fp.t)))
    points_px = np.concatenate(pts_list, axis=0) if pts_list else np.empty((0, 2))
    times = np.concatenate(t_list) if t_list else np.empty(0)

    lines = hough_lines(points_px, n_lines, rho_res=rho_res, theta_res_deg=theta_res_deg,
                        vote_threshold=vote_threshold, min_length=min_length, max_gap=max_gap,
                        suppression_radius=suppression_radius * intrinsics.fx)
    if len(lines) < n_lines:
        raise NotEnoughLines(f"found {len(lines)} of {n_lines} requested lines")
    return _detections_from_hough(lines, points_px, times, intrinsics)
