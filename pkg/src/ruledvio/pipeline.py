"""End-to-end sliding-window estimation.

The sequence driver detects initial lines over a short burst of frames,
extrudes the fitted surfaces frame by frame until the window is full, then
slides the window to the end of the recording.  Every window is solved in
its own derotated frame (the camera frame at the window start); a chained
basis rotation maps per-window estimates into the frame of the initial
camera pose, where consecutive displacements accumulate into the odometry.

Point bookkeeping is correspondence-free: each window keeps its raw frames
plus a per-frame claim array.  At every step, all still-unclaimed points are
offered to the current surface estimate and claimed when they fall within
tau of exactly one predicted ruling.  Claims are never revoked inside a
window (E only grows, and only with points that passed the gate at claim
time), but points rejected while the estimate was poor are re-admitted once
the estimate can explain them, which keeps the fit from freezing onto a
stale subset of the evidence.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .detect import detect_initial_lines, detect_initial_lines_from_points
from .errors import (
    DegenerateProjection,
    EmptyAssociationWarning,
    EstimationInfeasible,
    NonPositiveDepth,
    SeamMismatch,
)
from .estimator import (
    LineParams,
    PointSet,
    SharedMotionParams,
    SolverConfig,
    SurfaceSetParams,
    retract,
    solve_window,
)
from .geometry import (
    FramePoints,
    Intrinsics,
    LineState,
    TranslationSignal,
    canonicalize_line,
    ruling_endpoints_in_image,
)
from .imu import (
    GammaTable,
    ImuTrack,
    RotationTable,
    derotate_points,
    integrate_gamma,
    integrate_gyro,
    rechain_window_rotation,
)
from .rotations import quat_identity, quat_to_matrix

_SEAM_EPS = 1e-9


@dataclass
class PipelineConfig:
    """All pipeline knobs; serialized as the dataset's config.json."""

    window_frames: int = 140
    n_lines: int = 4
    tau: float = 0.01
    detect_interval: float = 0.1
    a_init: float = 1.0
    g_init: tuple = (0.0, 0.0, 0.0)
    suppression_radius: float = 0.05
    starvation_limit: int = 30
    frame_gap: float = 0.1
    max_window_span: float = 2.0
    edge_threshold: float = 150.0
    denoise_median: int = 3
    hough_rho: float = 5.0
    hough_theta_deg: float = 1.0
    hough_votes: int = 100
    hough_min_length: float = 100.0
    hough_max_gap: float = 5.0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "solver":
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        if "solver" in d and isinstance(d["solver"], dict):
            d["solver"] = SolverConfig.from_dict(d["solver"])
        if "g_init" in d:
            d["g_init"] = tuple(float(x) for x in d["g_init"])
        return cls(**d)


class WindowImu:
    """Per-window IMU products: rotation tables and scene-frame gamma tables.

    The scene moves opposite to the camera, so the gamma table handed to the
    estimator is the negated double integral of the measured (derotated)
    camera acceleration.
    """

    def __init__(self, track: ImuTrack):
        self.track = track

    def window_tables(self, t_start: float, t_end: float, query_times) -> tuple[RotationTable, GammaTable]:
        sub = self.track.slice_span(t_start, t_end)
        rot = integrate_gyro(sub, t_start)
        gamma = integrate_gamma(sub, t_start, query_times, rot).negated()
        return rot, gamma


@dataclass
class WindowEstimate:
    """One window's fitted surface set with its supporting data.

    frames hold the raw camera-frame points of every frame in the window;
    claims mark which line (index, or -1) each point currently belongs to.
    """

    t_start: float
    t_end: float
    frame_times: np.ndarray
    params: SurfaceSetParams
    frames: list
    claims: list
    rotation: RotationTable
    gamma: GammaTable
    basis_rotation: np.ndarray
    diagnostics: dict

    @property
    def rotation_center(self) -> float:
        return self.t_start

    def signal(self) -> TranslationSignal:
        return self.params.translation_signal(self.gamma)

    def line_states(self) -> list[LineState]:
        return [self.params.line_state(i) for i in range(self.params.n_lines)]

    def line_point_counts(self) -> list[int]:
        counts = [0] * self.params.n_lines
        for claim in self.claims:
            for li in range(self.params.n_lines):
                counts[li] += int(np.sum(claim == li))
        return counts

    def line_observations(self, line_index: int) -> list[FramePoints]:
        """Raw claimed points of one line, grouped per frame."""
        out = []
        for fp, claim in zip(self.frames, self.claims):
            sel = claim == line_index
            if np.any(sel):
                out.append(FramePoints(t=fp.t, points=fp.points[sel]))
        return out


@dataclass
class OdometryResult:
    """Camera positions in the basis frame plus per-window line geometry."""

    timestamps: np.ndarray
    positions: np.ndarray
    window_times: np.ndarray
    window_line_states: list
    basis_line_states: list


@dataclass
class SequenceResult:
    odometry: OdometryResult
    windows: list
    rotations: list


# ---------------------------------------------------------------------------
# Initialization


def init_surface_params(detections, gamma, config: PipelineConfig) -> SurfaceSetParams:
    """Back-project detected image lines at the initial depth guess.

    Each detection contributes a line whose image at the window origin is
    exactly the detected line: direction in the image plane, zero depth
    slope, foot scaled out to a_init.  The gamma argument is accepted for
    interface parity with the other initializers; the default initializer
    starts the motion parameters at zero and does not consult it.
    """
    blocks = []
    for det in detections:
        u = np.asarray(det.direction_n, dtype=float)
        u = u / np.linalg.norm(u)
        q = np.asarray(det.foot_n, dtype=float)
        blocks.append(LineParams(a=config.a_init, c=0.0, d=u, e=q * config.a_init))
    shared = SharedMotionParams(b=0.0, f=np.zeros(2), g=np.asarray(config.g_init, dtype=float))
    return retract(SurfaceSetParams(per_line=tuple(blocks), shared=shared))


# ---------------------------------------------------------------------------
# Association


def _predicted_image_lines(params: SurfaceSetParams, xt) -> list:
    """(normal, offset) of each ruling's image line at displacement xt, or
    None for lines that cannot be projected."""
    out = []
    for i in range(params.n_lines):
        try:
            r1, r2 = ruling_endpoints_in_image(params.line_state(i), xt)
        except (NonPositiveDepth, DegenerateProjection):
            out.append(None)
            continue
        d = r2 - r1
        n = np.array([-d[1], d[0]])
        n = n / np.linalg.norm(n)
        out.append((n, float(n @ r1)))
    return out


def _associate_frame(params: SurfaceSetParams, xt, points: np.ndarray, tau: float):
    """Assign derotated points to rulings within tau of exactly one of them.

    Returns (per-line index lists, ambiguous count).  Points within tau of
    two or more predicted rulings are discarded.
    """
    m = params.n_lines
    if len(points) == 0:
        return [np.empty(0, dtype=int) for _ in range(m)], 0
    lines = _predicted_image_lines(params, xt)
    dists = np.full((len(points), m), np.inf)
    for i, ln in enumerate(lines):
        if ln is None:
            continue
        n, c = ln
        dists[:, i] = np.abs(points @ n - c)
    within = dists < tau
    counts = within.sum(axis=1)
    ambiguous = int(np.sum(counts >= 2))
    picked = [np.nonzero(within[:, i] & (counts == 1))[0] for i in range(m)]
    return picked, ambiguous


def _offer_unclaimed(params: SurfaceSetParams, signal: TranslationSignal, rot: RotationTable,
                     frames: list, claims: list, tau: float):
    """Offer every unclaimed point in the window to the current estimate.

    Claims points that now fall within tau of exactly one predicted ruling;
    previously claimed points are untouched.  Returns (per-line gained
    counts, ambiguous count).
    """
    m = params.n_lines
    gained = [0] * m
    ambiguous = 0
    for fp, claim in zip(frames, claims):
        idx = np.nonzero(claim == -1)[0]
        if len(idx) == 0:
            continue
        keep, derot = derotate_points(np.full(len(idx), fp.t), fp.points[idx], rot)
        if not np.any(keep):
            continue
        picked, amb = _associate_frame(params, signal.position(fp.t), derot[keep], tau)
        ambiguous += amb
        kept_idx = idx[keep]
        for li, sel in enumerate(picked):
            claim[kept_idx[sel]] = li
            gained[li] += len(sel)
    return gained, ambiguous


def _claimed_point_sets(params: SurfaceSetParams, frames: list, claims: list,
                        rot: RotationTable) -> tuple[list, int]:
    """Derotated per-line point sets of the currently claimed observations."""
    m = params.n_lines
    per_line_t = [[] for _ in range(m)]
    per_line_p = [[] for _ in range(m)]
    dropped = 0
    for fp, claim in zip(frames, claims):
        claimed = claim >= 0
        if not np.any(claimed):
            continue
        idx = np.nonzero(claimed)[0]
        keep, derot = derotate_points(np.full(len(idx), fp.t), fp.points[idx], rot)
        dropped += int(np.sum(~keep))
        for li in range(m):
            sel = keep & (claim[idx] == li)
            if np.any(sel):
                per_line_t[li].append(np.full(int(np.sum(sel)), fp.t))
                per_line_p[li].append(derot[sel])
    out = []
    for li in range(m):
        if per_line_t[li]:
            out.append(PointSet(np.concatenate(per_line_t[li]), np.concatenate(per_line_p[li])))
        else:
            out.append(PointSet.empty())
    return out, dropped


def _solve_on_window(params_init, frames, claims, rot, gamma, config, extra_diag=None):
    start = time.perf_counter()
    obs, dropped = _claimed_point_sets(params_init, frames, claims, rot)
    result = solve_window(params_init, obs, gamma, config.solver)
    diag = asdict(result.diagnostics)
    diag["n_dropped_derotation"] = dropped
    diag["solve_seconds"] = time.perf_counter() - start
    if extra_diag:
        diag.update(extra_diag)
    return result, diag


def _check_spacing(est: WindowEstimate, t_new: float, config: PipelineConfig):
    if not (t_new > est.t_end):
        raise ValueError("frames must advance in time")
    if t_new - est.t_end >= config.frame_gap:
        raise ValueError(
            f"frame gap {t_new - est.t_end:g}s exceeds the {config.frame_gap:g}s bound")


def _track_starvation(prev_diag: dict, gains, limit: int) -> list:
    streaks = list(prev_diag.get("starvation", [0] * len(gains)))
    for i, gained in enumerate(gains):
        streaks[i] = 0 if gained else streaks[i] + 1
        if streaks[i] == limit + 1:
            warnings.warn(
                f"line {i} gained no points for more than {limit} consecutive frames",
                EmptyAssociationWarning,
            )
    return streaks


# ---------------------------------------------------------------------------
# Algorithm steps


def extrude_surface(est: WindowEstimate, new_frame: FramePoints, imu: WindowImu,
                    config: PipelineConfig) -> WindowEstimate:
    """Extend the window's surfaces to one more frame.

    Predicts each ruling from the current parameters and the extended gamma
    table, claims unclaimed points (the new frame's and any the estimate can
    now explain) within tau of exactly one prediction, and re-solves with a
    warm start; perturbation restarts apply while the mean loss stays above
    the solver threshold.
    """
    t_new = float(new_frame.t)
    _check_spacing(est, t_new, config)
    if t_new - est.t_start > config.max_window_span:
        raise ValueError("window span exceeds the configured maximum")

    frame_times = np.append(est.frame_times, t_new)
    rot, gamma = imu.window_tables(est.t_start, t_new, frame_times)

    frames = est.frames + [new_frame]
    claims = [c.copy() for c in est.claims] + [np.full(len(new_frame), -1, dtype=int)]
    gained, ambiguous = _offer_unclaimed(est.params, est.params.translation_signal(gamma),
                                         rot, frames, claims, config.tau)
    starvation = _track_starvation(est.diagnostics, gained, config.starvation_limit)

    result, diag = _solve_on_window(est.params, frames, claims, rot, gamma, config, {
        "n_new_points": int(sum(gained)),
        "n_ambiguous": ambiguous,
        "starvation": starvation,
    })
    return WindowEstimate(
        t_start=est.t_start, t_end=t_new, frame_times=frame_times,
        params=result.params, frames=frames, claims=claims, rotation=rot, gamma=gamma,
        basis_rotation=est.basis_rotation, diagnostics=diag,
    )


def slide_window(est: WindowEstimate, new_frame: FramePoints, gamma_provider: WindowImu,
                 config: PipelineConfig) -> WindowEstimate:
    """Advance the window by one frame.

    Claims points at the new frame against rulings predicted from the
    current window, trims observations older than the new start, rebases the
    window origin (origin shift applied to the directrices, velocity
    re-evaluated, gamma and rotations recomputed from the new origin), and
    re-solves with a warm start.
    """
    imu = gamma_provider
    t_new = float(new_frame.t)
    _check_spacing(est, t_new, config)

    # claim new (and newly explainable) points using the old window's frame
    old_times = np.append(est.frame_times, t_new)
    rot_old, gamma_old = imu.window_tables(est.t_start, t_new, old_times)
    frames = est.frames + [new_frame]
    claims = [c.copy() for c in est.claims] + [np.full(len(new_frame), -1, dtype=int)]
    signal_old = est.params.translation_signal(gamma_old)
    gained, ambiguous = _offer_unclaimed(est.params, signal_old, rot_old, frames, claims, config.tau)
    starvation = _track_starvation(est.diagnostics, gained, config.starvation_limit)

    # trim to the new interval
    t_start_new = float(est.frame_times[1])
    frame_times = np.append(est.frame_times[1:], t_new)
    keep = [i for i, fp in enumerate(frames) if fp.t >= t_start_new - _SEAM_EPS]
    frames = [frames[i] for i in keep]
    claims = [claims[i] for i in keep]

    # rebase parameters at the new origin, in the new center's camera frame
    shift_q = est.rotation.camera_from_reference(t_start_new)
    R = quat_to_matrix(shift_q)
    x_shift = signal_old.position(t_start_new)
    vel_new = R @ signal_old.velocities([t_start_new])[0]
    blocks = []
    for li in range(est.params.n_lines):
        line = est.params.line_state(li)
        x0 = R @ (line.x0 + x_shift)
        v0 = R @ line.v0
        blocks.append(LineParams(a=float(x0[2]), c=float(v0[2]), d=v0[:2], e=x0[:2]))
    shared = SharedMotionParams(b=float(vel_new[2]), f=vel_new[:2], g=R @ est.params.shared.g)
    warm = retract(SurfaceSetParams(per_line=tuple(blocks), shared=shared))

    rot_new, gamma_new = imu.window_tables(t_start_new, t_new, frame_times)
    basis_rotation = rechain_window_rotation(est.basis_rotation, est.rotation, t_start_new)

    result, diag = _solve_on_window(warm, frames, claims, rot_new, gamma_new, config, {
        "n_new_points": int(sum(gained)),
        "n_ambiguous": ambiguous,
        "starvation": starvation,
    })
    return WindowEstimate(
        t_start=t_start_new, t_end=t_new, frame_times=frame_times,
        params=result.params, frames=frames, claims=claims, rotation=rot_new, gamma=gamma_new,
        basis_rotation=basis_rotation, diagnostics=diag,
    )


def accumulate_odometry(windows: list, rotations=None) -> OdometryResult:
    """Chain per-window displacements into the basis-frame trajectory.

    Consecutive windows must be seamed one frame apart.  The camera moves
    opposite to the scene translation, so each window's first-frame
    displacement enters negated, rotated by that window's basis rotation.
    The last window contributes its whole translation signal, which makes a
    single full-sequence window reduce to exactly -X(t).
    """
    if not windows:
        raise ValueError("no windows to accumulate")
    if rotations is None:
        rotations = [w.basis_rotation for w in windows]
    if len(rotations) != len(windows):
        raise ValueError("one rotation per window is required")
    for prev, nxt in zip(windows[:-1], windows[1:]):
        if abs(float(prev.frame_times[1]) - nxt.t_start) > _SEAM_EPS:
            raise SeamMismatch(
                f"window starting {nxt.t_start:g} does not continue {prev.t_start:g}")

    times = [windows[0].t_start]
    positions = [np.zeros(3)]
    for i in range(len(windows) - 1):
        t_next = windows[i + 1].t_start
        d = windows[i].signal().position(t_next)
        Rm = quat_to_matrix(rotations[i])
        positions.append(positions[-1] - Rm @ d)
        times.append(t_next)

    last = windows[-1]
    base = positions[-1]
    R_last = quat_to_matrix(rotations[-1])
    tail = last.signal().positions(last.frame_times[1:])
    for t, x in zip(last.frame_times[1:], tail):
        positions.append(base - R_last @ x)
        times.append(float(t))

    window_lines = []
    basis_lines = []
    for i, w in enumerate(windows):
        Rm = quat_to_matrix(rotations[i])
        cam = w.line_states()
        window_lines.append(cam)
        pos_w = positions[i]
        basis_lines.append([
            canonicalize_line(Rm @ l.x0 + pos_w, Rm @ l.v0) for l in cam
        ])

    return OdometryResult(
        timestamps=np.array(times),
        positions=np.array(positions),
        window_times=np.array([w.t_start for w in windows]),
        window_line_states=window_lines,
        basis_line_states=basis_lines,
    )


# ---------------------------------------------------------------------------
# Sequence driver


def run_sequence(frames: list, track: ImuTrack, config: PipelineConfig | None = None, *,
                 intrinsics: Intrinsics | None = None, rasters=None,
                 init_params: SurfaceSetParams | None = None,
                 on_window=None) -> SequenceResult:
    """Estimate odometry over a whole recording.

    frames is a chronological list of FramePoints (rasters optionally carry
    the grayscale images for Hough initialization).  When init_params is
    given, detection is skipped; initial points are claimed by association
    against the supplied parameters.  on_window(index, estimate) is invoked
    after every completed window.

    Raises NotEnoughLines when initialization fails and
    EstimationInfeasible (carrying .windows) when a window stays infeasible
    after all restarts.
    """
    if config is None:
        config = PipelineConfig()
    if intrinsics is None:
        from .sim import DEFAULT_INTRINSICS
        intrinsics = DEFAULT_INTRINSICS

    frames = sorted(frames, key=lambda f: f.t)
    n = len(frames)
    k = config.window_frames
    if n < k + 1:
        raise ValueError(f"{n} frames cannot fill a {k}-frame window")

    t0 = frames[0].t
    imu = WindowImu(track)

    if init_params is None:
        seed_count = max(sum(1 for f in frames if f.t <= t0 + config.detect_interval), 1)
        seed_frames = frames[:seed_count]
        if rasters is not None:
            detections = detect_initial_lines(
                [(f.t, img) for f, img in zip(seed_frames, rasters[:seed_count])],
                intrinsics, config.n_lines,
                edge_threshold=config.edge_threshold, rho_res=config.hough_rho,
                theta_res_deg=config.hough_theta_deg, vote_threshold=config.hough_votes,
                min_length=config.hough_min_length, max_gap=config.hough_max_gap,
                suppression_radius=config.suppression_radius,
                denoise_median=config.denoise_median)
        else:
            # point-cloud datasets sample lines sparsely; gap validation off
            detections = detect_initial_lines_from_points(
                seed_frames, intrinsics, config.n_lines,
                rho_res=config.hough_rho, theta_res_deg=config.hough_theta_deg,
                vote_threshold=config.hough_votes, min_length=config.hough_min_length,
                suppression_radius=config.suppression_radius)
        params0 = init_surface_params(detections, None, config)
    else:
        # the supplied parameters stand in for detection; keep the seed short
        params0 = retract(init_params)
        seed_count = min(2, n)
        seed_frames = frames[:seed_count]

    frame_times_init = np.array([f.t for f in seed_frames])
    t_end_init = float(frame_times_init[-1])
    rot, gamma = imu.window_tables(t0, t_end_init, frame_times_init)

    init_frames = list(seed_frames)
    init_claims = [np.full(len(f), -1, dtype=int) for f in init_frames]
    gained, ambiguous = _offer_unclaimed(params0, params0.translation_signal(gamma), rot,
                                         init_frames, init_claims, config.tau)
    result, diag = _solve_on_window(params0, init_frames, init_claims, rot, gamma, config, {
        "n_new_points": int(sum(gained)),
        "n_ambiguous": ambiguous,
        "starvation": [0] * config.n_lines,
    })
    est = WindowEstimate(
        t_start=t0, t_end=t_end_init, frame_times=frame_times_init,
        params=result.params, frames=init_frames, claims=init_claims,
        rotation=rot, gamma=gamma,
        basis_rotation=quat_identity(), diagnostics=diag,
    )

    # grow the first window to k+1 frame times, then slide to the end
    windows = []
    rotations = []

    def finish(idx, w):
        if w.diagnostics.get("infeasible"):
            err = EstimationInfeasible(f"window {idx} infeasible after restarts")
            err.windows = windows
            raise err
        windows.append(w)
        rotations.append(w.basis_rotation)
        if on_window is not None:
            on_window(idx, w)

    for i in range(seed_count, k + 1):
        est = extrude_surface(est, frames[i], imu, config)
    finish(0, est)

    for j, i in enumerate(range(k + 1, n), start=1):
        est = slide_window(est, frames[i], imu, config)
        finish(j, est)

    odometry = accumulate_odometry(windows, rotations)
    return SequenceResult(odometry=odometry, windows=windows, rotations=rotations)
