"""Ruling reprojection loss and the constrained window solver.

Each observed image point is explained by an unknown displacement alpha
along a candidate ruling.  alpha is eliminated in closed form inside every
residual evaluation (variable projection): with

    P = p * c - d          (sensitivity of the algebraic residual to alpha)
    Phi = e + t f + gamma_xy + t^2/2 g_xy - p (a + t b + gamma_z + t^2/2 g_z)

the algebraic objective || alpha P - Phi ||^2 is minimized by
alpha = (P . Phi) / (P . P).  The outer loss is the projective reprojection
error p - phat(t, alpha), summed over all observations of all lines, and is
minimized by damped least squares with the unit-direction and
perpendicular-foot constraints enforced by retraction after every accepted
step.  The Jacobian is analytic and includes the dependence of alpha on the
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateAlpha, NoObservations, ZeroDirection
from .geometry import LineState, Observation, RulingParams, TranslationSignal, canonical_sign
from .imu import GammaTable

_PTP_FLOOR = 1e-12


@dataclass(frozen=True)
class SharedMotionParams:
    """Motion parameters common to every line: depth velocity b, image-plane
    velocity f (both include the lumped integration bias), and the constant
    acceleration bias g that absorbs gravity and accelerometer offset."""

    b: float
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float).reshape(2))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float).reshape(3))
        if not (np.isfinite(self.b) and np.all(np.isfinite(self.f)) and np.all(np.isfinite(self.g))):
            raise ValueError("shared motion parameters must be finite")
        if np.linalg.norm(self.g) > 20.0:
            raise ValueError("gravity bias above the 20 m/s^2 sanity bound")


@dataclass(frozen=True)
class LineParams:
    """Per-line block (a, c, d, e) of one ruled surface."""

    a: float
    c: float
    d: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).reshape(2))
        object.__setattr__(self, "e", np.asarray(self.e, dtype=float).reshape(2))

    def to_line_state(self) -> LineState:
        return LineState(
            x0=np.array([self.e[0], self.e[1], self.a]),
            v0=np.array([self.d[0], self.d[1], self.c]),
        )

    @staticmethod
    def from_line_state(line: LineState) -> "LineParams":
        return LineParams(a=float(line.x0[2]), c=float(line.v0[2]), d=line.v0[:2].copy(), e=line.x0[:2].copy())


@dataclass(frozen=True)
class SurfaceSetParams:
    """All parameters of a window: M per-line blocks plus the shared block.

    6M + 6 free parameters; the unit-norm and perpendicularity constraints
    on each line remove 2M, leaving an effective 4M + 6 degrees of freedom.
    """

    per_line: tuple[LineParams, ...]
    shared: SharedMotionParams

    def __post_init__(self):
        object.__setattr__(self, "per_line", tuple(self.per_line))
        if len(self.per_line) < 1:
            raise ValueError("at least one line is required")

    @property
    def n_lines(self) -> int:
        return len(self.per_line)

    @property
    def free_parameter_count(self) -> int:
        return 6 * self.n_lines + 6

    @property
    def effective_dof(self) -> int:
        return 4 * self.n_lines + 6

    def line_state(self, i: int) -> LineState:
        return self.per_line[i].to_line_state()

    def ruling_params(self, i: int) -> RulingParams:
        blk = self.per_line[i]
        return RulingParams(a=blk.a, b=self.shared.b, c=blk.c, d=blk.d, e=blk.e,
                            f=self.shared.f, g=self.shared.g)

    def translation_signal(self, gamma: GammaTable) -> TranslationSignal:
        v = np.array([self.shared.f[0], self.shared.f[1], self.shared.b])
        return TranslationSignal(v, gamma, self.shared.g)

    @staticmethod
    def from_lines(lines, shared: SharedMotionParams) -> "SurfaceSetParams":
        return SurfaceSetParams(
            per_line=tuple(LineParams.from_line_state(l) for l in lines),
            shared=shared,
        )

    def unbounded_direction(self) -> bool:
        """True when the camera pose is unconstrained along a ruling: a single
        line, or every pair of lines (anti)parallel."""
        if self.n_lines == 1:
            return True
        dirs = [blk.to_line_state().v0 for blk in self.per_line]
        for i in range(len(dirs)):
            for j in range(i + 1, len(dirs)):
                if 1.0 - abs(float(dirs[i] @ dirs[j])) > 1e-6:
                    return False
        return True


@dataclass(frozen=True)
class AlphaSolve:
    """Closed-form inner solve for one observation."""

    alpha: float
    p_mat: np.ndarray
    phi: np.ndarray
    conditioning: float


class PointSet:
    """Vectorized bag of observations (times plus image points)."""

    def __init__(self, times, points):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.points = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(self.times) != len(self.points):
            raise ValueError("times and points lengths disagree")

    def __len__(self) -> int:
        return len(self.times)

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.empty(0), np.empty((0, 2)))

    @classmethod
    def from_observations(cls, obs: list[Observation]) -> "PointSet":
        if not obs:
            return cls.empty()
        return cls([o.t for o in obs], [o.p for o in obs])

    def to_observations(self) -> list[Observation]:
        return [Observation(t=float(t), p=p.copy()) for t, p in zip(self.times, self.points)]


def _as_point_set(obs) -> PointSet:
    if isinstance(obs, PointSet):
        return obs
    return PointSet.from_observations(list(obs))


@dataclass
class SolverConfig:
    """Knobs of the window solver; defaults follow the library's ledger."""

    max_iters: int = 200
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    ftol: float = 1e-6
    max_step_norm: float = 10.0
    restart_threshold: float = 0.01
    max_restarts: int = 10
    sigma_line: float = 0.05
    sigma_velocity: float = 0.02
    sigma_gravity: float = 0.1
    bad_residual: float = 10.0
    depth_floor: float = 1e-6
    infeasible_fraction: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class SolveDiagnostics:
    """Per-solve bookkeeping reported alongside the optimum."""

    iterations: int = 0
    restarts: int = 0
    final_loss: float = 0.0
    mean_loss: float = 0.0
    n_observations: int = 0
    n_degenerate: int = 0
    n_depth_violations: int = 0
    max_unit_violation: float = 0.0
    max_perp_violation: float = 0.0
    gradient_norm: float = 0.0
    stop_reason: str = ""
    infeasible: bool = False
    unbounded_direction: bool = False


@dataclass
class SolveResult:
    params: SurfaceSetParams
    final_loss: float
    diagnostics: SolveDiagnostics


# ---------------------------------------------------------------------------
# Vectorized evaluation


class _LineTerms:
    """Intermediates of the variable-projection evaluation for one line."""

    __slots__ = ("t", "p", "gxy", "gz", "A0", "B0", "P", "phi", "ptp", "alpha",
                 "z", "phat", "degenerate", "bad_depth", "valid")

    def __init__(self, blk: LineParams, shared: SharedMotionParams, t, p, gxy, gz, depth_floor):
        self.t = t
        self.p = p
        self.gxy = gxy
        self.gz = gz
        half_t2 = 0.5 * t * t
        self.A0 = blk.a + t * shared.b + gz + half_t2 * shared.g[2]
        self.B0 = blk.e[None, :] + t[:, None] * shared.f[None, :] + gxy + half_t2[:, None] * shared.g[None, :2]
        self.P = p * blk.c - blk.d[None, :]
        self.phi = self.B0 - p * self.A0[:, None]
        self.ptp = np.einsum("ij,ij->i", self.P, self.P)
        self.degenerate = self.ptp <= _PTP_FLOOR
        safe_ptp = np.where(self.degenerate, 1.0, self.ptp)
        self.alpha = np.einsum("ij,ij->i", self.P, self.phi) / safe_ptp
        self.z = self.A0 + self.alpha * blk.c
        self.bad_depth = self.z <= depth_floor
        self.valid = ~(self.degenerate | self.bad_depth)
        safe_z = np.where(self.valid, self.z, 1.0)
        num = self.B0 + self.alpha[:, None] * blk.d[None, :]
        self.phat = num / safe_z[:, None]


class _WindowData:
    """Observation arrays and gamma lookups frozen for one solve.

    Observation timestamps and the gamma table must share a time base; the
    model time is measured from gamma.t0 so the translation signal vanishes
    at the window origin.
    """

    def __init__(self, params: SurfaceSetParams, obs_by_line, gamma: GammaTable):
        if len(obs_by_line) != params.n_lines:
            raise ValueError("obs_by_line length must match the number of lines")
        self.gamma = gamma
        self.tau = []
        self.pts = []
        self.gxy = []
        self.gz = []
        for o in obs_by_line:
            ps = _as_point_set(o)
            if len(ps):
                vals = gamma.values_at(ps.times)
                tau = ps.times - gamma.t0
            else:
                vals = np.empty((0, 3))
                tau = np.empty(0)
            self.tau.append(tau)
            self.pts.append(ps.points)
            self.gxy.append(vals[:, :2])
            self.gz.append(vals[:, 2])
        self.n_obs = sum(len(t) for t in self.tau)
        self.n_lines = params.n_lines


def _evaluate(params: SurfaceSetParams, data: _WindowData, depth_floor: float,
              bad_residual: float, with_jacobian: bool):
    """Residual vector, optional Jacobian, and degeneracy counts."""
    n_par = params.free_parameter_count
    m = params.n_lines
    shared = params.shared
    r = np.empty((data.n_obs, 2))
    J = np.zeros((data.n_obs, 2, n_par)) if with_jacobian else None
    n_deg = 0
    n_depth = 0
    row = 0
    shared_base = 6 * m
    for li in range(m):
        n = len(data.tau[li])
        if n == 0:
            continue
        blk = params.per_line[li]
        points = data.pts[li]
        lt = _LineTerms(blk, shared, data.tau[li], points, data.gxy[li], data.gz[li], depth_floor)
        res = points - lt.phat
        res[~lt.valid] = bad_residual
        r[row:row + n] = res
        n_deg += int(np.sum(lt.degenerate))
        n_depth += int(np.sum(lt.bad_depth & ~lt.degenerate))

        if with_jacobian:
            t = lt.t
            alpha = lt.alpha
            safe_ptp = np.where(lt.degenerate, 1.0, lt.ptp)
            safe_z = np.where(lt.valid, lt.z, 1.0)
            p_dot_P = np.einsum("ij,ij->i", lt.P, points)
            p_dot_phi = np.einsum("ij,ij->i", points, lt.phi)

            def dres(dalpha, dz_extra, dnum_extra):
                dz = dalpha * blk.c + dz_extra
                dnum = dalpha[:, None] * blk.d[None, :] + dnum_extra
                out = -(dnum - lt.phat * dz[:, None]) / safe_z[:, None]
                out[~lt.valid] = 0.0
                return out

            zero2 = np.zeros((n, 2))
            e0 = np.zeros((n, 2)); e0[:, 0] = 1.0
            e1 = np.zeros((n, 2)); e1[:, 1] = 1.0
            ax0 = np.zeros((n, 2)); ax0[:, 0] = alpha
            ax1 = np.zeros((n, 2)); ax1[:, 1] = alpha

            col_a = dres(-p_dot_P / safe_ptp, np.ones(n), zero2)
            col_c = dres((p_dot_phi - 2.0 * alpha * p_dot_P) / safe_ptp, alpha, zero2)
            col_dx = dres((2.0 * alpha * lt.P[:, 0] - lt.phi[:, 0]) / safe_ptp, np.zeros(n), ax0)
            col_dy = dres((2.0 * alpha * lt.P[:, 1] - lt.phi[:, 1]) / safe_ptp, np.zeros(n), ax1)
            col_ex = dres(lt.P[:, 0] / safe_ptp, np.zeros(n), e0)
            col_ey = dres(lt.P[:, 1] / safe_ptp, np.zeros(n), e1)

            base = 6 * li
            Jl = J[row:row + n]
            Jl[:, :, base + 0] = col_a
            Jl[:, :, base + 1] = col_c
            Jl[:, :, base + 2] = col_dx
            Jl[:, :, base + 3] = col_dy
            Jl[:, :, base + 4] = col_ex
            Jl[:, :, base + 5] = col_ey
            # shared block: time-scaled copies of the a/e columns
            tcol = t[:, None]
            half_t2 = 0.5 * (t * t)[:, None]
            Jl[:, :, shared_base + 0] = tcol * col_a
            Jl[:, :, shared_base + 1] = tcol * col_ex
            Jl[:, :, shared_base + 2] = tcol * col_ey
            Jl[:, :, shared_base + 3] = half_t2 * col_ex
            Jl[:, :, shared_base + 4] = half_t2 * col_ey
            Jl[:, :, shared_base + 5] = half_t2 * col_a
        row += n

    r = r.reshape(-1)
    if with_jacobian:
        J = J.reshape(-1, n_par)
    return r, J, n_deg, n_depth


# ---------------------------------------------------------------------------
# Spec-surface operations


def solve_alpha(params: SurfaceSetParams, line_index: int, obs: Observation, gamma: GammaTable) -> AlphaSolve:
    """Closed-form displacement of one observation along one ruling.

    Raises DegenerateAlpha when the observation direction is parallel to the
    projected ruling direction (P vanishes), in which case the point
    constrains nothing along the ruling.
    """
    data = _WindowData(params, [[obs] if i == line_index else [] for i in range(params.n_lines)], gamma)
    lt = _LineTerms(params.per_line[line_index], params.shared, data.tau[line_index],
                    data.pts[line_index], data.gxy[line_index], data.gz[line_index],
                    depth_floor=-np.inf)
    cond = float(lt.ptp[0])
    if cond <= _PTP_FLOOR:
        raise DegenerateAlpha(f"P'P = {cond:g} below {_PTP_FLOOR:g}")
    return AlphaSolve(alpha=float(lt.alpha[0]), p_mat=lt.P[0].copy(), phi=lt.phi[0].copy(), conditioning=cond)


def residuals(params: SurfaceSetParams, obs_by_line, gamma: GammaTable,
              bad_residual: float = 10.0, depth_floor: float = 1e-6) -> np.ndarray:
    """Stacked 2-vector reprojection residuals p - phat for every observation.

    Degenerate-alpha and non-positive-depth observations contribute the
    constant ``bad_residual`` in both components instead of failing, so the
    solver can evaluate anywhere.
    """
    data = _WindowData(params, obs_by_line, gamma)
    r, _, _, _ = _evaluate(params, data, depth_floor, bad_residual, with_jacobian=False)
    return r


def loss_jacobian(params: SurfaceSetParams, obs_by_line, gamma: GammaTable,
                  bad_residual: float = 10.0, depth_floor: float = 1e-6) -> np.ndarray:
    """Jacobian of the residual vector w.r.t. the flat parameter vector.

    Columns are ordered per-line blocks (a, c, dx, dy, ex, ey) for each line
    in turn, then the shared block (b, fx, fy, gx, gy, gz).  alpha is treated
    as a function of the parameters, so every column carries the closed-form
    d(alpha)/d(theta) contribution.  Rows of flagged observations are zero.
    """
    data = _WindowData(params, obs_by_line, gamma)
    _, J, _, _ = _evaluate(params, data, depth_floor, bad_residual, with_jacobian=True)
    return J


def retract(params: SurfaceSetParams) -> SurfaceSetParams:
    """Project every line block onto the constraint set.

    (d, c) is normalized to a unit 3-vector with the canonical sign, and
    (e, a) is projected onto its orthogonal plane.  Shared parameters pass
    through untouched.  Raises ZeroDirection for vanishing directions.
    """
    new_blocks = []
    for blk in params.per_line:
        w = np.array([blk.d[0], blk.d[1], blk.c])
        norm = np.linalg.norm(w)
        if norm <= 1e-12:
            raise ZeroDirection("line direction collapsed during optimization")
        w = w / norm
        w = canonical_sign(w) * w
        x = np.array([blk.e[0], blk.e[1], blk.a])
        x = x - (x @ w) * w
        new_blocks.append(LineParams(a=float(x[2]), c=float(w[2]), d=w[:2], e=x[:2]))
    return SurfaceSetParams(per_line=tuple(new_blocks), shared=params.shared)


# ---------------------------------------------------------------------------
# Flat-vector plumbing for the solver


def params_to_vector(params: SurfaceSetParams) -> np.ndarray:
    chunks = []
    for blk in params.per_line:
        chunks.append([blk.a, blk.c, blk.d[0], blk.d[1], blk.e[0], blk.e[1]])
    s = params.shared
    chunks.append([s.b, s.f[0], s.f[1], s.g[0], s.g[1], s.g[2]])
    return np.concatenate(chunks).astype(float)


def params_from_vector(x: np.ndarray, n_lines: int) -> SurfaceSetParams:
    x = np.asarray(x, dtype=float)
    blocks = []
    for i in range(n_lines):
        a, c, dx, dy, ex, ey = x[6 * i:6 * i + 6]
        blocks.append(LineParams(a=a, c=c, d=np.array([dx, dy]), e=np.array([ex, ey])))
    b, fx, fy, gx, gy, gz = x[6 * n_lines:]
    shared = SharedMotionParams(b=b, f=np.array([fx, fy]), g=np.array([gx, gy, gz]))
    return SurfaceSetParams(per_line=tuple(blocks), shared=shared)


def _constraint_violation(params: SurfaceSetParams) -> tuple[float, float]:
    unit = 0.0
    perp = 0.0
    for blk in params.per_line:
        w = np.array([blk.d[0], blk.d[1], blk.c])
        x = np.array([blk.e[0], blk.e[1], blk.a])
        unit = max(unit, abs(float(np.linalg.norm(w)) - 1.0))
        perp = max(perp, abs(float(x @ w)))
    return unit, perp


def _perturb(params: SurfaceSetParams, rng: np.random.Generator, config: SolverConfig) -> SurfaceSetParams:
    x = params_to_vector(params)
    m = params.n_lines
    x[:6 * m] += rng.normal(0.0, config.sigma_line, size=6 * m)
    x[6 * m:6 * m + 3] += rng.normal(0.0, config.sigma_velocity, size=3)
    x[6 * m + 3:] += rng.normal(0.0, config.sigma_gravity, size=3)
    g_norm = float(np.linalg.norm(x[6 * m + 3:]))
    if g_norm > 19.9:
        x[6 * m + 3:] *= 19.9 / g_norm
    return retract(params_from_vector(x, m))


@dataclass
class _LmOutcome:
    params: SurfaceSetParams
    loss: float
    iterations: int
    gradient_norm: float
    stop_reason: str
    max_unit: float
    max_perp: float
    n_degenerate: int
    n_depth: int


def _levenberg_marquardt(params: SurfaceSetParams, data: _WindowData, config: SolverConfig) -> _LmOutcome:
    def ev(p, jac):
        return _evaluate(p, data, config.depth_floor, config.bad_residual, with_jacobian=jac)

    r, J, n_deg, n_depth = ev(params, True)
    loss = float(r @ r)
    lam = 1e-3
    max_unit = 0.0
    max_perp = 0.0
    gnorm = np.inf
    reason = "max_iters"
    iters = 0
    while iters < config.max_iters:
        iters += 1
        g = 2.0 * (J.T @ r)
        gnorm = float(np.max(np.abs(g))) if len(g) else 0.0
        if gnorm < config.gradient_tol:
            reason = "gradient"
            break
        JTJ = J.T @ J
        diag = np.diag(JTJ).copy()
        # flooring the Marquardt scale keeps steps bounded along directions
        # the data does not constrain (short windows leave the depth family
        # nearly flat); without it the solver teleports within the flat set
        floor = max(1e-12, 1e-6 * float(np.max(diag, initial=0.0)))
        diag = np.clip(diag, floor, None)
        rhs = -(J.T @ r)
        accepted = False
        while lam <= 1e12:
            try:
                delta = np.linalg.solve(JTJ + lam * np.diag(diag), rhs)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if float(np.linalg.norm(delta)) > config.max_step_norm:
                lam *= 3.0
                continue
            try:
                cand = retract(params_from_vector(params_to_vector(params) + delta, params.n_lines))
            except (ValueError, ZeroDirection):
                # candidate left the admissible set (sanity bounds, collapsed
                # direction); treat like an increase and damp harder
                lam *= 3.0
                continue
            r_new, _, _, _ = ev(cand, False)
            loss_new = float(r_new @ r_new)
            if np.isfinite(loss_new) and loss_new < loss:
                accepted = True
                break
            lam *= 3.0
        if not accepted:
            reason = "stalled"
            break
        improvement = loss - loss_new
        params = cand
        loss = loss_new
        unit, perp = _constraint_violation(params)
        max_unit = max(max_unit, unit)
        max_perp = max(max_perp, perp)
        lam = max(lam * 0.3, 1e-8)
        r, J, n_deg, n_depth = ev(params, True)
        if float(np.linalg.norm(delta)) < config.step_tol:
            reason = "step"
            break
        # relative-improvement stop: keeps the solver from drifting along
        # flat directions while chasing noise-level gains
        if improvement <= config.ftol * max(loss, 1e-300):
            reason = "ftol"
            break
    return _LmOutcome(params, loss, iters, gnorm, reason, max_unit, max_perp, n_deg, n_depth)


def solve_window(init: SurfaceSetParams, obs_by_line, gamma: GammaTable,
                 config: SolverConfig | None = None) -> SolveResult:
    """Minimize the ruling reprojection loss over one window.

    Damped least squares with retraction after every accepted step.  If the
    mean loss per observation stays above ``config.restart_threshold``, the
    best parameters are Gaussian-perturbed and re-solved, up to
    ``config.max_restarts`` times; the best-loss result wins.  Depth
    violations above ``config.infeasible_fraction`` of the observations mark
    the result infeasible (a flag, not an exception).
    """
    if config is None:
        config = SolverConfig()
    data = _WindowData(init, obs_by_line, gamma)
    if any(len(t) == 0 for t in data.tau):
        raise NoObservations("every line needs at least one observation")

    params = retract(init)
    rng = np.random.default_rng(config.seed)
    best = _levenberg_marquardt(params, data, config)
    iterations = best.iterations
    max_unit = best.max_unit
    max_perp = best.max_perp
    restarts = 0
    while best.loss / data.n_obs > config.restart_threshold and restarts < config.max_restarts:
        restarts += 1
        trial = _levenberg_marquardt(_perturb(best.params, rng, config), data, config)
        iterations += trial.iterations
        max_unit = max(max_unit, trial.max_unit)
        max_perp = max(max_perp, trial.max_perp)
        if trial.loss < best.loss:
            best = trial

    diag = SolveDiagnostics(
        iterations=iterations,
        restarts=restarts,
        final_loss=best.loss,
        mean_loss=best.loss / data.n_obs,
        n_observations=data.n_obs,
        n_degenerate=best.n_degenerate,
        n_depth_violations=best.n_depth,
        max_unit_violation=max_unit,
        max_perp_violation=max_perp,
        gradient_norm=best.gradient_norm,
        stop_reason=best.stop_reason,
        infeasible=best.n_depth / data.n_obs > config.infeasible_fraction,
        unbounded_direction=best.params.unbounded_direction(),
    )
    return SolveResult(params=best.params, final_loss=best.loss, diagnostics=diag)
