"""Correspondence-free visual-inertial odometry from inertially constrained
ruled surfaces.

A moving camera observing a static 3D straight line sees the projected line
sweep a ruled surface in image-time space.  Fitting such surfaces to loose
image-time point clouds, with the motion constrained by integrated IMU
measurements, recovers the camera translation and the 3D line geometry
without point-to-point or line-to-line correspondence.
"""

from .errors import (
    DegenerateAlpha,
    DegenerateProjection,
    EmptyAssociationWarning,
    EstimationInfeasible,
    LineNotVisible,
    NoObservations,
    NonPositiveDepth,
    NotEnoughLines,
    OutOfRange,
    RuledVioError,
    SeamMismatch,
    TimeRangeMismatch,
    ZeroDirection,
)
from .geometry import (
    DEPTH_FLOOR,
    Intrinsics,
    LineState,
    Observation,
    RulingParams,
    TranslationSignal,
    canonicalize_line,
    point_to_ruling_distance,
    project_ruling_point,
    ruling_endpoints_in_image,
)
from .imu import (
    GammaTable,
    ImuSample,
    ImuTrack,
    RotationTable,
    derotate_observations,
    integrate_gamma,
    integrate_gyro,
    rechain_window_rotation,
)
from .estimator import (
    AlphaSolve,
    LineParams,
    PointSet,
    SharedMotionParams,
    SolveDiagnostics,
    SolveResult,
    SolverConfig,
    SurfaceSetParams,
    loss_jacobian,
    residuals,
    retract,
    solve_alpha,
    solve_window,
)

__version__ = "0.1.0"
