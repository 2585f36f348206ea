"""Exception and warning types shared across the library."""


class RuledVioError(Exception):
    """Base class for all library errors."""


class ZeroDirection(RuledVioError):
    """Direction vector too short to define a line."""


class NonPositiveDepth(RuledVioError):
    """A modeled point fell behind (or onto) the image plane."""


class DegenerateProjection(RuledVioError):
    """Projected ruling collapses to a point (line viewed end-on)."""


class OutOfRange(RuledVioError):
    """Query time not covered by a track or table."""


class DegenerateAlpha(RuledVioError):
    """Observation constrains nothing along the projected ruling."""


class NoObservations(RuledVioError):
    """Solve requested with an empty point set."""


class NotEnoughLines(RuledVioError):
    """Detector could not find the requested number of lines."""


class SeamMismatch(RuledVioError):
    """Window boundaries do not align for odometry accumulation."""


class TimeRangeMismatch(RuledVioError):
    """Estimate and ground truth do not overlap in time."""


class LineNotVisible(RuledVioError):
    """A scene line is outside the field of view for too many frames."""


class EstimationInfeasible(RuledVioError):
    """A window solve stayed infeasible after all perturbation restarts."""


class EmptyAssociationWarning(UserWarning):
    """A tracked line has gained no points for many consecutive frames."""
