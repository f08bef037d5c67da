"""Exception hierarchy shared by all laserplan modules."""


class LaserPlanError(Exception):
    """Base class for all package errors."""


class DegenerateInput(LaserPlanError):
    """Input data does not constrain the requested computation."""


class EmptyOverlap(LaserPlanError):
    """Scattered data hull does not intersect the target grid."""


class GridMismatch(LaserPlanError):
    """Heightfields do not share origin, spacing and shape."""


class OutOfRange(LaserPlanError):
    """Requested value lies outside the supported interval."""


class OutsideWorkspace(LaserPlanError):
    """Cut location falls outside the valid surface region."""


class NothingToCut(LaserPlanError):
    """No residual cells remain above the target surface."""


class NoProgress(LaserPlanError):
    """Tree expansion inserted zero feasible children."""


class Stalled(LaserPlanError):
    """Planner produced several consecutive empty plans."""


class NoConvergence(LaserPlanError):
    """Iterative solver exhausted its iteration budget."""


class InvalidTarget(LaserPlanError):
    """Target surface lies above the initial surface somewhere."""


class DoesNotFit(LaserPlanError):
    """Requested shape does not fit inside the workspace."""


class InvalidGeometry(LaserPlanError):
    """Geometric construction is inconsistent (e.g. structure pierces the surface)."""


class NoBlobs(LaserPlanError):
    """No connected components survive thresholding."""


class MissingData(LaserPlanError):
    """Execution log lacks the records needed for this export."""


class InsufficientMotion(LaserPlanError):
    """Pose pairs do not span enough rotation axes to calibrate."""


class ConfigError(LaserPlanError):
    """Run configuration is missing, malformed or inconsistent."""


class PlantFault(LaserPlanError):
    """Virtual tissue plant rejected or failed an operation."""


class ConstraintViolation(LaserPlanError):
    """A realized or predicted surface dropped below the constraint ceiling."""
