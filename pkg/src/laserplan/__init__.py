"""laserplan: simulation and planning toolkit for volumetric laser resection.

Surfaces are heightfields in a sensor-aligned frame (+z away from tissue,
mm everywhere). The package covers the single-shot crater model and its
regression from scans, a sampling-based MPC planner with hard subsurface
constraints, feedforward and closed-loop execution against a virtual
tissue plant, calibration solvers and perception utilities, plus a CLI.
"""

from .errors import LaserPlanError
from .fitting import FitResult, MetricReport, compute_metrics, fit_crater
from .geometry import (
    GridSpec,
    HeightField,
    PointCloud3,
    RigidTransform,
    compose,
    fit_plane,
    interpolate_scattered,
)
from .lti import (
    DEFAULT_ENERGY_TABLE,
    DEFAULT_LASER_PARAMS,
    CutInput,
    EnergyTable,
    LaserParams,
    apply_cut,
    crater_depth,
    energy_for_duty,
)
from .planner import (
    ConstraintField,
    PlannerConfig,
    PlanNode,
    PlanTree,
    check_constraint,
    grow_tree,
    node_cost,
    plan_feedforward,
    plan_with_feedback,
    residual_volume,
    sample_candidate,
)
from .runlog import ExecutionLog
from .tissue import (
    MismatchConfig,
    Scenario,
    VirtualTissue,
    make_spline_tumor,
    make_square_well,
    make_subsurface_constraint,
    plant_apply,
    scan_surface,
)

__version__ = "0.1.0"

__all__ = [
    "LaserPlanError",
    "FitResult",
    "MetricReport",
    "compute_metrics",
    "fit_crater",
    "GridSpec",
    "HeightField",
    "PointCloud3",
    "RigidTransform",
    "compose",
    "fit_plane",
    "interpolate_scattered",
    "DEFAULT_ENERGY_TABLE",
    "DEFAULT_LASER_PARAMS",
    "CutInput",
    "EnergyTable",
    "LaserParams",
    "apply_cut",
    "crater_depth",
    "energy_for_duty",
    "ConstraintField",
    "PlannerConfig",
    "PlanNode",
    "PlanTree",
    "check_constraint",
    "grow_tree",
    "node_cost",
    "plan_feedforward",
    "plan_with_feedback",
    "residual_volume",
    "sample_candidate",
    "ExecutionLog",
    "MismatchConfig",
    "Scenario",
    "VirtualTissue",
    "make_spline_tumor",
    "make_square_well",
    "make_subsurface_constraint",
    "plant_apply",
    "scan_surface",
    "__version__",
]
