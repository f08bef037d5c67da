"""Virtual tissue plant and scenario generators.

The plant holds the ground-truth surface and evolves it under cuts with
configurable model-plant mismatch: delivered energy decays exponentially
with depth below the initial focal plane (defocus) and per cut since the
protective window was last cleaned (debris). Observations add Gaussian
height noise and a 3x3 median filter, standing in for a speckled scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DoesNotFit, InvalidGeometry, OutsideWorkspace
from .geometry import DEFAULT_SPACING_MM, GridSpec, HeightField
from .lti import CutInput, EnergyTable, LaserParams, carve_crater, energy_for_duty
from .planner import ConstraintField

DEFAULT_SCAN_NOISE_MM = 0.02


@dataclass(frozen=True)
class MismatchConfig:
    """Plant-side energy attenuation the planner's model does not know about.

    defocus_coeff: fractional energy loss per mm of surface drop below the
        initial focal plane.
    debris_attenuation: fractional energy loss per cut since the protective
        window was last cleaned.
    reset_every: cuts between window cleanings.
    """

    defocus_coeff: float = 0.0
    debris_attenuation: float = 0.0
    reset_every: int = 3

    def __post_init__(self):
        if not (0.0 <= self.defocus_coeff < 1.0 and 0.0 <= self.debris_attenuation < 1.0):
            raise ValueError("attenuation coefficients must lie in [0, 1)")
        if self.reset_every < 1:
            raise ValueError("reset_every must be >= 1")

    @property
    def any_active(self) -> bool:
        return self.defocus_coeff > 0.0 or self.debris_attenuation > 0.0


#: Defaults tuned so feedforward execution visibly undercuts while feedback
#: recovers; magnitudes are model choices, not measured values.
DEFAULT_MISMATCH = MismatchConfig(defocus_coeff=0.08, debris_attenuation=0.03, reset_every=3)


@dataclass(frozen=True)
class SphereStructure:
    """Embedded critical structure approximated by a sphere."""

    center: tuple[float, float, float]
    radius: float


@dataclass
class VirtualTissue:
    """Mutable ground-truth tissue state; serialize access externally."""

    truth: HeightField
    mismatch: MismatchConfig = field(default_factory=MismatchConfig)
    scan_noise_sigma: float = DEFAULT_SCAN_NOISE_MM
    embedded_structures: list = field(default_factory=list)
    tilt_model: str = "oblique"

    def __post_init__(self):
        if self.scan_noise_sigma < 0:
            raise ValueError("scan noise sigma must be nonnegative")
        self.initial_truth = self.truth
        self.cuts_since_clean = 0

    def apply(self, cut: CutInput, params: LaserParams, table: EnergyTable) -> HeightField:
        return plant_apply(self, cut, params, table).truth

    def scan(self, rng: np.random.Generator) -> HeightField:
        return scan_surface(self, rng)


def plant_apply(
    t: VirtualTissue, cut: CutInput, params: LaserParams, table: EnergyTable
) -> VirtualTissue:
    """Execute one cut on the plant with mismatch attenuation applied.

    Effective energy is E * (1 - defocus)^depth * (1 - debris)^cuts_since_clean,
    where depth is how far the surface at the cut center has dropped below
    the initial focal plane. Mutates and returns the same plant.
    """
    if not t.truth.contains(*cut.mu):
        raise OutsideWorkspace(f"cut at {cut.mu} is outside the plant workspace")
    energy = energy_for_duty(table, cut.duty)
    i, j = t.truth.index_of(*cut.mu)
    depth_below = max(0.0, float(t.initial_truth.z[i, j] - t.truth.z[i, j]))
    effective = (
        energy
        * (1.0 - t.mismatch.defocus_coeff) ** depth_below
        * (1.0 - t.mismatch.debris_attenuation) ** t.cuts_since_clean
    )
    z = carve_crater(t.truth, cut.mu, cut.tilt, effective, params, t.tilt_model)
    t.truth = t.truth.with_z(z)
    t.cuts_since_clean += 1
    if t.cuts_since_clean >= t.mismatch.reset_every:
        t.cuts_since_clean = 0
    return t


def _fill_invalid_nearest(z: np.ndarray, valid: np.ndarray) -> np.ndarray:
    filled = z.copy()
    if valid.all():
        return filled
    idx = ndimage.distance_transform_edt(~valid, return_distances=False, return_indices=True)
    filled[~valid] = z[idx[0][~valid], idx[1][~valid]]
    return filled


def scan_surface(t: VirtualTissue, rng: np.random.Generator) -> HeightField:
    """Observed surface: truth plus i.i.d. Gaussian noise, median-filtered 3x3.

    With zero noise the truth is returned exactly (no filtering)."""
    if t.scan_noise_sigma == 0.0:
        return t.truth
    truth = t.truth
    noisy = _fill_invalid_nearest(truth.z, truth.valid)
    noisy = noisy + rng.normal(0.0, t.scan_noise_sigma, size=noisy.shape)
    filtered = ndimage.median_filter(noisy, size=3, mode="nearest")
    return truth.with_z(np.where(truth.valid, filtered, np.nan))


@dataclass(frozen=True)
class Scenario:
    """Initial surface, resection target and constraint for one run."""

    name: str
    initial: HeightField
    target: HeightField
    constraint: ConstraintField
    seed: int = 0
    structures: tuple = ()

    def __post_init__(self):
        valid = self.initial.valid & self.target.valid
        if np.any(self.target.z[valid] > self.initial.z[valid] + 1e-9):
            raise ValueError("target must lie at or below the initial surface")
        act = self.constraint.active & valid
        if np.any(self.target.z[act] < self.constraint.ceiling.z[act] - 1e-9):
            raise ValueError("target must respect the constraint ceiling")


DEFAULT_WORKSPACE = GridSpec.from_extent((0.0, 0.0), (10.0, 10.0),
                                         (DEFAULT_SPACING_MM, DEFAULT_SPACING_MM))


def make_square_well(
    size: tuple[float, float],
    depth: float,
    workspace: GridSpec = DEFAULT_WORKSPACE,
    center: tuple[float, float] | None = None,
    name: str = "square-well",
) -> Scenario:
    """Flat surface with a rectangular well target of the given size and depth."""
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    initial = workspace.filled(0.0)
    xs, ys = workspace.x_coords(), workspace.y_coords()
    if center is None:
        center = (0.5 * (xs[0] + xs[-1]), 0.5 * (ys[0] + ys[-1]))
    hx, hy = size[0] / 2.0, size[1] / 2.0
    if (
        center[0] - hx < xs[0] - 1e-9
        or center[0] + hx > xs[-1] + 1e-9
        or center[1] - hy < ys[0] - 1e-9
        or center[1] + hy > ys[-1] + 1e-9
    ):
        raise DoesNotFit(f"{size[0]}x{size[1]} well does not fit the workspace")
    inside = (np.abs(xs[:, None] - center[0]) < hx) & (np.abs(ys[None, :] - center[1]) < hy)
    target_z = np.where(inside, -depth, 0.0)
    target = HeightField(workspace.origin, workspace.spacing, target_z)
    return Scenario(
        name=name,
        initial=initial,
        target=target,
        constraint=ConstraintField.inactive(initial),
    )


def make_spline_tumor(
    mean_radius: float,
    jitter: float,
    max_depth: float,
    seed: int,
    workspace: GridSpec | None = None,
    center: tuple[float, float] | None = None,
    n_control: int = 8,
    name: str = "spline-tumor",
) -> Scenario:
    """Irregular tumor footprint: a closed periodic spline through jittered radii.

    Control radii are mean_radius * (1 + jitter * u) with u uniform in
    [-1, 1], drawn deterministically from the seed.
    """
    if mean_radius <= 0:
        raise ValueError("mean_radius must be positive")
    from scipy.interpolate import CubicSpline

    if workspace is None:
        workspace = GridSpec.from_extent((0.0, 0.0), (6.0, 6.0),
                                         (DEFAULT_SPACING_MM, DEFAULT_SPACING_MM))
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=n_control)
    radii = mean_radius * (1.0 + jitter * u)
    angles = np.linspace(0.0, 2.0 * math.pi, n_control + 1)
    radius_of = CubicSpline(angles, np.append(radii, radii[0]), bc_type="periodic")

    initial = workspace.filled(0.0)
    xs, ys = workspace.x_coords(), workspace.y_coords()
    if center is None:
        center = (0.5 * (xs[0] + xs[-1]), 0.5 * (ys[0] + ys[-1]))
    dx = xs[:, None] - center[0]
    dy = ys[None, :] - center[1]
    rho = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2.0 * math.pi)
    inside = rho < radius_of(theta)
    target = HeightField(workspace.origin, workspace.spacing, np.where(inside, -max_depth, 0.0))
    return Scenario(
        name=name,
        initial=initial,
        target=target,
        constraint=ConstraintField.inactive(initial),
        seed=seed,
    )


def make_subsurface_constraint(
    scenario: Scenario,
    sphere_center: tuple[float, float, float],
    sphere_radius: float,
    clearance: float,
) -> Scenario:
    """Protect an embedded sphere: ceiling = top of the sphere plus clearance.

    The target is clipped upward so it never dips below the ceiling. The
    ceiling is only defined (active) over the sphere's footprint.
    """
    if sphere_radius <= 0:
        raise ValueError("sphere radius must be positive")
    if clearance < 0:
        raise ValueError("clearance must be nonnegative")
    initial = scenario.initial
    xs, ys = initial.x_coords(), initial.y_coords()
    rho2 = (xs[:, None] - sphere_center[0]) ** 2 + (ys[None, :] - sphere_center[1]) ** 2
    foot = rho2 <= sphere_radius**2
    if not foot.any():
        raise InvalidGeometry("sphere footprint misses the workspace")
    with np.errstate(invalid="ignore"):
        top = sphere_center[2] + np.sqrt(np.maximum(sphere_radius**2 - rho2, 0.0))
    check = foot & initial.valid
    if np.any(top[check] > initial.z[check] + 1e-12):
        raise InvalidGeometry("sphere pierces the initial surface")
    ceiling_z = np.where(foot, top + clearance, np.nan)
    if np.any(ceiling_z[check] > initial.z[check] + 1e-12):
        raise InvalidGeometry("clearance margin exceeds the gap to the surface")
    ceiling = HeightField(initial.origin, initial.spacing, ceiling_z, foot & initial.valid)
    constraint = ConstraintField(ceiling)
    target_z = scenario.target.writable_z()
    clip = constraint.active & scenario.target.valid
    target_z[clip] = np.maximum(target_z[clip], ceiling_z[clip])
    target = scenario.target.with_z(target_z)
    return Scenario(
        name=scenario.name + "+sphere",
        initial=initial,
        target=target,
        constraint=constraint,
        seed=scenario.seed,
        structures=scenario.structures + (SphereStructure(tuple(sphere_center), sphere_radius),),
    )
