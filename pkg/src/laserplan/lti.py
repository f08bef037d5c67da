"""Single-shot laser-tissue interaction model.

A dwell of the laser at duty cycle D delivers energy E(D) (piecewise-linear
in the measured duty/energy table) and carves a radially symmetric
super-Gaussian crater

    depth(r) = -amplitude * max(0, E * exp(-(r^2 / (2 sigma^2))^sharpness) - threshold)

into the surface. sharpness = 1 recovers an ordinary Gaussian profile;
larger values flatten the bottom and steepen the walls. Craters superpose
additively: the model is geometric and history-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import OutOfRange, OutsideWorkspace
from .geometry import HeightField

DEFAULT_DWELL_S = 1.5
DEFAULT_TILT_LIMIT_DEG = 10.0

#: Measured mean/std pulse energy per duty cycle (percent, J, J).
MEASURED_ENERGY_ROWS = (
    (20.0, 1.91, 0.016),
    (30.0, 3.50, 0.014),
    (40.0, 5.11, 0.033),
    (50.0, 6.75, 0.030),
    (60.0, 7.68, 0.064),
    (70.0, 8.29, 0.034),
    (80.0, 9.31, 0.120),
    (90.0, 10.03, 0.103),
    (100.0, 11.05, 0.237),
)


@dataclass(frozen=True)
class LaserParams:
    """Crater model parameters.

    amplitude: depth per unit surplus energy (mm/J)
    sigma: beam spread (mm)
    sharpness: super-Gaussian exponent, >= 1
    threshold: minimum energy that removes material (J)
    """

    amplitude: float
    sigma: float
    sharpness: float
    threshold: float

    def __post_init__(self):
        vals = (self.amplitude, self.sigma, self.sharpness, self.threshold)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("laser parameters must be finite")
        if self.amplitude <= 0 or self.sigma <= 0:
            raise ValueError("amplitude and sigma must be positive")
        if self.sharpness < 1:
            raise ValueError("sharpness must be >= 1")
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")

    def cutting_radius(self, energy: float) -> float:
        """Radius beyond which this energy removes nothing."""
        if energy <= self.threshold:
            return 0.0
        if self.threshold == 0.0:
            return math.inf
        q = math.log(energy / self.threshold) ** (1.0 / self.sharpness)
        return self.sigma * math.sqrt(2.0 * q)


#: Mean fitted crater parameters used for planning throughout.
DEFAULT_LASER_PARAMS = LaserParams(amplitude=0.334, sigma=0.473, sharpness=12.73, threshold=1.939)


@dataclass(frozen=True)
class EnergyTable:
    """Duty-cycle to delivered-energy mapping, linear between measured knots."""

    entries: tuple[tuple[float, float, float], ...] = MEASURED_ENERGY_ROWS

    def __post_init__(self):
        duties = [e[0] for e in self.entries]
        means = [e[1] for e in self.entries]
        if len(self.entries) < 2:
            raise ValueError("energy table needs at least two knots")
        if any(b <= a for a, b in zip(duties, duties[1:])):
            raise ValueError("duty cycles must be strictly increasing")
        if duties[0] < 0 or duties[-1] > 100:
            raise ValueError("duty cycles must lie in [0, 100]")
        if any(m < 0 for m in means) or any(b < a for a, b in zip(means, means[1:])):
            raise ValueError("energies must be nonnegative and nondecreasing")

    @property
    def duty_min(self) -> float:
        return self.entries[0][0]

    @property
    def duty_max(self) -> float:
        return self.entries[-1][0]


DEFAULT_ENERGY_TABLE = EnergyTable()


def energy_for_duty(table: EnergyTable, duty: float) -> float:
    """Delivered energy (J) for a duty cycle, exact at the measured knots."""
    if not (table.duty_min <= duty <= table.duty_max):
        raise OutOfRange(
            f"duty {duty}% outside table range [{table.duty_min}, {table.duty_max}]"
        )
    duties = np.array([e[0] for e in table.entries])
    means = np.array([e[1] for e in table.entries])
    return float(np.interp(duty, duties, means))


@dataclass(frozen=True)
class CutInput:
    """One ablation action: incident point, incident angles, duty cycle."""

    mu: tuple[float, float]
    tilt: tuple[float, float] = (0.0, 0.0)
    duty: float = 50.0
    dwell: float = DEFAULT_DWELL_S

    def __post_init__(self):
        object.__setattr__(self, "mu", (float(self.mu[0]), float(self.mu[1])))
        object.__setattr__(self, "tilt", (float(self.tilt[0]), float(self.tilt[1])))

    def validate(self, table: EnergyTable, tilt_limit: float = DEFAULT_TILT_LIMIT_DEG) -> None:
        if abs(self.tilt[0]) > tilt_limit + 1e-12 or abs(self.tilt[1]) > tilt_limit + 1e-12:
            raise OutOfRange(f"tilt {self.tilt} exceeds limit {tilt_limit} deg")
        if not (table.duty_min <= self.duty <= table.duty_max):
            raise OutOfRange(f"duty {self.duty}% outside table range")


def crater_depth(params: LaserParams, energy: float, r) -> np.ndarray | float:
    """Signed crater depth (mm, <= 0) at radial distance r from the beam center."""
    r = np.asarray(r, dtype=np.float64)
    q = (r * r) / (2.0 * params.sigma**2)
    depth = -params.amplitude * np.maximum(
        0.0, energy * np.exp(-(q**params.sharpness)) - params.threshold
    )
    return float(depth) if depth.ndim == 0 else depth


def beam_direction(tilt_deg: tuple[float, float]) -> np.ndarray:
    """Unit vector of the beam axis for incident angles (deg), pointing into the tissue."""
    tx, ty = math.radians(tilt_deg[0]), math.radians(tilt_deg[1])
    d = np.array([math.tan(tx), math.tan(ty), -1.0])
    return d / np.linalg.norm(d)


def carve_crater_bounds(
    surface: HeightField,
    mu: tuple[float, float],
    tilt: tuple[float, float],
    energy: float,
    params: LaserParams,
    tilt_model: str = "oblique",
    out_z: np.ndarray | None = None,
) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Subtract one crater from a surface's height array.

    Returns the modified (writable) z array plus the touched index window
    (i0, i1, j0, j1); pass ``out_z`` to carve into an existing copy. With
    ``tilt_model="oblique"`` radii are measured in the plane orthogonal to
    the beam axis (elliptical footprint on the surface) and delivered energy
    is scaled by the incidence cosine; ``"vertical"`` ignores tilt entirely.
    """
    if tilt_model not in ("oblique", "vertical"):
        raise ValueError(f"unknown tilt model {tilt_model!r}")
    z = surface.writable_z() if out_z is None else out_z
    if tilt_model == "oblique" and (tilt[0] != 0.0 or tilt[1] != 0.0):
        d = beam_direction(tilt)
        bhx, bhy = d[0], d[1]
        cos_inc = abs(d[2])
    else:
        bhx = bhy = 0.0
        cos_inc = 1.0
    e_scaled = energy * cos_inc
    reach = params.cutting_radius(e_scaled)
    if reach == 0.0:
        return z, (0, 0, 0, 0)
    extent = surface.nx * surface.spacing[0] + surface.ny * surface.spacing[1]
    reach = min(reach, extent) / cos_inc + max(surface.spacing)  # in-plane reach of the footprint
    x0, y0 = surface.origin
    dx, dy = surface.spacing
    i0 = max(0, int(math.floor((mu[0] - reach - x0) / dx)))
    i1 = min(surface.nx, int(math.ceil((mu[0] + reach - x0) / dx)) + 1)
    j0 = max(0, int(math.floor((mu[1] - reach - y0) / dy)))
    j1 = min(surface.ny, int(math.ceil((mu[1] + reach - y0) / dy)) + 1)
    if i0 >= i1 or j0 >= j1:
        return z, (0, 0, 0, 0)
    kernels.crater_patch(
        z[i0:i1, j0:j1],
        surface.valid[i0:i1, j0:j1],
        x0 + i0 * dx,
        y0 + j0 * dy,
        dx,
        dy,
        mu[0],
        mu[1],
        bhx,
        bhy,
        e_scaled,
        params.amplitude,
        1.0 / (2.0 * params.sigma**2),
        params.sharpness,
        params.threshold,
    )
    return z, (i0, i1, j0, j1)


def carve_crater(
    surface: HeightField,
    mu: tuple[float, float],
    tilt: tuple[float, float],
    energy: float,
    params: LaserParams,
    tilt_model: str = "oblique",
    out_z: np.ndarray | None = None,
) -> np.ndarray:
    z, _ = carve_crater_bounds(surface, mu, tilt, energy, params, tilt_model, out_z)
    return z


def apply_cut(
    surface: HeightField,
    cut: CutInput,
    params: LaserParams,
    table: EnergyTable,
    tilt_model: str = "oblique",
    tilt_limit: float = DEFAULT_TILT_LIMIT_DEG,
) -> HeightField:
    """Predicted surface after one cut. Heights never increase."""
    if not surface.contains(*cut.mu):
        raise OutsideWorkspace(f"cut at {cut.mu} is outside the valid surface region")
    cut.validate(table, tilt_limit)
    energy = energy_for_duty(table, cut.duty)
    z = carve_crater(surface, cut.mu, cut.tilt, energy, params, tilt_model)
    return surface.with_z(z)
