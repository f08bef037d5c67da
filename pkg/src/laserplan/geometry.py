"""Geometric primitives: heightfields, point clouds, rigid transforms, interpolation.

All lengths are millimeters. Heightfields are axis-aligned regular grids of
surface heights z(x, y) with +z pointing away from the tissue, so heights
decrease as material is removed. Grid node (i, j) sits at
``origin + (i * spacing_x, j * spacing_y)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CloughTocher2DInterpolator
from scipy.spatial import QhullError

from .errors import DegenerateInput, EmptyOverlap, GridMismatch

DEFAULT_SPACING_MM = 0.05


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridSpec:
    """Descriptor of a regular grid: where it sits and how fine it is."""

    origin: tuple[float, float]
    spacing: tuple[float, float]
    nx: int
    ny: int

    def __post_init__(self):
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError("grid spacing must be strictly positive")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 nodes per axis")

    @classmethod
    def from_extent(cls, origin, size_mm, spacing=(DEFAULT_SPACING_MM, DEFAULT_SPACING_MM)):
        nx = int(round(size_mm[0] / spacing[0])) + 1
        ny = int(round(size_mm[1] / spacing[1])) + 1
        return cls((float(origin[0]), float(origin[1])), (float(spacing[0]), float(spacing[1])), nx, ny)

    def x_coords(self) -> np.ndarray:
        return self.origin[0] + self.spacing[0] * np.arange(self.nx)

    def y_coords(self) -> np.ndarray:
        return self.origin[1] + self.spacing[1] * np.arange(self.ny)

    @property
    def cell_area(self) -> float:
        return self.spacing[0] * self.spacing[1]

    def filled(self, value: float = 0.0) -> "HeightField":
        z = np.full((self.nx, self.ny), float(value))
        return HeightField(self.origin, self.spacing, z)


@dataclass(frozen=True)
class HeightField:
    """Regular-grid surface z(x, y) with a per-cell validity mask.

    Immutable after construction; derive modified surfaces with
    :meth:`with_z`. Invalid cells carry NaN heights.
    """

    origin: tuple[float, float]
    spacing: tuple[float, float]
    z: np.ndarray
    valid: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 2:
            raise ValueError("heightfield needs a 2D grid of at least 2x2 nodes")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError("spacing must be strictly positive")
        valid = self.valid
        if valid is None:
            valid = np.isfinite(z)
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != z.shape:
            raise ValueError("valid mask shape must match z")
        if not np.all(np.isfinite(z[valid])):
            raise ValueError("heights must be finite where valid")
        z = z.copy()
        z[~valid] = np.nan
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))
        object.__setattr__(self, "z", _readonly(z))
        object.__setattr__(self, "valid", _readonly(valid))

    @property
    def nx(self) -> int:
        return self.z.shape[0]

    @property
    def ny(self) -> int:
        return self.z.shape[1]

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.origin, self.spacing, self.nx, self.ny)

    @property
    def cell_area(self) -> float:
        return self.spacing[0] * self.spacing[1]

    def x_coords(self) -> np.ndarray:
        return self.origin[0] + self.spacing[0] * np.arange(self.nx)

    def y_coords(self) -> np.ndarray:
        return self.origin[1] + self.spacing[1] * np.arange(self.ny)

    def with_z(self, z: np.ndarray, valid: np.ndarray | None = None) -> "HeightField":
        return HeightField(self.origin, self.spacing, z, self.valid if valid is None else valid)

    def same_grid(self, other: "HeightField") -> bool:
        return (
            self.z.shape == other.z.shape
            and np.allclose(self.origin, other.origin, atol=1e-12)
            and np.allclose(self.spacing, other.spacing, atol=1e-12)
        )

    def index_of(self, x: float, y: float) -> tuple[int, int]:
        """Nearest grid node to metric point (x, y)."""
        i = int(round((x - self.origin[0]) / self.spacing[0]))
        j = int(round((y - self.origin[1]) / self.spacing[1]))
        return i, j

    def contains(self, x: float, y: float) -> bool:
        i, j = self.index_of(x, y)
        return 0 <= i < self.nx and 0 <= j < self.ny and bool(self.valid[i, j])

    def writable_z(self) -> np.ndarray:
        return self.z.copy()

    # --- serialization: plain text, NaN marks invalid cells ---

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write("heightfield v1\n")
        buf.write(f"origin {self.origin[0]!r} {self.origin[1]!r}\n")
        buf.write(f"spacing {self.spacing[0]!r} {self.spacing[1]!r}\n")
        buf.write(f"shape {self.nx} {self.ny}\n")
        for i in range(self.nx):
            buf.write(" ".join(repr(v) for v in self.z[i]))
            buf.write("\n")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "HeightField":
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != "heightfield v1":
            raise ValueError("not a heightfield file")
        header = {}
        for line in lines[1:4]:
            key, *vals = line.split()
            header[key] = vals
        origin = (float(header["origin"][0]), float(header["origin"][1]))
        spacing = (float(header["spacing"][0]), float(header["spacing"][1]))
        nx, ny = int(header["shape"][0]), int(header["shape"][1])
        z = np.array([[float(v) for v in line.split()] for line in lines[4 : 4 + nx]])
        if z.shape != (nx, ny):
            raise ValueError("heightfield data does not match declared shape")
        return cls(origin, spacing, z)

    @classmethod
    def load(cls, path: str | Path) -> "HeightField":
        return cls.loads(Path(path).read_text())


def require_same_grid(a: HeightField, b: HeightField) -> None:
    if not a.same_grid(b):
        raise GridMismatch("heightfields differ in origin, spacing or shape")


@dataclass(frozen=True)
class PointCloud3:
    """Unordered 3D points, optionally labeled per point."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be an (N, 3) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (pts.shape[0],):
                raise ValueError("labels must cover every point")
            labels = _readonly(labels)
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.points.shape[0]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if self.labels is None:
                writer.writerow(["x", "y", "z"])
                for p in self.points:
                    writer.writerow([repr(p[0]), repr(p[1]), repr(p[2])])
            else:
                writer.writerow(["x", "y", "z", "label"])
                for p, lab in zip(self.points, self.labels):
                    writer.writerow([repr(p[0]), repr(p[1]), repr(p[2]), int(lab)])

    @classmethod
    def load_csv(cls, path: str | Path) -> "PointCloud3":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError("empty point cloud file")
        header = [h.strip().lower() for h in rows[0]]
        has_label = "label" in header
        pts, labels = [], []
        for row in rows[1:]:
            if not row:
                continue
            pts.append([float(row[0]), float(row[1]), float(row[2])])
            if has_label:
                labels.append(int(row[3]))
        return cls(np.array(pts), np.array(labels) if has_label else None)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1 within 1e-9")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a ∘ b: apply b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def fit_plane(points: PointCloud3) -> tuple[np.ndarray, float]:
    """Total-least-squares plane fit.

    Returns (normal, offset) with ``normal . p = offset`` for points p on
    the plane. The normal is oriented with a positive z component whenever
    the plane is not vertical.
    """
    pts = points.points
    if len(pts) < 3:
        raise DegenerateInput("plane fit needs at least 3 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 0 or s[1] / s[0] < 1e-12:
        raise DegenerateInput("points are collinear; plane is not defined")
    normal = vt[2]
    if abs(normal[2]) > 1e-12:
        if normal[2] < 0:
            normal = -normal
    elif normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    return normal, float(normal @ centroid)


def interpolate_scattered(points: PointCloud3, target: GridSpec) -> HeightField:
    """Interpolate scattered (x, y, z) samples onto a regular grid.

    Uses the C1 piecewise-cubic Clough-Tocher scheme over a Delaunay
    triangulation of the (x, y) projections. Grid nodes outside the convex
    hull of the samples are marked invalid, never extrapolated.
    """
    pts = points.points
    if len(pts) < 3:
        raise DegenerateInput("interpolation needs at least 3 points")
    xy = pts[:, :2]
    spread = xy - xy.mean(axis=0)
    s = np.linalg.svd(spread, compute_uv=False)
    if s[0] <= 0 or s[1] / s[0] < 1e-12:
        raise DegenerateInput("all points are collinear in (x, y)")
    try:
        interp = CloughTocher2DInterpolator(xy, pts[:, 2], tol=1e-14, maxiter=2000)
    except QhullError as exc:
        raise DegenerateInput(f"triangulation failed: {exc}") from exc
    gx, gy = np.meshgrid(target.x_coords(), target.y_coords(), indexing="ij")
    z = interp(np.column_stack([gx.ravel(), gy.ravel()])).reshape(target.nx, target.ny)
    valid = np.isfinite(z)
    if not valid.any():
        raise EmptyOverlap("sample hull does not overlap the target grid")
    return HeightField(target.origin, target.spacing, z, valid)
