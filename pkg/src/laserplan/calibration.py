"""Calibration solvers: hand-eye (AX = XB), marker frames, laser-axis fit.

The hand-eye solver recovers the fixed sensor-to-effector transform X from
paired relative motions A (robot) and B (sensor) satisfying A X = X B,
using the classic two-step rotation-then-translation decoupling. The laser
axis is a total-least-squares 3D line through crater centers ablated at
different heights; the focal point is the point on that line at the known
focal distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, InsufficientMotion
from .geometry import RigidTransform, compose


@dataclass(frozen=True)
class PosePair:
    """One relative-motion pair: A (robot) and B (sensor) with A X = X B."""

    A: RigidTransform
    B: RigidTransform


@dataclass(frozen=True)
class LaserAxis:
    direction: np.ndarray  # unit vector in the sensor frame
    focal_point: np.ndarray
    focal_distance: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("direction must be a unit vector")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "focal_point", np.asarray(self.focal_point, float).reshape(3))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _rotation_to_pvec(r: np.ndarray) -> np.ndarray:
    """Modified Rodrigues vector 2*sin(theta/2)*axis of a rotation matrix."""
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-12:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    axis = axis / (2.0 * np.sin(theta))
    return 2.0 * np.sin(theta / 2.0) * axis


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def pose_pairs_from_absolute(
    robot_poses: list[RigidTransform], sensor_poses: list[RigidTransform]
) -> list[PosePair]:
    """Build consecutive relative-motion pairs from absolute pose streams.

    robot_poses[i] maps effector to world; sensor_poses[i] maps the
    stationary marker into the sensor frame at pose i.
    """
    if len(robot_poses) != len(sensor_poses):
        raise ValueError("pose streams must have equal length")
    pairs = []
    for i in range(len(robot_poses) - 1):
        a = compose(robot_poses[i + 1].inverse(), robot_poses[i])
        b = compose(sensor_poses[i + 1], sensor_poses[i].inverse())
        pairs.append(PosePair(a, b))
    return pairs


def solve_hand_eye(pairs: list[PosePair]) -> RigidTransform:
    """Recover X with A_i X = X B_i (two-step rotation/translation solve)."""
    if len(pairs) < 2:
        raise InsufficientMotion("need at least 2 relative-motion pairs")
    p_as, p_bs = [], []
    for pair in pairs:
        pa = _rotation_to_pvec(pair.A.rotation)
        pb = _rotation_to_pvec(pair.B.rotation)
        if np.linalg.norm(pa) > 1e-10:
            p_as.append(pa)
            p_bs.append(pb)
    if len(p_as) < 2:
        raise InsufficientMotion("pose pairs contain almost no rotation")
    axes = np.array([p / np.linalg.norm(p) for p in p_as])
    s = np.linalg.svd(axes, compute_uv=False)
    if s[1] / s[0] < 1e-6:
        raise InsufficientMotion("rotation axes span fewer than 2 dimensions")

    lhs = np.vstack([_skew(pa + pb) for pa, pb in zip(p_as, p_bs)])
    rhs = np.concatenate([pb - pa for pa, pb in zip(p_as, p_bs)])
    p_prime, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    p = 2.0 * p_prime / np.sqrt(1.0 + p_prime @ p_prime)
    n2 = p @ p
    rot = (
        (1.0 - n2 / 2.0) * np.eye(3)
        + 0.5 * (np.outer(p, p) + np.sqrt(max(4.0 - n2, 0.0)) * _skew(p))
    )
    rot = _orthonormalize(rot)

    lhs_t = np.vstack([pair.A.rotation - np.eye(3) for pair in pairs])
    rhs_t = np.concatenate([rot @ pair.B.translation - pair.A.translation for pair in pairs])
    t, *_ = np.linalg.lstsq(lhs_t, rhs_t, rcond=None)
    return RigidTransform(rot, t)


def hand_eye_residuals(x: RigidTransform, pairs: list[PosePair]) -> np.ndarray:
    """Per-pair translation residual ||(A X - X B) translation|| in mm."""
    out = []
    for pair in pairs:
        left = compose(pair.A, x)
        right = compose(x, pair.B)
        out.append(np.linalg.norm(left.translation - right.translation))
    return np.array(out)


def marker_frame_from_dots(
    dot1: np.ndarray, dot2: np.ndarray, plane_normal: np.ndarray
) -> RigidTransform:
    """Frame of a two-dot marker board as seen by the sensor.

    Origin at dot1, +X toward dot2 (projected into the marker plane),
    +Z along the plane normal, +Y completing the right-handed frame.
    """
    dot1 = np.asarray(dot1, float).reshape(3)
    dot2 = np.asarray(dot2, float).reshape(3)
    n = np.asarray(plane_normal, float).reshape(3)
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        raise DegenerateInput("plane normal is zero")
    z = n / nn
    v = dot2 - dot1
    v = v - (v @ z) * z
    vn = np.linalg.norm(v)
    if vn < 1e-12:
        raise DegenerateInput("dots coincide or lie along the plane normal")
    x = v / vn
    y = np.cross(z, x)
    rot = np.column_stack([x, y, z])
    return RigidTransform(rot, dot1)


def fit_laser_axis(
    crater_centers: list[tuple[float, float]] | np.ndarray,
    heights: list[float] | np.ndarray,
    focal_distance: float,
) -> LaserAxis:
    """Total-least-squares 3D line through crater centers at known heights.

    The fitted direction is oriented with a positive z component; the focal
    point is where the line crosses z = focal_distance.
    """
    centers = np.asarray(crater_centers, dtype=np.float64).reshape(-1, 2)
    zs = np.asarray(heights, dtype=np.float64).reshape(-1)
    if centers.shape[0] != zs.shape[0]:
        raise ValueError("need one height per crater center")
    if centers.shape[0] < 2:
        raise DegenerateInput("need at least 2 ablation heights")
    if np.ptp(zs) < 1e-12:
        raise DegenerateInput("all ablation heights are equal")
    pts = np.column_stack([centers, zs])
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    direction = vt[0]
    if abs(direction[2]) < 1e-12:
        raise DegenerateInput("fitted axis is horizontal; focal point undefined")
    if direction[2] < 0:
        direction = -direction
    t = (focal_distance - centroid[2]) / direction[2]
    focal_point = centroid + t * direction
    return LaserAxis(direction=direction, focal_point=focal_point, focal_distance=float(focal_distance))


def axis_fit_residuals(axis: LaserAxis, crater_centers, heights) -> np.ndarray:
    """Perpendicular distance of each crater center from the fitted axis."""
    centers = np.asarray(crater_centers, dtype=np.float64).reshape(-1, 2)
    zs = np.asarray(heights, dtype=np.float64).reshape(-1)
    pts = np.column_stack([centers, zs])
    rel = pts - axis.focal_point
    along = rel @ axis.direction
    perp = rel - np.outer(along, axis.direction)
    return np.linalg.norm(perp, axis=1)


def reprojection_errors(
    x: RigidTransform,
    pose_observations: list[tuple[RigidTransform, RigidTransform]],
    reference_points: np.ndarray,
) -> np.ndarray:
    """Scatter of stationary reference points mapped through the calibration chain.

    Each observation is (robot pose, sensor-observed marker pose). Every
    reference point (given in the marker frame) maps to the world through
    robot_pose o X o marker_pose; with perfect calibration all poses agree.
    Errors are distances from each mapped point to the per-point consensus
    (mean) position, flattened over points then poses.
    """
    refs = np.asarray(reference_points, dtype=np.float64).reshape(-1, 3)
    mapped = []
    for robot_pose, marker_pose in pose_observations:
        chain = compose(robot_pose, compose(x, marker_pose))
        mapped.append(chain.apply(refs))
    stacked = np.stack(mapped)  # (n_obs, n_refs, 3)
    consensus = stacked.mean(axis=0, keepdims=True)
    return np.linalg.norm(stacked - consensus, axis=2).ravel()
