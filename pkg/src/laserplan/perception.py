"""Point-based perception: density clustering, blob centroids, constraint surfaces."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateInput, NoBlobs
from .geometry import GridSpec, HeightField, PointCloud3, interpolate_scattered
from .planner import ConstraintField

DEFAULT_EPS_MM = 0.1
DEFAULT_MIN_POINTS = 10


@dataclass(frozen=True)
class ClusterResult:
    """Per-point cluster labels; -1 marks noise."""

    labels: np.ndarray
    cluster_count: int

    def points_of(self, cloud: PointCloud3, label: int) -> np.ndarray:
        return cloud.points[self.labels == label]


def dbscan(points: PointCloud3, eps: float, min_points: int = DEFAULT_MIN_POINTS) -> ClusterResult:
    """Density-based clustering with deterministic scan-order labeling.

    A point is a core point when its eps-ball (itself included) holds at
    least ``min_points`` points. Clusters grow from core points in input
    order; border points join the first cluster that reaches them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    pts = points.points
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return ClusterResult(labels, 0)
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, r=eps)
    core = np.array([len(nb) >= min_points for nb in neighborhoods])
    cluster = 0
    for start in range(n):
        if labels[start] != -1 or not core[start]:
            continue
        labels[start] = cluster
        queue = deque(neighborhoods[start])
        while queue:
            q = queue.popleft()
            if labels[q] != -1:
                continue
            labels[q] = cluster
            if core[q]:
                queue.extend(neighborhoods[q])
        cluster += 1
    return ClusterResult(labels, cluster)


def extract_blob_centroids(image: HeightField, threshold: float) -> np.ndarray:
    """Centroids of bright blobs in an intensity grid, in metric coordinates.

    Pipeline: binary threshold (strictly above), one 3x3 morphological
    opening, 8-connected component labeling, intensity-weighted centroid
    per component. Returns an (n, 2) array of (x, y) positions.
    """
    vals = np.where(image.valid, image.z, -np.inf)
    mask = vals > threshold
    mask = ndimage.binary_opening(mask, structure=np.ones((3, 3), bool))
    labeled, count = ndimage.label(mask, structure=np.ones((3, 3), int))
    if count == 0:
        raise NoBlobs("nothing survives thresholding and opening")
    centroids = []
    xs, ys = image.x_coords(), image.y_coords()
    for blob in range(1, count + 1):
        sel = labeled == blob
        w = vals[sel]
        ii, jj = np.nonzero(sel)
        wsum = w.sum()
        centroids.append(((xs[ii] * w).sum() / wsum, (ys[jj] * w).sum() / wsum))
    return np.array(centroids)


def constraint_from_cluster(
    points: PointCloud3,
    cluster_label: int,
    clearance: float,
    grid: GridSpec,
    labels: np.ndarray | None = None,
) -> ConstraintField:
    """Constraint ceiling above a labeled cluster of subsurface points.

    Takes the per-column maximum height of the cluster (most conservative
    top envelope), interpolates it smoothly onto the grid, and raises it by
    the clearance margin. Cells outside the cluster footprint stay inactive.
    """
    labels = points.labels if labels is None else np.asarray(labels)
    if labels is None:
        raise DegenerateInput("point cloud carries no labels")
    pts = points.points[labels == cluster_label]
    if len(pts) < 3:
        raise DegenerateInput("cluster needs at least 3 points")

    cols: dict[tuple[int, int], float] = {}
    for x, y, z in pts:
        i = int(round((x - grid.origin[0]) / grid.spacing[0]))
        j = int(round((y - grid.origin[1]) / grid.spacing[1]))
        key = (i, j)
        if key not in cols or z > cols[key]:
            cols[key] = z
    top = np.array(
        [
            [grid.origin[0] + i * grid.spacing[0], grid.origin[1] + j * grid.spacing[1], z]
            for (i, j), z in sorted(cols.items())
        ]
    )
    ceiling = interpolate_scattered(PointCloud3(top), grid)
    lifted = ceiling.writable_z()
    lifted[ceiling.valid] += clearance
    return ConstraintField(ceiling.with_z(lifted))
