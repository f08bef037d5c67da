"""Crater parameter regression and the resection evaluation metrics.

fit_crater recovers the super-Gaussian model parameters from a scanned
crater point cloud by Levenberg-Marquardt, restricting the residuals to a
disc of radius 2*sigma around the running center estimate so rim noise does
not drag the fit. compute_metrics scores an achieved surface against a
target: RMSE/MAE of the per-cell height error, percent overcut/undercut
normalized by the objective depth, and intersection-over-union of the
removed-material volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, GridMismatch, InvalidTarget, NoConvergence
from .geometry import HeightField, PointCloud3, require_same_grid
from .lti import DEFAULT_LASER_PARAMS, LaserParams

MAX_LM_STEPS = 200
MAX_INLIER_ROUNDS = 10


@dataclass(frozen=True)
class FitResult:
    params: LaserParams
    mu: tuple[float, float]
    rmse: float
    iterations: int
    converged: bool
    residuals: np.ndarray | None = None


@dataclass(frozen=True)
class MetricReport:
    """Resection quality metrics. Overcut/undercut are percentages, iou a fraction."""

    rmse: float
    mae: float
    pct_overcut: float
    pct_undercut: float
    iou: float

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "pct_overcut": self.pct_overcut,
            "pct_undercut": self.pct_undercut,
            "iou": self.iou,
        }


def _levenberg_marquardt(residual_fn, jacobian_fn, x0, max_steps=MAX_LM_STEPS,
                         ftol=1e-14, gtol=1e-14, xtol=1e-14):
    """Minimize 0.5*||r(x)||^2 with adaptive damping.

    Returns (x, n_steps, converged). The accepted-step objective sequence is
    asserted monotone nonincreasing.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    r = residual_fn(x)
    cost = 0.5 * float(r @ r)
    lam = 1e-3
    steps = 0
    converged = False
    for steps in range(1, max_steps + 1):
        jac = jacobian_fn(x)
        g = jac.T @ r
        if np.max(np.abs(g)) < gtol:
            converged = True
            break
        jtj = jac.T @ jac
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1e-12
        accepted = False
        for _ in range(50):
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            r_new = residual_fn(x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                assert cost_new <= cost + 1e-15, "accepted step increased the objective"
                accepted = True
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not accepted:
            converged = True  # damping exhausted: local minimum within precision
            break
        rel_drop = (cost - cost_new) / max(cost, 1e-300)
        dx = np.max(np.abs(step) / np.maximum(np.abs(x), 1.0))
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam * 0.3, 1e-12)
        if rel_drop < ftol or dx < xtol:
            converged = True
            break
    return x, steps, converged


def _sg_surface_and_grads(xy, mu, amplitude, sigma, sharpness, threshold, energy):
    """Model heights and parameter gradients at sample locations.

    Returns (f, grads) with grads keyed by parameter name. f is the modeled
    height (0 on the rim, negative inside the crater).
    """
    dxy = xy - mu
    r2 = np.sum(dxy * dxy, axis=1)
    q = r2 / (2.0 * sigma**2)
    qp = q**sharpness
    g = np.exp(-qp)
    surplus = energy * g - threshold
    cut = surplus > 0.0
    f = np.where(cut, -amplitude * surplus, 0.0)

    grads = {}
    ag = np.where(cut, -amplitude * energy * g, 0.0)  # d f / d(E*g term) chain base
    grads["amplitude"] = np.where(cut, -surplus, 0.0)
    grads["sigma"] = ag * (2.0 * sharpness * qp / sigma)
    with np.errstate(divide="ignore", invalid="ignore"):
        lnq = np.where(q > 0.0, np.log(q), 0.0)
    grads["sharpness"] = ag * np.where(q > 0.0, -qp * lnq, 0.0)
    grads["threshold"] = np.where(cut, amplitude, 0.0)
    qpm1 = np.where(q > 0.0, q ** (sharpness - 1.0), 1.0 if sharpness == 1.0 else 0.0)
    common = ag * (sharpness * qpm1 / sigma**2)
    grads["mux"] = common * dxy[:, 0]
    grads["muy"] = common * dxy[:, 1]
    return f, grads


def _initial_guess(xy, z, energy, threshold):
    rim = float(np.percentile(z, 90))
    depth = np.maximum(rim - z, 0.0)
    wsum = depth.sum()
    if wsum <= 0:
        mu = xy.mean(axis=0)
        max_depth = 0.0
    else:
        mu = (xy * depth[:, None]).sum(axis=0) / wsum
        max_depth = float(np.percentile(depth, 99))
    surplus = max(energy - threshold, 1e-6)
    amplitude = max(max_depth / surplus, 1e-3)
    r = np.linalg.norm(xy - mu, axis=1)
    half = depth >= 0.5 * max_depth if max_depth > 0 else np.zeros(len(z), bool)
    sigma = float(np.percentile(r[half], 90)) if half.any() else float(np.median(r))
    sigma = max(sigma, 0.05)
    return mu, amplitude, sigma


def fit_crater(
    cloud: PointCloud3,
    energy: float,
    mode: str = "super_gaussian",
    fix_sharpness: float | None = None,
    threshold: float = DEFAULT_LASER_PARAMS.threshold,
    fit_threshold: bool = False,
    max_steps: int = MAX_LM_STEPS,
) -> FitResult:
    """Fit crater model parameters to a scanned crater cloud.

    The cloud holds (x, y, z) points with the undisturbed surface at z = 0
    and the crater below. ``mode="gaussian"`` pins sharpness to 1;
    ``fix_sharpness`` pins it to any given value. The offset energy
    ``threshold`` stays fixed unless ``fit_threshold`` is set (joint
    amplitude/threshold estimation is poorly conditioned at a single energy
    level, so fixing it is the default).
    """
    if mode not in ("super_gaussian", "gaussian"):
        raise ValueError(f"unknown fit mode {mode!r}")
    if energy <= 0:
        raise ValueError("energy must be positive")
    pts = cloud.points
    if len(pts) < 50:
        raise DegenerateInput("crater fit needs at least 50 points")
    xy = pts[:, :2]
    z = pts[:, 2]

    top = z[z >= np.median(z)]
    noise = 1.4826 * float(np.median(np.abs(top - np.median(top))))
    depth_range = float(np.percentile(z, 99.5) - np.percentile(z, 0.5))
    if depth_range < 3.0 * max(noise, 1e-12):
        raise DegenerateInput("no crater: depth range below 3x estimated noise")

    mu0, a0, s0 = _initial_guess(xy, z, energy, threshold)
    if mode == "gaussian":
        fix_sharpness = 1.0
    p0 = 2.0 if fix_sharpness is None else float(fix_sharpness)

    names = ["amplitude", "sigma", "mux", "muy"]
    if fix_sharpness is None:
        names.append("sharpness")
    if fit_threshold:
        names.append("threshold")
    full0 = {
        "amplitude": a0, "sigma": s0, "mux": mu0[0], "muy": mu0[1],
        "sharpness": p0, "threshold": threshold,
    }

    state = dict(full0)

    def unpack(x):
        vals = dict(state)
        for name, v in zip(names, x):
            vals[name] = v
        return vals

    inliers = np.ones(len(z), dtype=bool)

    def residual_fn(x):
        v = unpack(x)
        if v["sigma"] <= 1e-4 or v["amplitude"] <= 1e-6 or v["sharpness"] < 0.2:
            return np.full(int(inliers.sum()), 1e6)
        f, _ = _sg_surface_and_grads(
            xy[inliers], np.array([v["mux"], v["muy"]]),
            v["amplitude"], v["sigma"], v["sharpness"], v["threshold"], energy,
        )
        return z[inliers] - f

    def jacobian_fn(x):
        v = unpack(x)
        _, grads = _sg_surface_and_grads(
            xy[inliers], np.array([v["mux"], v["muy"]]),
            v["amplitude"], v["sigma"], v["sharpness"], v["threshold"], energy,
        )
        return np.column_stack([-grads[name] for name in names])

    x = np.array([full0[n] for n in names])
    total_steps = 0
    converged = False
    for _ in range(MAX_INLIER_ROUNDS):
        x, steps, converged = _levenberg_marquardt(residual_fn, jacobian_fn, x, max_steps)
        total_steps += steps
        v = unpack(x)
        state.update(v)
        r = np.linalg.norm(xy - np.array([v["mux"], v["muy"]]), axis=1)
        new_inliers = r <= 2.0 * abs(v["sigma"])
        if new_inliers.sum() < max(10, len(names) + 2):
            new_inliers = inliers  # refuse to shrink below a usable sample
        if np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers
    if not converged:
        raise NoConvergence(f"LM did not converge within {max_steps} steps")

    v = unpack(x)
    res = residual_fn(x)
    rmse = float(np.sqrt(np.mean(res**2))) if len(res) else 0.0
    params = LaserParams(
        amplitude=float(abs(v["amplitude"])),
        sigma=float(abs(v["sigma"])),
        sharpness=float(max(v["sharpness"], 1.0)),
        threshold=float(max(v["threshold"], 0.0)),
    )
    return FitResult(
        params=params,
        mu=(float(v["mux"]), float(v["muy"])),
        rmse=rmse,
        iterations=total_steps,
        converged=converged,
        residuals=res,
    )


def synthetic_crater_cloud(
    params: LaserParams,
    energy: float,
    n_points: int = 4000,
    mu: tuple[float, float] = (0.0, 0.0),
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    box_halfwidth: float | None = None,
) -> PointCloud3:
    """Sample a synthetic crater scan: surface at z = 0, crater carved in."""
    rng = np.random.default_rng(0) if rng is None else rng
    if box_halfwidth is None:
        box_halfwidth = 3.0 * params.sigma
    xy = rng.uniform(-box_halfwidth, box_halfwidth, size=(n_points, 2)) + np.asarray(mu)
    f, _ = _sg_surface_and_grads(
        xy, np.asarray(mu, dtype=float),
        params.amplitude, params.sigma, params.sharpness, params.threshold, energy,
    )
    z = f
    if noise_sigma > 0:
        z = z + rng.normal(0.0, noise_sigma, size=n_points)
    return PointCloud3(np.column_stack([xy, z]))


def compute_metrics(
    achieved: HeightField, target: HeightField, initial: HeightField
) -> MetricReport:
    """Score an achieved resection against the target.

    Per cell, the error e = achieved - target is positive where material
    remains above the target (undercut) and negative where too much was
    removed (overcut). RMSE and MAE run over the evaluation region: cells
    where either the target or the achieved surface departs from the
    initial surface. Overcut/undercut percentages normalize the one-sided
    error sums by the total objective depth, and IoU compares the removed
    depth columns min/max cellwise.
    """
    require_same_grid(achieved, target)
    require_same_grid(achieved, initial)
    valid = achieved.valid & target.valid & initial.valid
    if np.any(target.z[valid] > initial.z[valid] + 1e-9):
        raise InvalidTarget("target surface lies above the initial surface")

    tol = 1e-12
    d_target = np.where(valid, np.maximum(initial.z - target.z, 0.0), 0.0)
    d_achieved = np.where(valid, np.maximum(initial.z - achieved.z, 0.0), 0.0)
    region = valid & ((d_target > tol) | (d_achieved > tol))
    if not region.any():
        return MetricReport(rmse=0.0, mae=0.0, pct_overcut=0.0, pct_undercut=0.0, iou=1.0)

    e = achieved.z[region] - target.z[region]
    rmse = float(np.sqrt(np.mean(e**2)))
    mae = float(np.mean(np.abs(e)))

    e0_sum = float(np.sum(d_target[region]))
    uc_sum = float(np.sum(np.maximum(e, 0.0)))
    oc_sum = float(np.sum(np.maximum(-e, 0.0)))
    if e0_sum > 0:
        pct_uc = 100.0 * uc_sum / e0_sum
        pct_oc = 100.0 * oc_sum / e0_sum
    else:
        pct_uc = 0.0 if uc_sum == 0 else math.inf
        pct_oc = 0.0 if oc_sum == 0 else math.inf

    inter = float(np.sum(np.minimum(d_achieved[region], d_target[region])))
    union = float(np.sum(np.maximum(d_achieved[region], d_target[region])))
    iou = inter / union if union > 0 else 1.0
    return MetricReport(rmse=rmse, mae=mae, pct_overcut=pct_oc, pct_undercut=pct_uc, iou=iou)
