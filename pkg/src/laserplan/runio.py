"""Run configuration, orchestration and report/figure-data export.

Configs are YAML. A scenario file describes the workspace, the target
generator, optional subsurface sphere and the plant (mismatch, scan noise).
A run file references a scenario and adds mode, seed, laser parameters and
planner settings. All randomness flows from the one run seed through three
named substreams (planner, plant, scan) so components re-seed independently.
"""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, ConstraintViolation, MissingData
from .fitting import FitResult, MetricReport, compute_metrics
from .geometry import GridSpec, HeightField
from .lti import DEFAULT_ENERGY_TABLE, CutInput, EnergyTable, LaserParams, apply_cut
from .planner import (
    ConstraintField,
    PlannerConfig,
    check_constraint,
    node_cost,
    plan_feedforward,
    plan_with_feedback,
    residual_volume,
)
from .runlog import CutRecord, ExecutionLog, ScanRecord, surface_hash
from .tissue import (
    MismatchConfig,
    Scenario,
    VirtualTissue,
    make_spline_tumor,
    make_square_well,
    make_subsurface_constraint,
)

OUT_ROOT_ENV = "LASERPLAN_OUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STALL = 3
EXIT_CONSTRAINT = 4
EXIT_IO = 5


@dataclass
class RunConfig:
    scenario: Scenario
    mismatch: MismatchConfig
    scan_noise_sigma: float
    mode: str
    seed: int
    laser: LaserParams
    planner: PlannerConfig
    table: EnergyTable
    output_dir: Path | None
    snapshot: dict


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _load_yaml(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    _require(isinstance(data, dict), f"{path} must hold a mapping")
    return data


def load_scenario_config(path: str | Path) -> tuple[Scenario, MismatchConfig, float, dict]:
    path = Path(path)
    data = _load_yaml(path)
    ws = data.get("workspace", {})
    origin = tuple(ws.get("origin", (0.0, 0.0)))
    spacing = tuple(ws.get("spacing", (0.05, 0.05)))
    size = tuple(ws.get("size_mm", (10.0, 10.0)))
    grid = GridSpec.from_extent(origin, size, spacing)

    gen = data.get("generator")
    _require(isinstance(gen, dict) and "kind" in gen, "scenario needs a generator section")
    seed = int(data.get("seed", 0))
    name = str(data.get("name", gen["kind"]))
    kind = gen["kind"]
    if kind == "square_well":
        scenario = make_square_well(
            size=tuple(gen.get("size", (6.0, 6.0))),
            depth=float(gen.get("depth", 2.0)),
            workspace=grid,
            center=tuple(gen["center"]) if "center" in gen else None,
            name=name,
        )
    elif kind == "spline_tumor":
        scenario = make_spline_tumor(
            mean_radius=float(gen.get("mean_radius", 1.5)),
            jitter=float(gen.get("jitter", 0.2)),
            max_depth=float(gen.get("max_depth", 2.0)),
            seed=seed,
            workspace=grid,
            center=tuple(gen["center"]) if "center" in gen else None,
            name=name,
        )
    else:
        raise ConfigError(f"unknown generator kind {kind!r}")

    sphere = data.get("subsurface_sphere")
    if sphere:
        scenario = make_subsurface_constraint(
            scenario,
            sphere_center=tuple(sphere["center"]),
            sphere_radius=float(sphere["radius"]),
            clearance=float(sphere.get("clearance", 0.2)),
        )

    mm = data.get("mismatch", {}) or {}
    mismatch = MismatchConfig(
        defocus_coeff=float(mm.get("defocus_coeff", 0.0)),
        debris_attenuation=float(mm.get("debris_attenuation", 0.0)),
        reset_every=int(mm.get("reset_every", 3)),
    )
    noise = float(data.get("scan_noise_sigma", 0.0))
    return scenario, mismatch, noise, data


def _laser_from_config(section, base_dir: Path) -> LaserParams:
    if section is None:
        from .lti import DEFAULT_LASER_PARAMS

        return DEFAULT_LASER_PARAMS
    _require(isinstance(section, dict), "laser section must be a mapping")
    if "fit_result" in section:
        fit_path = base_dir / section["fit_result"]
        _require(fit_path.exists(), f"fit result file not found: {fit_path}")
        fit = yaml.safe_load(fit_path.read_text())
        section = fit["params"]
    try:
        return LaserParams(
            amplitude=float(section["amplitude"]),
            sigma=float(section["sigma"]),
            sharpness=float(section["sharpness"]),
            threshold=float(section["threshold"]),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad laser parameters: {exc}") from exc


def _planner_from_config(section) -> PlannerConfig:
    section = section or {}
    _require(isinstance(section, dict), "planner section must be a mapping")
    kwargs = {}
    mapping = {
        "tree_iterations": int,
        "overcut_weight": float,
        "cuts_per_scan": int,
        "tilt_limit": float,
        "clearance": float,
        "termination_fraction": float,
        "selection_temperature": float,
        "tilt_model": str,
        "weight_side": str,
        "stall_trees": int,
    }
    for key, cast in mapping.items():
        if key in section:
            kwargs[key] = cast(section[key])
    if "duty_range" in section:
        lo, hi = section["duty_range"]
        kwargs["duty_range"] = (float(lo), float(hi))
    try:
        return PlannerConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad planner config: {exc}") from exc


def load_run_config(path: str | Path, output_dir: str | Path | None = None) -> RunConfig:
    path = Path(path)
    data = _load_yaml(path)
    base = path.parent

    _require("scenario" in data, "run config needs a scenario path")
    scenario_path = base / str(data["scenario"])
    scenario, mismatch, noise, scenario_raw = load_scenario_config(scenario_path)

    mode = str(data.get("mode", "feedforward"))
    _require(mode in ("feedforward", "feedback"), f"unknown mode {mode!r}")
    seed = int(data.get("seed", 0))

    laser = _laser_from_config(data.get("laser"), base)
    planner_section = dict(data.get("planner") or {})
    planner_section.setdefault("rng_seed", seed)
    planner = _planner_from_config(planner_section)
    planner = PlannerConfig(**{**planner.__dict__, "rng_seed": seed})

    out = output_dir if output_dir is not None else data.get("output_dir")
    out_path = None
    if out is not None:
        out_path = Path(out)
        root = os.environ.get(OUT_ROOT_ENV)
        if root and not out_path.is_absolute():
            out_path = Path(root) / out_path

    snapshot = {"run": data, "scenario": scenario_raw}
    return RunConfig(
        scenario=scenario,
        mismatch=mismatch,
        scan_noise_sigma=noise,
        mode=mode,
        seed=seed,
        laser=laser,
        planner=planner,
        table=DEFAULT_ENERGY_TABLE,
        output_dir=out_path,
        snapshot=snapshot,
    )


def _substreams(seed: int):
    planner_ss, plant_ss, scan_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(planner_ss),
        np.random.default_rng(plant_ss),
        np.random.default_rng(scan_ss),
    )


def build_plant(config: RunConfig) -> VirtualTissue:
    return VirtualTissue(
        truth=config.scenario.initial,
        mismatch=config.mismatch,
        scan_noise_sigma=config.scan_noise_sigma,
        embedded_structures=list(config.scenario.structures),
        tilt_model=config.planner.tilt_model,
    )


def execute_feedforward(
    plant: VirtualTissue,
    cuts: list[CutInput],
    scenario: Scenario,
    params: LaserParams,
    table: EnergyTable,
    planner_cfg: PlannerConfig,
    seed: int,
    scan_rng: np.random.Generator,
) -> ExecutionLog:
    """Blindly execute a precomputed plan on the plant, logging every cut."""
    target = scenario.target
    constraint = scenario.constraint
    initial = scenario.initial
    objective = residual_volume(initial, target)
    log = ExecutionLog(
        mode="feedforward",
        seed=seed,
        objective_volume=objective,
        initial=initial,
        target=target,
    )
    predicted = initial
    for step, cut in enumerate(cuts, start=1):
        t0 = time.perf_counter()
        predicted = apply_cut(
            predicted, cut, params, table, planner_cfg.tilt_model, planner_cfg.tilt_limit
        )
        plant.apply(cut, params, table)
        verdict = check_constraint(plant.truth, constraint)
        if not verdict.ok:
            raise ConstraintViolation(
                f"realized surface violates ceiling at {len(verdict.cells)} cells"
            )
        log.add_cut(
            CutRecord(
                step=step,
                round_index=0,
                mu=cut.mu,
                tilt=cut.tilt,
                duty=cut.duty,
                predicted_cost=node_cost(
                    predicted, target, planner_cfg.overcut_weight, planner_cfg.weight_side
                ),
                predicted_surface_hash=surface_hash(predicted),
                wall_time_s=time.perf_counter() - t0,
            )
        )
    observed = plant.scan(scan_rng)
    final_residual = residual_volume(observed, target)
    log.add_scan(
        ScanRecord(
            round_index=0,
            after_step=len(cuts),
            observed_surface_hash=surface_hash(observed),
            residual_volume=final_residual,
            residual_fraction=final_residual / objective if objective > 0 else 0.0,
            metrics=compute_metrics(observed, target, initial),
        )
    )
    log.terminated = True
    log.final_predicted = predicted
    log.final_truth = plant.truth
    log.final_observed = observed
    log.final_residual_volume = residual_volume(plant.truth, target)
    log.final_metrics = compute_metrics(plant.truth, target, initial)
    return log


def run(config: RunConfig) -> ExecutionLog:
    """Materialize the scenario, execute the configured mode, write artifacts."""
    plant = build_plant(config)
    planner_rng, _plant_rng, scan_rng = _substreams(config.seed)
    scenario = config.scenario

    if config.mode == "feedforward":
        cuts = plan_feedforward(
            scenario.initial,
            scenario.target,
            scenario.constraint,
            config.laser,
            config.table,
            config.planner,
            rng=planner_rng,
        )
        log = execute_feedforward(
            plant, cuts, scenario, config.laser, config.table,
            config.planner, config.seed, scan_rng,
        )
    else:
        log = plan_with_feedback(
            plant,
            scenario.target,
            scenario.constraint,
            config.laser,
            config.table,
            config.planner,
            rng=planner_rng,
            scan_rng=scan_rng,
        )
        log.seed = config.seed

    if config.output_dir is not None:
        write_run_dir(config.output_dir, config, log)
    return log


def cuts_csv(log: ExecutionLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "mu_x", "mu_y", "tilt_x", "tilt_y", "duty", "predicted_cost"])
    for rec in log.cut_records():
        writer.writerow(
            [
                rec.step,
                repr(rec.mu[0]),
                repr(rec.mu[1]),
                repr(rec.tilt[0]),
                repr(rec.tilt[1]),
                repr(rec.duty),
                repr(rec.predicted_cost),
            ]
        )
    return buf.getvalue()


def metrics_yaml(log: ExecutionLog) -> str:
    payload = {
        "mode": log.mode,
        "seed": log.seed,
        "objective_volume_mm3": log.objective_volume,
        "final_residual_volume_mm3": log.final_residual_volume,
        "terminated": log.terminated,
        "total_cuts": log.total_cuts,
        "final_metrics": log.final_metrics.as_dict() if log.final_metrics else None,
    }
    return yaml.safe_dump(payload, sort_keys=False)


def write_run_dir(out_dir: str | Path, config: RunConfig, log: ExecutionLog) -> Path:
    """Write all run artifacts, staging into a temp dir and renaming atomically."""
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise ConfigError(f"output directory already exists: {out_dir}")
    stage = out_dir.with_name(out_dir.name + f".partial-{os.getpid()}")
    stage.mkdir(parents=True)
    try:
        (stage / "config.yaml").write_text(yaml.safe_dump(config.snapshot, sort_keys=False))
        (stage / "cuts.csv").write_text(cuts_csv(log))
        (stage / "log.jsonl").write_text(log.to_jsonl())
        (stage / "metrics.yaml").write_text(metrics_yaml(log))
        for name, surf in (
            ("initial", log.initial),
            ("target", log.target),
            ("predicted_final", log.final_predicted),
            ("truth_final", log.final_truth),
            ("observed_final", log.final_observed),
        ):
            if surf is not None:
                surf.save(stage / f"{name}.hf")
        constraint = config.scenario.constraint
        if constraint.any_active:
            constraint.ceiling.save(stage / "ceiling.hf")
        os.replace(stage, out_dir)
    finally:
        if stage.exists():
            import shutil

            shutil.rmtree(stage, ignore_errors=True)
    return out_dir


def load_run_dir(path: str | Path) -> ExecutionLog:
    path = Path(path)
    log_path = path / "log.jsonl"
    if not log_path.exists():
        raise ConfigError(f"not a run directory (missing log.jsonl): {path}")
    log = ExecutionLog.from_jsonl(log_path.read_text())
    for name, attr in (
        ("initial", "initial"),
        ("target", "target"),
        ("predicted_final", "final_predicted"),
        ("truth_final", "final_truth"),
        ("observed_final", "final_observed"),
    ):
        hf_path = path / f"{name}.hf"
        if hf_path.exists():
            setattr(log, attr, HeightField.load(hf_path))
    return log


def report_compare(logs: list[ExecutionLog]) -> str:
    """One CSV row per run with the metric set used throughout reporting."""
    if not logs:
        raise ValueError("need at least one log")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["mode", "seed", "objective_volume_mm3", "total_cuts", "terminated",
         "rmse", "mae", "pct_overcut", "pct_undercut", "iou"]
    )
    for log in logs:
        m = log.final_metrics
        metric_values = (
            [m.rmse, m.mae, m.pct_overcut, m.pct_undercut, m.iou] if m else ["", "", "", "", ""]
        )
        writer.writerow(
            [log.mode, log.seed if log.seed is not None else "",
             log.objective_volume, log.total_cuts, log.terminated] + metric_values
        )
    return buf.getvalue()


def export_figure_data(log: ExecutionLog, kind: str, bins: int = 50) -> str:
    """Plot-ready CSV data for a run: depth map, residual histogram or progress."""
    if kind == "depth_map":
        if log.initial is None or log.final_truth is None:
            raise MissingData("depth map needs initial and final truth surfaces")
        initial, final = log.initial, log.final_truth
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "y", "depth"])
        xs, ys = initial.x_coords(), initial.y_coords()
        depth = np.where(
            initial.valid & final.valid, np.maximum(initial.z - final.z, 0.0), np.nan
        )
        for i in range(initial.nx):
            for j in range(initial.ny):
                writer.writerow([repr(xs[i]), repr(ys[j]), repr(float(depth[i, j]))])
        return buf.getvalue()

    if kind == "residual_hist":
        if log.final_truth is None or log.target is None:
            raise MissingData("residual histogram needs final truth and target surfaces")
        final, target = log.final_truth, log.target
        valid = final.valid & target.valid
        e = (final.z - target.z)[valid]
        counts, edges = np.histogram(e, bins=bins)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "count"])
        for k in range(len(counts)):
            writer.writerow([repr(edges[k]), repr(edges[k + 1]), int(counts[k])])
        return buf.getvalue()

    if kind == "progress":
        scans = log.scan_records()
        if not scans:
            raise MissingData("progress export needs observation records")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["round", "after_step", "rmse", "residual_volume_mm3",
             "residual_fraction", "excess_volume_mm3"]
        )
        for rec in scans:
            rmse = rec.metrics.rmse if rec.metrics else ""
            excess = (
                rec.metrics.pct_overcut / 100.0 * log.objective_volume if rec.metrics else ""
            )
            writer.writerow(
                [rec.round_index, rec.after_step, rmse, rec.residual_volume,
                 rec.residual_fraction, excess]
            )
        return buf.getvalue()

    raise ValueError(f"unknown figure kind {kind!r}")


def fit_result_yaml(fit: FitResult) -> str:
    payload = {
        "params": {
            "amplitude": fit.params.amplitude,
            "sigma": fit.params.sigma,
            "sharpness": fit.params.sharpness,
            "threshold": fit.params.threshold,
        },
        "mu": [fit.mu[0], fit.mu[1]],
        "rmse": fit.rmse,
        "iterations": fit.iterations,
        "converged": fit.converged,
    }
    return yaml.safe_dump(payload, sort_keys=False)


def residual_hist_csv(residuals: np.ndarray, bins: int = 40) -> str:
    counts, edges = np.histogram(residuals, bins=bins)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_left", "bin_right", "count"])
    for k in range(len(counts)):
        writer.writerow([repr(edges[k]), repr(edges[k + 1]), int(counts[k])])
    return buf.getvalue()
