"""Command-line interface.

Subcommands: scenario, fit, plan, simulate, calibrate, segment, report.
Exit codes: 0 ok, 2 config error, 3 planner stall, 4 constraint fault,
5 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import yaml

from . import runio
from .calibration import (
    LaserAxis,
    PosePair,
    axis_fit_residuals,
    fit_laser_axis,
    hand_eye_residuals,
    solve_hand_eye,
)
from .errors import ConfigError, ConstraintViolation, LaserPlanError, NoProgress, Stalled
from .fitting import compute_metrics, fit_crater
from .geometry import GridSpec, PointCloud3, RigidTransform
from .lti import apply_cut
from .perception import constraint_from_cluster, dbscan
from .planner import plan_feedforward, node_cost
from .runio import EXIT_CONFIG, EXIT_CONSTRAINT, EXIT_IO, EXIT_OK, EXIT_STALL


def _cmd_scenario(args) -> int:
    scenario, mismatch, noise, raw = runio.load_scenario_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario.initial.save(out / "initial.hf")
    scenario.target.save(out / "target.hf")
    if scenario.constraint.any_active:
        scenario.constraint.ceiling.save(out / "ceiling.hf")
    (out / "scenario_resolved.yaml").write_text(yaml.safe_dump(raw, sort_keys=False))
    print(f"scenario '{scenario.name}' written to {out}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    cloud = PointCloud3.load_csv(args.cloud)
    fit = fit_crater(
        cloud,
        energy=args.energy,
        mode=args.mode,
        fix_sharpness=args.fix_sharpness,
        threshold=args.threshold,
        fit_threshold=args.fit_threshold,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit_result.yaml").write_text(runio.fit_result_yaml(fit))
    (out / "residual_hist.csv").write_text(runio.residual_hist_csv(fit.residuals))
    print(
        f"fit: amplitude={fit.params.amplitude:.4f} sigma={fit.params.sigma:.4f} "
        f"sharpness={fit.params.sharpness:.3f} rmse={fit.rmse:.4f} mm"
    )
    return EXIT_OK


def _cmd_plan(args) -> int:
    config = runio.load_run_config(args.config, output_dir=args.out)
    scenario = config.scenario
    planner_rng, _, _ = runio._substreams(config.seed)
    cuts = plan_feedforward(
        scenario.initial, scenario.target, scenario.constraint,
        config.laser, config.table, config.planner, rng=planner_rng,
    )
    predicted = scenario.initial
    rows = []
    for step, cut in enumerate(cuts, start=1):
        predicted = apply_cut(
            predicted, cut, config.laser, config.table,
            config.planner.tilt_model, config.planner.tilt_limit,
        )
        rows.append(
            [step, repr(cut.mu[0]), repr(cut.mu[1]), repr(cut.tilt[0]), repr(cut.tilt[1]),
             repr(cut.duty),
             repr(node_cost(predicted, scenario.target,
                            config.planner.overcut_weight, config.planner.weight_side))]
        )
    out = Path(args.out) if args.out else Path("plan-out")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cuts.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "mu_x", "mu_y", "tilt_x", "tilt_y", "duty", "predicted_cost"])
        writer.writerows(rows)
    predicted.save(out / "predicted_final.hf")
    report = compute_metrics(predicted, scenario.target, scenario.initial)
    (out / "metrics.yaml").write_text(yaml.safe_dump(report.as_dict(), sort_keys=False))
    print(f"plan: {len(cuts)} cuts, predicted rmse {report.rmse:.4f} mm, iou {report.iou:.3f}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = runio.load_run_config(args.config, output_dir=args.out)
    if config.output_dir is None:
        raise ConfigError("simulate needs an output directory (config output_dir or --out)")
    log = runio.run(config)
    m = log.final_metrics
    print(
        f"{log.mode}: {log.total_cuts} cuts, terminated={log.terminated}, "
        f"rmse {m.rmse:.4f} mm, iou {m.iou:.3f} -> {config.output_dir}"
    )
    return EXIT_OK


def _read_pose_pairs(path: str) -> list[PosePair]:
    pairs = []
    with open(path, newline="") as fh:
        for row_index, row in enumerate(csv.reader(fh)):
            if row_index == 0 and not _is_float(row[0]):
                continue  # header
            vals = [float(v) for v in row]
            if len(vals) != 24:
                raise ConfigError("pose pair rows need 24 values (two 3x4 transforms)")
            a = RigidTransform(np.array(vals[0:9]).reshape(3, 3), np.array(vals[9:12]))
            b = RigidTransform(np.array(vals[12:21]).reshape(3, 3), np.array(vals[21:24]))
            pairs.append(PosePair(a, b))
    return pairs


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def _cmd_calibrate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    did_something = False
    if args.pairs:
        pairs = _read_pose_pairs(args.pairs)
        x = solve_hand_eye(pairs)
        payload = {
            "rotation": [[float(v) for v in row] for row in x.rotation],
            "translation": [float(v) for v in x.translation],
        }
        (out / "hand_eye.yaml").write_text(yaml.safe_dump(payload, sort_keys=False))
        residuals = hand_eye_residuals(x, pairs)
        with open(out / "hand_eye_errors.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["pair", "translation_residual_mm"])
            for k, r in enumerate(residuals):
                writer.writerow([k, repr(float(r))])
        print(f"hand-eye solved; mean pair residual {residuals.mean():.4f} mm")
        did_something = True
    if args.centers:
        with open(args.centers, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and not _is_float(rows[0][0]):
            rows = rows[1:]
        data = np.array([[float(v) for v in r[:3]] for r in rows])
        axis = fit_laser_axis(data[:, :2], data[:, 2], args.focal_distance)
        payload = {
            "direction": [float(v) for v in axis.direction],
            "focal_point": [float(v) for v in axis.focal_point],
            "focal_distance": axis.focal_distance,
        }
        (out / "laser_axis.yaml").write_text(yaml.safe_dump(payload, sort_keys=False))
        residuals = axis_fit_residuals(axis, data[:, :2], data[:, 2])
        with open(out / "laser_axis_errors.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["crater", "distance_from_axis_mm"])
            for k, r in enumerate(residuals):
                writer.writerow([k, repr(float(r))])
        print(f"laser axis fit; focal point {np.round(axis.focal_point, 4).tolist()}")
        did_something = True
    if not did_something:
        raise ConfigError("calibrate needs --pairs and/or --centers")
    return EXIT_OK


def _cmd_segment(args) -> int:
    cloud = PointCloud3.load_csv(args.cloud)
    result = dbscan(cloud, eps=args.eps, min_points=args.min_points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labeled = PointCloud3(cloud.points, result.labels)
    labeled.save_csv(out / "labeled.csv")
    print(f"segment: {result.cluster_count} clusters, "
          f"{int((result.labels == -1).sum())} noise points")
    if args.label is not None:
        pts = cloud.points
        pad = 2 * args.spacing
        grid = GridSpec.from_extent(
            (pts[:, 0].min() - pad, pts[:, 1].min() - pad),
            (np.ptp(pts[:, 0]) + 2 * pad, np.ptp(pts[:, 1]) + 2 * pad),
            (args.spacing, args.spacing),
        )
        field = constraint_from_cluster(labeled, args.label, args.clearance, grid)
        field.ceiling.save(out / "constraint.hf")
        print(f"constraint ceiling for cluster {args.label} written")
    return EXIT_OK


def _cmd_report(args) -> int:
    if args.figure:
        if len(args.runs) != 1:
            raise ConfigError("figure export takes exactly one run directory")
        log = runio.load_run_dir(args.runs[0])
        text = runio.export_figure_data(log, args.figure)
    else:
        logs = [runio.load_run_dir(p) for p in args.runs]
        text = runio.report_compare(logs)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"report written to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="laserplan",
        description="Volumetric laser resection planning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", help="materialize a scenario config into heightfields")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_scenario)

    p = sub.add_parser("fit", help="fit crater model parameters to a scanned cloud")
    p.add_argument("--cloud", required=True, help="crater point cloud CSV (x,y,z)")
    p.add_argument("--energy", type=float, required=True, help="delivered energy (J)")
    p.add_argument("--mode", choices=["super_gaussian", "gaussian"], default="super_gaussian")
    p.add_argument("--fix-sharpness", type=float, default=None)
    p.add_argument("--threshold", type=float, default=1.939)
    p.add_argument("--fit-threshold", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("plan", help="plan a feedforward cut sequence in pure simulation")
    p.add_argument("--config", required=True, help="run config YAML")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("simulate", help="run the configured mode against the virtual plant")
    p.add_argument("--config", required=True, help="run config YAML")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("calibrate", help="hand-eye and laser-axis calibration from CSVs")
    p.add_argument("--pairs", default=None, help="pose pair CSV (24 values per row)")
    p.add_argument("--centers", default=None, help="crater center CSV (x,y,z per row)")
    p.add_argument("--focal-distance", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("segment", help="cluster a point cloud and build a constraint ceiling")
    p.add_argument("--cloud", required=True)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--min-points", type=int, default=10)
    p.add_argument("--label", type=int, default=None, help="cluster id to turn into a ceiling")
    p.add_argument("--clearance", type=float, default=0.2)
    p.add_argument("--spacing", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("report", help="compare runs or export figure data")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--figure", choices=["depth_map", "residual_hist", "progress"], default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (Stalled, NoProgress) as exc:
        print(f"planner stalled: {exc}", file=sys.stderr)
        return EXIT_STALL
    except ConstraintViolation as exc:
        print(f"constraint fault: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LaserPlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
