"""Execution log: the ordered record of what a planning run did.

Each executed cut and each in-loop observation becomes one record. Logs
serialize to line-delimited JSON so external tooling can stream them, and
parse back losslessly for reporting.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .fitting import MetricReport
from .geometry import HeightField
from .lti import CutInput


def surface_hash(surface: HeightField) -> str:
    h = hashlib.sha256()
    h.update(surface.z.tobytes())
    return h.hexdigest()[:16]


@dataclass
class CutRecord:
    step: int
    round_index: int
    mu: tuple[float, float]
    tilt: tuple[float, float]
    duty: float
    predicted_cost: float
    predicted_surface_hash: str
    wall_time_s: float

    def to_json(self) -> dict:
        return {
            "kind": "cut",
            "step": self.step,
            "round": self.round_index,
            "mu_x": self.mu[0],
            "mu_y": self.mu[1],
            "tilt_x": self.tilt[0],
            "tilt_y": self.tilt[1],
            "duty": self.duty,
            "predicted_cost": self.predicted_cost,
            "predicted_surface_hash": self.predicted_surface_hash,
            "wall_time_s": self.wall_time_s,
        }

    @property
    def cut(self) -> CutInput:
        return CutInput(self.mu, self.tilt, self.duty)


@dataclass
class ScanRecord:
    round_index: int
    after_step: int
    observed_surface_hash: str
    residual_volume: float
    residual_fraction: float
    metrics: MetricReport | None

    def to_json(self) -> dict:
        return {
            "kind": "scan",
            "round": self.round_index,
            "after_step": self.after_step,
            "observed_surface_hash": self.observed_surface_hash,
            "residual_volume": self.residual_volume,
            "residual_fraction": self.residual_fraction,
            "metrics": self.metrics.as_dict() if self.metrics is not None else None,
        }


@dataclass
class ExecutionLog:
    """Ordered cut/scan records plus the surfaces needed for reporting."""

    mode: str
    seed: int | None = None
    objective_volume: float = 0.0
    records: list = field(default_factory=list)
    terminated: bool = False
    final_metrics: MetricReport | None = None
    final_residual_volume: float = 0.0
    initial: HeightField | None = None
    target: HeightField | None = None
    final_predicted: HeightField | None = None
    final_truth: HeightField | None = None
    final_observed: HeightField | None = None

    def add_cut(self, record: CutRecord) -> None:
        last = self.last_step()
        if record.step <= last:
            raise ValueError("cut steps must be strictly increasing")
        self.records.append(record)

    def add_scan(self, record: ScanRecord) -> None:
        self.records.append(record)

    def last_step(self) -> int:
        steps = [r.step for r in self.records if isinstance(r, CutRecord)]
        return max(steps) if steps else 0

    def cut_records(self) -> list[CutRecord]:
        return [r for r in self.records if isinstance(r, CutRecord)]

    def scan_records(self) -> list[ScanRecord]:
        return [r for r in self.records if isinstance(r, ScanRecord)]

    @property
    def total_cuts(self) -> int:
        return len(self.cut_records())

    def cuts(self) -> list[CutInput]:
        return [r.cut for r in self.cut_records()]

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "kind": "meta",
                    "mode": self.mode,
                    "seed": self.seed,
                    "objective_volume": self.objective_volume,
                }
            )
        ]
        lines += [json.dumps(r.to_json()) for r in self.records]
        lines.append(
            json.dumps(
                {
                    "kind": "summary",
                    "terminated": self.terminated,
                    "total_cuts": self.total_cuts,
                    "final_residual_volume": self.final_residual_volume,
                    "final_metrics": self.final_metrics.as_dict() if self.final_metrics else None,
                }
            )
        )
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "ExecutionLog":
        log = cls(mode="unknown")
        for line in text.strip().splitlines():
            obj = json.loads(line)
            kind = obj.get("kind")
            if kind == "meta":
                log.mode = obj.get("mode", "unknown")
                log.seed = obj.get("seed")
                log.objective_volume = obj.get("objective_volume", 0.0)
            elif kind == "cut":
                log.records.append(
                    CutRecord(
                        step=obj["step"],
                        round_index=obj["round"],
                        mu=(obj["mu_x"], obj["mu_y"]),
                        tilt=(obj["tilt_x"], obj["tilt_y"]),
                        duty=obj["duty"],
                        predicted_cost=obj["predicted_cost"],
                        predicted_surface_hash=obj["predicted_surface_hash"],
                        wall_time_s=obj["wall_time_s"],
                    )
                )
            elif kind == "scan":
                m = obj.get("metrics")
                log.records.append(
                    ScanRecord(
                        round_index=obj["round"],
                        after_step=obj["after_step"],
                        observed_surface_hash=obj["observed_surface_hash"],
                        residual_volume=obj["residual_volume"],
                        residual_fraction=obj["residual_fraction"],
                        metrics=MetricReport(**m) if m else None,
                    )
                )
            elif kind == "summary":
                log.terminated = obj.get("terminated", False)
                log.final_residual_volume = obj.get("final_residual_volume", 0.0)
                m = obj.get("final_metrics")
                log.final_metrics = MetricReport(**m) if m else None
        return log

    @classmethod
    def load(cls, path: str | Path) -> "ExecutionLog":
        return cls.from_jsonl(Path(path).read_text())
