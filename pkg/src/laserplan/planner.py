"""Sampling-based MPC resection planner.

The planner grows a tree of predicted tissue surfaces. Each expansion picks
an existing node (randomly, weighted toward lower cost), samples a cut over
the node's residual region, simulates the crater, discards the child if it
dips below the constraint ceiling, and otherwise inserts it with its cost.
The returned plan is the cut sequence from the root to the cheapest node.

Feedforward execution chains trees, re-rooting each at the previous
prediction, until the residual volume drops below the termination fraction
of the objective volume. Feedback execution re-roots at a freshly scanned
plant surface after every ``cuts_per_scan`` executed cuts instead, which is
what lets it absorb model-plant mismatch.

Tree nodes store only the incoming cut, parent index and cost; surfaces are
recovered by replaying cuts from the root (with a small cache), so trees of
thousands of nodes stay cheap in memory.
"""

from __future__ import annotations

import math
import time
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import (
    ConstraintViolation,
    GridMismatch,
    InvalidTarget,
    NoProgress,
    NothingToCut,
    Stalled,
)
from .fitting import compute_metrics
from .geometry import HeightField, require_same_grid
from .lti import CutInput, EnergyTable, LaserParams, apply_cut, carve_crater_bounds, energy_for_duty
from .runlog import CutRecord, ExecutionLog, ScanRecord, surface_hash

RESIDUAL_TOL = 1e-9
MAX_TREES_PER_PLAN = 200
MAX_FEEDBACK_ROUNDS = 200


@dataclass(frozen=True)
class ConstraintField:
    """Per-cell minimum permissible surface height (ceiling) where active."""

    ceiling: HeightField
    active: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        active = self.active
        if active is None:
            active = self.ceiling.valid
        active = np.ascontiguousarray(np.asarray(active, dtype=bool))
        if active.shape != self.ceiling.z.shape:
            raise ValueError("active mask shape must match the ceiling grid")
        if not np.all(np.isfinite(self.ceiling.z[active])):
            raise ValueError("ceiling must be finite where active")
        active.flags.writeable = False
        object.__setattr__(self, "active", active)

    @classmethod
    def inactive(cls, like: HeightField) -> "ConstraintField":
        z = np.full(like.z.shape, np.nan)
        ceiling = HeightField(like.origin, like.spacing, z, np.zeros(like.z.shape, bool))
        return cls(ceiling, np.zeros(like.z.shape, bool))

    @property
    def any_active(self) -> bool:
        return bool(self.active.any())


@dataclass(frozen=True)
class PlannerConfig:
    """Knobs of the sampling planner.

    tree_iterations: expansion attempts per tree.
    overcut_weight: asymmetry weight >= 1; by default it multiplies the
        overcut side of the cost so irreversible overcuts are penalized
        harder (set weight_side="undercut" for the opposite binding).
    cuts_per_scan: executed cuts between observations in feedback mode.
    duty_range: closed duty-cycle interval candidates are drawn from.
    clearance: safety margin (mm) added when ceilings are built.
    termination_fraction: stop once residual volume falls below this
        fraction of the objective volume.
    selection_temperature: Boltzmann temperature (mm) for node selection;
        near zero is greedy, large is uniform.
    """

    tree_iterations: int = 2000
    overcut_weight: float = 2.0
    cuts_per_scan: int = 9
    tilt_limit: float = 10.0
    duty_range: tuple[float, float] = (20.0, 100.0)
    clearance: float = 0.2
    termination_fraction: float = 0.25
    rng_seed: int = 0
    selection_temperature: float = 0.5
    tilt_model: str = "oblique"
    weight_side: str = "overcut"
    stall_trees: int = 3

    def __post_init__(self):
        if self.tree_iterations < 1:
            raise ValueError("tree_iterations must be >= 1")
        if self.overcut_weight < 1:
            raise ValueError("overcut_weight must be >= 1")
        if self.cuts_per_scan < 1:
            raise ValueError("cuts_per_scan must be >= 1")
        if self.clearance < 0:
            raise ValueError("clearance must be nonnegative")
        if self.duty_range[0] > self.duty_range[1]:
            raise ValueError("duty_range must be a nonempty interval")
        if self.weight_side not in ("overcut", "undercut"):
            raise ValueError("weight_side must be 'overcut' or 'undercut'")

    def error_weights(self) -> tuple[float, float]:
        """(undercut weight, overcut weight) applied to e > 0 / e < 0 sides."""
        if self.weight_side == "overcut":
            return 1.0, self.overcut_weight
        return self.overcut_weight, 1.0


def node_cost(
    surface: HeightField,
    target: HeightField,
    overcut_weight: float = 2.0,
    weight_side: str = "overcut",
) -> float:
    """Asymmetric RMS of the surface-target error over all shared valid cells."""
    require_same_grid(surface, target)
    valid = surface.valid & target.valid
    n = int(valid.sum())
    if n == 0:
        raise GridMismatch("no overlapping valid cells")
    if weight_side == "overcut":
        w_under, w_over = 1.0, overcut_weight
    elif weight_side == "undercut":
        w_under, w_over = overcut_weight, 1.0
    else:
        raise ValueError("weight_side must be 'overcut' or 'undercut'")
    ssq = kernels.asym_ssq(surface.z, target.z, valid, w_under, w_over)
    return math.sqrt(ssq / n)


def residual_volume(surface: HeightField, target: HeightField) -> float:
    """Volume (mm^3) still standing above the target."""
    require_same_grid(surface, target)
    valid = surface.valid & target.valid
    return float(kernels.pos_residual_sum(surface.z, target.z, valid)) * surface.cell_area


def _terminated(residual: float, objective: float, fraction: float) -> bool:
    return residual <= fraction * objective * (1.0 + 1e-12) + 1e-12


@dataclass(frozen=True)
class ConstraintCheck:
    ok: bool
    cells: np.ndarray  # (k, 2) int indices of violating cells


def check_constraint(surface: HeightField, constraint: ConstraintField) -> ConstraintCheck:
    """A surface violates iff any active cell sits strictly below the ceiling."""
    require_same_grid(surface, constraint.ceiling)
    if not constraint.any_active:
        return ConstraintCheck(True, np.empty((0, 2), dtype=np.int64))
    below = constraint.active & (surface.z < constraint.ceiling.z)
    if not below.any():
        return ConstraintCheck(True, np.empty((0, 2), dtype=np.int64))
    return ConstraintCheck(False, np.argwhere(below))


def _sample_from_z(
    z: np.ndarray,
    target_z: np.ndarray,
    valid: np.ndarray,
    surface: HeightField,
    config: PlannerConfig,
    rng: np.random.Generator,
) -> CutInput:
    residual = valid & (z > target_z + RESIDUAL_TOL)
    flat = np.flatnonzero(residual.ravel())
    if flat.size == 0:
        raise NothingToCut("no residual cells above the target")
    pick = int(flat[rng.integers(flat.size)])
    i, j = divmod(pick, surface.ny)
    mu = (surface.origin[0] + i * surface.spacing[0], surface.origin[1] + j * surface.spacing[1])
    lim = config.tilt_limit
    tilt = rng.uniform(-lim, lim, size=2)
    duty = float(rng.uniform(config.duty_range[0], config.duty_range[1]))
    return CutInput(mu, (float(tilt[0]), float(tilt[1])), duty)


def sample_candidate(
    surface: HeightField,
    target: HeightField,
    config: PlannerConfig,
    rng: np.random.Generator,
) -> CutInput:
    """Draw one candidate cut: center uniform over residual cells, tilt and
    duty uniform over their allowed boxes."""
    require_same_grid(surface, target)
    valid = surface.valid & target.valid
    return _sample_from_z(surface.z, target.z, valid, surface, config, rng)


class PlanTree:
    """Search tree over predicted surfaces.

    Node 0 is the root. Surfaces are materialized on demand by replaying
    the cut chain from the root; a bounded cache keeps recent surfaces hot.
    """

    CACHE_SIZE = 48

    def __init__(
        self,
        root: HeightField,
        target: HeightField,
        constraint: ConstraintField,
        params: LaserParams,
        table: EnergyTable,
        config: PlannerConfig,
    ):
        require_same_grid(root, target)
        require_same_grid(root, constraint.ceiling)
        self.root = root
        self.target = target
        self.constraint = constraint
        self.params = params
        self.table = table
        self.config = config
        self.valid = np.ascontiguousarray(root.valid & target.valid)
        self.n_cells = int(self.valid.sum())
        if self.n_cells == 0:
            raise GridMismatch("no overlapping valid cells")
        w_under, w_over = config.error_weights()
        self._weights = (w_under, w_over)
        cap = config.tree_iterations + 1
        self.parents = np.full(cap, -1, dtype=np.int64)
        self.depths = np.zeros(cap, dtype=np.int64)
        self.ssq = np.zeros(cap, dtype=np.float64)
        self.costs = np.zeros(cap, dtype=np.float64)
        self.cuts: list[CutInput | None] = [None]
        self.size = 1
        self.ssq[0] = kernels.asym_ssq(root.z, target.z, self.valid, w_under, w_over)
        self.costs[0] = math.sqrt(self.ssq[0] / self.n_cells)
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache[0] = root.z

    @property
    def root_cost(self) -> float:
        return float(self.costs[0])

    def _cache_put(self, index: int, z: np.ndarray) -> None:
        z = np.ascontiguousarray(z)
        z.flags.writeable = False
        self._cache[index] = z
        self._cache.move_to_end(index)
        while len(self._cache) > self.CACHE_SIZE:
            evict = next(k for k in self._cache if k != 0)  # root stays pinned
            self._cache.pop(evict)

    def surface_z(self, index: int) -> np.ndarray:
        """Writable copy of node ``index``'s height array."""
        chain = []
        i = index
        while i not in self._cache:
            chain.append(i)
            i = int(self.parents[i])
        z = self._cache[i].copy()
        for node in reversed(chain):
            cut = self.cuts[node]
            energy = energy_for_duty(self.table, cut.duty)
            carve_crater_bounds(
                self.root, cut.mu, cut.tilt, energy, self.params, self.config.tilt_model, out_z=z
            )
        if chain:
            self._cache_put(index, z.copy())
        return z

    def surface(self, index: int) -> HeightField:
        return self.root.with_z(self.surface_z(index))

    def node(self, index: int) -> "PlanNode":
        return PlanNode(
            cost=float(self.costs[index]),
            parent=int(self.parents[index]) if self.parents[index] >= 0 else None,
            incoming_cut=self.cuts[index],
            depth_in_tree=int(self.depths[index]),
            tree=self,
            index=index,
        )

    def insert(self, parent: int, cut: CutInput, ssq: float, z: np.ndarray) -> int:
        index = self.size
        self.parents[index] = parent
        self.depths[index] = self.depths[parent] + 1
        self.ssq[index] = ssq
        self.costs[index] = math.sqrt(max(ssq, 0.0) / self.n_cells)
        self.cuts.append(cut)
        self.size += 1
        self._cache_put(index, z)
        return index

    def best_index(self) -> int:
        return int(np.argmin(self.costs[: self.size]))

    def path_to(self, index: int) -> list[CutInput]:
        cuts = []
        i = index
        while self.parents[i] >= 0:
            cuts.append(self.cuts[i])
            i = int(self.parents[i])
        return cuts[::-1]


@dataclass(frozen=True)
class PlanNode:
    """View of one tree node; ``surface`` materializes lazily."""

    cost: float
    parent: int | None
    incoming_cut: CutInput | None
    depth_in_tree: int
    tree: PlanTree
    index: int

    @property
    def surface(self) -> HeightField:
        return self.tree.surface(self.index)


def _select_node(costs: np.ndarray, size: int, temperature: float, rng: np.random.Generator) -> int:
    u = rng.random()
    if temperature <= 1e-12:
        return int(np.argmin(costs[:size]))
    c = costs[:size]
    w = np.exp(-(c - c.min()) / temperature)
    cum = np.cumsum(w)
    return int(np.searchsorted(cum, u * cum[-1], side="right").clip(0, size - 1))


def grow_tree(
    root_surface: HeightField,
    target: HeightField,
    constraint: ConstraintField,
    params: LaserParams,
    table: EnergyTable,
    config: PlannerConfig,
    rng: np.random.Generator | None = None,
) -> tuple[PlanTree, list[CutInput]]:
    """Grow one sampling tree and return it with the best cut sequence.

    The best path leads from the root to the minimum-cost node; it is empty
    when no sampled child beats the root. Candidates whose predicted surface
    violates the constraint are discarded, never inserted.
    """
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    valid = root_surface.valid & target.valid
    if not check_constraint(root_surface, constraint).ok:
        raise ConstraintViolation("root surface already violates the constraint")

    tree = PlanTree(root_surface, target, constraint, params, table, config)
    if not np.any(valid & (root_surface.z > target.z + RESIDUAL_TOL)):
        return tree, []

    w_under, w_over = config.error_weights()
    ceiling_z = constraint.ceiling.z
    active = constraint.active
    any_active = constraint.any_active
    inserted = 0
    for _ in range(config.tree_iterations):
        parent = _select_node(tree.costs, tree.size, config.selection_temperature, rng)
        parent_z = tree.surface_z(parent)
        try:
            cut = _sample_from_z(parent_z, target.z, tree.valid, root_surface, config, rng)
        except NothingToCut:
            continue
        energy = energy_for_duty(table, cut.duty)
        child_z = parent_z.copy()
        _, (i0, i1, j0, j1) = carve_crater_bounds(
            root_surface, cut.mu, cut.tilt, energy, params, config.tilt_model, out_z=child_z
        )
        if i0 >= i1 or j0 >= j1:
            continue  # zero-energy cut changes nothing
        if any_active and kernels.violates(
            child_z[i0:i1, j0:j1], ceiling_z[i0:i1, j0:j1], active[i0:i1, j0:j1]
        ):
            continue
        old_patch = parent_z[i0:i1, j0:j1]
        tz = target.z[i0:i1, j0:j1]
        vp = tree.valid[i0:i1, j0:j1]
        ssq = (
            tree.ssq[parent]
            - kernels.asym_ssq(old_patch, tz, vp, w_under, w_over)
            + kernels.asym_ssq(child_z[i0:i1, j0:j1], tz, vp, w_under, w_over)
        )
        tree.insert(parent, cut, ssq, child_z)
        inserted += 1

    if inserted == 0:
        raise NoProgress("no feasible child could be inserted")
    best = tree.best_index()
    return tree, tree.path_to(best)


class _CutChain:
    """Streams cuts by chaining trees, each rooted at the running prediction.

    ``next_cut()`` returns the next cut (after applying it to the predicted
    surface) or None once the predicted residual volume falls below the
    termination threshold. Raises Stalled after ``config.stall_trees``
    consecutive trees with empty best paths, or when the tree budget runs out.
    """

    def __init__(self, root, target, constraint, params, table, config, rng, objective):
        self.surface = root
        self.target = target
        self.constraint = constraint
        self.params = params
        self.table = table
        self.config = config
        self.rng = rng
        self.objective = objective
        self.queue: list[CutInput] = []
        self.empty_streak = 0
        self.trees_grown = 0
        self.done = _terminated(
            residual_volume(root, target), objective, config.termination_fraction
        )

    def next_cut(self) -> CutInput | None:
        while True:
            if self.done:
                return None
            if self.queue:
                cut = self.queue.pop(0)
                self.surface = apply_cut(
                    self.surface, cut, self.params, self.table,
                    self.config.tilt_model, self.config.tilt_limit,
                )
                residual = residual_volume(self.surface, self.target)
                self.done = _terminated(residual, self.objective, self.config.termination_fraction)
                return cut
            if self.trees_grown >= MAX_TREES_PER_PLAN:
                raise Stalled(f"tree budget ({MAX_TREES_PER_PLAN}) exhausted before termination")
            try:
                _, path = grow_tree(
                    self.surface, self.target, self.constraint,
                    self.params, self.table, self.config, self.rng,
                )
            except NoProgress:
                path = []
            self.trees_grown += 1
            if not path:
                self.empty_streak += 1
                if self.empty_streak >= self.config.stall_trees:
                    raise Stalled(
                        f"{self.empty_streak} consecutive trees produced empty plans"
                    )
                continue
            self.empty_streak = 0
            self.queue = list(path)


def plan_feedforward(
    initial: HeightField,
    target: HeightField,
    constraint: ConstraintField,
    params: LaserParams,
    table: EnergyTable,
    config: PlannerConfig,
    rng: np.random.Generator | None = None,
) -> list[CutInput]:
    """Plan a full cut sequence in pure simulation.

    Trees are chained with each best path's end surface as the next root;
    the plan stops as soon as the predicted residual volume drops below
    ``termination_fraction`` of the objective volume.
    """
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    valid = initial.valid & target.valid
    if np.any(target.z[valid] > initial.z[valid] + 1e-9):
        raise InvalidTarget("target lies above the initial surface")
    objective = residual_volume(initial, target)
    chain = _CutChain(initial, target, constraint, params, table, config, rng, objective)
    cuts: list[CutInput] = []
    while (cut := chain.next_cut()) is not None:
        cuts.append(cut)
    return cuts


def plan_with_feedback(
    plant,
    target: HeightField,
    constraint: ConstraintField,
    params: LaserParams,
    table: EnergyTable,
    config: PlannerConfig,
    rng: np.random.Generator | None = None,
    scan_rng: np.random.Generator | None = None,
) -> ExecutionLog:
    """Closed-loop execution against a plant (e.g. tissue.VirtualTissue).

    Cuts execute in rounds of exactly ``cuts_per_scan`` (the last round may
    be shorter), and each round spends exactly one observation, so the
    in-loop scan count equals ceil(total cuts / cuts_per_scan). The round's
    scan fires at the quota boundary, or early when the planner predicts
    the residual-volume criterion is already met; a scan that refutes the
    prediction re-roots the planner and the round tops up its quota from
    the fresh observation. Termination is decided on observed surfaces;
    every realized surface is hard-checked against the constraint ceiling.
    """
    if rng is None or scan_rng is None:
        ss = np.random.SeedSequence(config.rng_seed).spawn(2)
        rng = np.random.default_rng(ss[0]) if rng is None else rng
        scan_rng = np.random.default_rng(ss[1]) if scan_rng is None else scan_rng

    # Plan against a ceiling raised by a sensing margin so that cuts sized
    # on noisy observations cannot push the realized surface below the true
    # ceiling; hard checks stay against the true ceiling.
    sense_margin = 4.0 * float(getattr(plant, "scan_noise_sigma", 0.0))
    if constraint.any_active and sense_margin > 0.0:
        raised = constraint.ceiling.with_z(
            np.where(constraint.active, constraint.ceiling.z + sense_margin, np.nan)
        )
        planning_constraint = ConstraintField(raised, constraint.active)
    else:
        planning_constraint = constraint

    def clamp_to_ceiling(obs: HeightField) -> HeightField:
        if not planning_constraint.any_active:
            return obs
        z = obs.writable_z()
        act = planning_constraint.active
        z[act] = np.maximum(z[act], planning_constraint.ceiling.z[act])
        return obs.with_z(z)

    initial_truth = plant.initial_truth
    objective = residual_volume(initial_truth, target)
    observed = clamp_to_ceiling(plant.scan(scan_rng))
    log = ExecutionLog(
        mode="feedback",
        seed=config.rng_seed,
        objective_volume=objective,
        initial=initial_truth,
        target=target,
    )

    step = 0
    last_predicted = observed

    def execute(cut: CutInput, chain: _CutChain, round_index: int, t0: float) -> None:
        nonlocal step, last_predicted
        plant.apply(cut, params, table)
        verdict = check_constraint(plant.truth, constraint)
        if not verdict.ok:
            raise ConstraintViolation(
                f"realized surface violates ceiling at {len(verdict.cells)} cells"
            )
        step += 1
        last_predicted = chain.surface
        log.add_cut(
            CutRecord(
                step=step,
                round_index=round_index,
                mu=cut.mu,
                tilt=cut.tilt,
                duty=cut.duty,
                predicted_cost=node_cost(
                    chain.surface, target, config.overcut_weight, config.weight_side
                ),
                predicted_surface_hash=surface_hash(chain.surface),
                wall_time_s=time.perf_counter() - t0,
            )
        )

    def observe(round_index: int) -> tuple[HeightField, bool]:
        obs = plant.scan(scan_rng)
        residual_obs = residual_volume(obs, target)
        log.add_scan(
            ScanRecord(
                round_index=round_index,
                after_step=step,
                observed_surface_hash=surface_hash(obs),
                residual_volume=residual_obs,
                residual_fraction=residual_obs / objective if objective > 0 else 0.0,
                metrics=compute_metrics(obs, target, initial_truth),
            )
        )
        # Scan noise can report cells marginally below the ceiling even
        # though the realized surface respects it; project the planning
        # root back onto the feasible set so replanning stays well-posed.
        return clamp_to_ceiling(obs), _terminated(
            residual_obs, objective, config.termination_fraction
        )

    terminated = False
    for round_index in range(MAX_FEEDBACK_ROUNDS):
        if terminated:
            break
        chain = _CutChain(
            observed, target, planning_constraint, params, table, config, rng, objective
        )
        executed = 0
        scanned = False
        while executed < config.cuts_per_scan:
            t0 = time.perf_counter()
            try:
                cut = chain.next_cut()
            except Stalled:
                if scanned:
                    raise
                observed, terminated = observe(round_index)
                scanned = True
                if terminated:
                    break
                raise
            if cut is None:
                if scanned:
                    # scan already spent; keep improving toward the target to
                    # fill the quota (residual is still above the threshold)
                    exhaust = replace(config, termination_fraction=0.0)
                    chain = _CutChain(
                        observed, target, planning_constraint, params, table, exhaust, rng,
                        objective,
                    )
                    try:
                        cut = chain.next_cut()
                    except Stalled:
                        break  # nothing improves any further; close the round
                    if cut is None:
                        break
                    execute(cut, chain, round_index, t0)
                    executed += 1
                    continue
                observed, terminated = observe(round_index)
                scanned = True
                if terminated:
                    break
                chain = _CutChain(
                    observed, target, planning_constraint, params, table, config, rng, objective
                )
                continue
            execute(cut, chain, round_index, t0)
            executed += 1
        if terminated:
            break
        if not scanned:
            observed, terminated = observe(round_index)
        if terminated:
            break
    else:
        raise Stalled(f"feedback round budget ({MAX_FEEDBACK_ROUNDS}) exhausted")
    log.terminated = True

    log.final_predicted = last_predicted
    log.final_truth = plant.truth
    log.final_observed = observed
    log.final_residual_volume = residual_volume(plant.truth, target)
    log.final_metrics = compute_metrics(plant.truth, target, initial_truth)
    return log
