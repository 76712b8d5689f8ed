"""Episode executor shared by every search method."""

from typing import Callable, Optional

import numpy as np

from .belief import BeliefMap, apply_frame, check_termination, init_uniform
from .percept import CalibrationConfig, DetectorModel, simulate_frame
from .plan import RefinementSchedule, path_costs, refine, shortest_path
from .world import EpisodeSpec, EpisodeState, MotionPrimitive, Outcome


class SearchSession:
    """One search episode: pose, belief, refinement schedule and counters.

    An observation is fused at the start pose and after every primitive.
    Centroids count as visited whenever the robot stands on them.
    """

    def __init__(
        self,
        spec: EpisodeSpec,
        num_classes: int,
        detector: DetectorModel,
        calibration: CalibrationConfig,
        rng: np.random.Generator,
        objects: Optional[dict] = None,
        k0: int = 4,
        cluster_seed: int = 0,
        fov_deg: float = 90.0,
        on_step: Optional[Callable] = None,
    ):
        self.spec = spec
        self.map = spec.map
        self.detector = detector
        self.calibration = calibration
        self.rng = rng
        self.objects = objects if objects is not None else {spec.target_cell: spec.target_class}
        self.fov_deg = fov_deg
        self.on_step = on_step
        self.state = EpisodeState(pose=spec.start_pose, horizon=spec.horizon)
        self.belief: BeliefMap = init_uniform(self.map, num_classes)
        self.declared_cell = None
        self.refinements = 0
        self._costs = None
        self.schedule = RefinementSchedule.start(self.map, k0, cluster_seed)
        self._install()
        self.observe()

    # ── state ──────────────────────────────────────────────

    @property
    def pose(self):
        return self.state.pose

    @property
    def running(self) -> bool:
        return self.state.running

    @property
    def outcome(self) -> Outcome:
        return self.state.finished

    @property
    def primitives_executed(self) -> int:
        return self.state.primitives_executed

    def costs(self) -> dict:
        """Primitive cost from the current pose to every reachable free cell."""
        if self._costs is None:
            self._costs = path_costs(self.map, self.pose)
        return self._costs

    # ── acting ─────────────────────────────────────────────

    def observe(self):
        frame = simulate_frame(
            self.map, self.pose, self.spec, self.detector, self.calibration,
            self.rng, objects=self.objects, fov_deg=self.fov_deg,
        )
        apply_frame(self.belief, frame, self.detector)
        outcome, cell = check_termination(self.belief, self.spec)
        if outcome is not Outcome.RUNNING:
            self.state.finished = outcome
            self.declared_cell = cell
        if self.on_step is not None:
            self.on_step(self, frame)

    def step(self, prim: MotionPrimitive):
        """Execute one primitive, observe, and close the episode if the budget is spent."""
        self.state.advance(self.map, prim)
        self._costs = None
        self.schedule.mark_visited(self.pose.cell)
        self.observe()
        if self.running and self.state.budget_spent:
            self.state.finished = Outcome.HORIZON_EXHAUSTED

    def travel_to(self, goal) -> int:
        """Follow the shortest path to ``goal``; returns the primitives executed."""
        path = shortest_path(self.map, self.pose, goal)
        executed = 0
        for prim in path.primitives:
            if not self.running:
                break
            self.step(prim)
            executed += 1
        return executed

    # ── goals ──────────────────────────────────────────────

    def _install(self):
        """Mark the current cell and every unreachable centroid as visited."""
        costs = self.costs()
        self.schedule.mark_visited(self.pose.cell)
        for c in self.schedule.centroids:
            if c not in costs:
                self.schedule.visited.add(c)

    def admissible(self) -> list:
        """Unvisited reachable centroids of the current level, refining when none remain.

        Returns an empty list only when refinement cannot produce a new goal
        (a single reachable free cell).
        """
        for _ in range(64):
            costs = self.costs()
            goals = [c for c in self.schedule.unvisited if c in costs]
            if goals:
                return goals
            saturated = self.schedule.k >= self.map.n_free
            self.schedule = refine(self.schedule, self.map)
            self.refinements += 1
            self._install()
            if saturated and self.schedule.exhausted:
                return []
        return []

    def hold(self):
        """Turn in place; used when no goal is available."""
        self.step(MotionPrimitive.TURN_LEFT)
