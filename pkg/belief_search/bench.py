"""Evaluation protocol: fixed start-pose suites, joint-success filtering, aggregation."""

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .policies import bbums_next, cluster_stats, pcss_next, rws_step
from .rl import QNetwork, run_bbdps_episode
from .scenario import Placement, ScenarioSpec, start_pose_suite
from .session import SearchSession
from .world import EpisodeSpec, Pose, horizon_for

METHODS = ("rws", "pcss", "bbums", "bbdps")


@dataclass(frozen=True)
class RunRecord:
    method: str
    episode: int
    outcome: str
    primitives_executed: int
    distance: float

    @property
    def success(self) -> bool:
        return self.outcome == "success"


@dataclass(frozen=True)
class MethodMetrics:
    method: str
    sr: float
    episodes: int
    subset: int
    actions_mean: float
    actions_se: float
    distance_mean: float
    distance_se: float


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple
    subset: tuple

    def __getitem__(self, method: str) -> MethodMetrics:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(method)

    @property
    def methods(self) -> list:
        return [row.method for row in self.rows]


# ── Decision loops ─────────────────────────────────────────


def _run_rws(session: SearchSession, rng: np.random.Generator):
    while session.running:
        session.step(rws_step(rng))


def _run_goal_loop(session: SearchSession, choose: Callable):
    while session.running:
        goals = session.admissible()
        if not goals:
            session.hold()
            continue
        session.travel_to(choose(session, goals))


def _pcss_goal(session: SearchSession, goals: list) -> tuple:
    return pcss_next(session.schedule.partition, session.schedule, session.pose, session.map, costs=session.costs())


def _bbums_goal(weights):
    def choose(session: SearchSession, goals: list) -> tuple:
        stats = cluster_stats(
            session.belief, session.schedule.partition, session.pose, session.spec.target_class,
            session.map, admissible=goals, costs=session.costs(),
        )
        return bbums_next(stats, weights)
    return choose


def run_episode(
    method: str,
    scenario: ScenarioSpec,
    eval_target: Placement,
    start_pose: Pose,
    seed: int,
    network: Optional[QNetwork] = None,
    episode: int = 0,
    on_step: Optional[Callable] = None,
) -> RunRecord:
    """Run one episode of ``method`` and return its record.

    ``on_step(session, frame)`` is called after every observation.
    BBDPS runs greedily (epsilon 0) and needs ``network``.
    """
    if method not in METHODS:
        raise ValueError(f"Unknown method {method!r} (choose from {', '.join(METHODS)})")
    if method == "bbdps" and network is None:
        raise ValueError("bbdps needs a trained network")
    grid = scenario.map
    spec = EpisodeSpec(
        map=grid,
        target_class=eval_target.class_index,
        target_cell=eval_target.cell,
        start_pose=start_pose,
        horizon=horizon_for(grid, scenario.horizon_fraction),
        confidence_threshold=scenario.threshold,
        rng_seed=seed,
    )
    rng = np.random.default_rng(seed)
    session = scenario.new_session(spec, rng, on_step=on_step)

    if method == "rws":
        _run_rws(session, rng)
    elif method == "pcss":
        _run_goal_loop(session, _pcss_goal)
    elif method == "bbums":
        _run_goal_loop(session, _bbums_goal(scenario.weights))
    else:
        run_bbdps_episode(session, network, 0.0, rng)

    return RunRecord(
        method=method,
        episode=episode,
        outcome=session.outcome.value,
        primitives_executed=session.primitives_executed,
        distance=round(session.state.distance_traveled, 6),
    )


# ── Suites ─────────────────────────────────────────────────


def eval_target_for(scenario: ScenarioSpec, episode: int) -> Placement:
    """Held-out placements are used in turn across the suite."""
    if not scenario.eval_targets:
        raise ValueError(f"Scenario {scenario.name!r} defines no evaluation targets")
    return scenario.eval_targets[episode % len(scenario.eval_targets)]


def _suite_job(args) -> RunRecord:
    method, scenario, episode, pose, seed, network = args
    return run_episode(method, scenario, eval_target_for(scenario, episode), pose, seed, network, episode)


def run_suite(
    method: str,
    scenario: ScenarioSpec,
    seed: int,
    episodes: Optional[int] = None,
    network: Optional[QNetwork] = None,
    jobs: int = 1,
    on_progress: Optional[Callable] = None,
) -> list:
    """One record per start pose of the scenario's suite, in episode order.

    Episode ``i`` uses start pose ``i`` and seed ``seed ^ i`` for every method.
    """
    poses = start_pose_suite(scenario.map, episodes or scenario.start_poses, scenario.suite_seed)
    total = len(poses)
    tasks = [(method, scenario, i, pose, seed ^ i, network) for i, pose in enumerate(poses)]

    def _emit(record, step):
        if on_progress:
            on_progress(
                f"{method} episode {record.episode + 1}/{total}  {record.outcome:<18} "
                f"{record.primitives_executed} primitives",
                step, total,
            )

    records = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for step, record in enumerate(pool.map(_suite_job, tasks), 1):
                records.append(record)
                _emit(record, step)
    else:
        for step, task in enumerate(tasks, 1):
            record = _suite_job(task)
            records.append(record)
            _emit(record, step)
    return records


# ── Protocol ───────────────────────────────────────────────


def _by_method(records) -> dict:
    grouped = {}
    for r in records:
        grouped.setdefault(r.method, {})
        if r.episode in grouped[r.method]:
            raise ValueError(f"Duplicate record for {r.method} episode {r.episode}")
        grouped[r.method][r.episode] = r
    return grouped


def _method_order(grouped: dict) -> list:
    known = [m for m in METHODS if m in grouped]
    return known + [m for m in grouped if m not in METHODS]


def joint_success_filter(records) -> list:
    """Sorted episode indices on which every method succeeded."""
    grouped = _by_method(records)
    if not grouped:
        raise ValueError("No records to filter")
    episodes = set()
    for per_episode in grouped.values():
        episodes |= set(per_episode)
    for method, per_episode in grouped.items():
        missing = sorted(episodes - set(per_episode))
        if missing:
            raise ValueError(f"Method {method} has no record for episode(s) {missing}")
    joint = sorted(
        e for e in episodes if all(per_episode[e].success for per_episode in grouped.values())
    )
    if not joint:
        warnings.warn("No episode was solved by every method; efficiency metrics are undefined")
    return joint


def _mean_se(values: list) -> tuple:
    n = len(values)
    if n == 0:
        return math.nan, 0.0
    arr = np.asarray(values, dtype=float)
    se = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(arr.mean()), se


def aggregate(records, subset) -> MetricsTable:
    """Success rate over all episodes, efficiency over ``subset`` only."""
    grouped = _by_method(records)
    subset = tuple(sorted(subset))
    rows = []
    for method in _method_order(grouped):
        per_episode = grouped[method]
        missing = [e for e in subset if e not in per_episode]
        if missing:
            raise ValueError(f"Subset episode(s) {missing} have no {method} record")
        successes = sum(r.success for r in per_episode.values())
        chosen = [per_episode[e] for e in subset]
        actions_mean, actions_se = _mean_se([r.primitives_executed for r in chosen])
        distance_mean, distance_se = _mean_se([r.distance for r in chosen])
        rows.append(MethodMetrics(
            method=method,
            sr=successes / len(per_episode),
            episodes=len(per_episode),
            subset=len(chosen),
            actions_mean=actions_mean,
            actions_se=actions_se,
            distance_mean=distance_mean,
            distance_se=distance_se,
        ))
    return MetricsTable(rows=tuple(rows), subset=subset)
