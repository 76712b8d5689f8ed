"""Baseline goal and primitive selectors: random walk, cluster sweep, belief utility."""

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .belief import BeliefMap
from .plan import ClusterPartition, RefinementSchedule, ScheduleError, UnreachableError, path_costs
from .world import PRIMITIVES, GridMap, MotionPrimitive, Pose


@dataclass(frozen=True)
class UtilityWeights:
    w_H: float = 0.4
    w_d: float = 0.5
    w_p: float = 0.1

    def __post_init__(self):
        if min(self.w_H, self.w_d, self.w_p) < 0:
            raise ValueError(f"Utility weights must be nonnegative, got {self}")


@dataclass(frozen=True)
class ClusterStats:
    """Belief summary of one admissible cluster; the three scores lie in [0, 1]."""

    cluster: int
    centroid: tuple
    mean_entropy: float
    max_target_posterior: float
    motion_cost: float
    raw_posterior: float = 0.0
    raw_cost: int = 0


def rws_step(rng: np.random.Generator) -> MotionPrimitive:
    """Uniformly random primitive."""
    return PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]


def pcss_next(
    partition: ClusterPartition,
    schedule: RefinementSchedule,
    pose: Pose,
    grid: GridMap,
    costs: Optional[dict] = None,
) -> tuple:
    """Nearest unvisited centroid by path cost; ties go to the smaller cell."""
    if costs is None:
        costs = path_costs(grid, pose)
    candidates = [c for c in partition.centroids if c not in schedule.visited and c in costs]
    if not candidates:
        raise ScheduleError("No reachable unvisited centroid; refine the schedule first")
    return min(candidates, key=lambda c: (costs[c], c))


@lru_cache(maxsize=64)
def nearest_free_index(grid: GridMap) -> np.ndarray:
    """For each occupied cell, the index into ``free_cells`` of its nearest free cell.

    Ties go to the smaller (row, col), i.e. the lower index.
    """
    occ = np.asarray(grid.occupied_cells, dtype=float)
    free = np.asarray(grid.free_cells, dtype=float)
    out = np.empty(len(occ), dtype=int)
    chunk = 512
    for start in range(0, len(occ), chunk):
        block = occ[start:start + chunk]
        d2 = ((block[:, None, :] - free[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = np.argmin(d2, axis=1)
    return out


def attribute_occupied(grid: GridMap, partition: ClusterPartition) -> np.ndarray:
    """Cluster id of every occupied cell, via its nearest free cell."""
    labels = np.asarray(partition.labels)
    return labels[nearest_free_index(grid)]


def cluster_stats(
    belief: BeliefMap,
    partition: ClusterPartition,
    pose: Pose,
    target_class: int,
    grid: GridMap,
    admissible: Optional[list] = None,
    costs: Optional[dict] = None,
) -> list:
    """Entropy, target-posterior and motion-cost scores for the admissible clusters.

    Posterior and cost are max-normalized over the admissible set (zero when
    the maximum is zero). Clusters without attributed occupied cells score 0
    on entropy and posterior.
    """
    if belief.map is not grid:
        raise ValueError("Belief map is bound to a different grid")
    if admissible is None:
        admissible = list(partition.centroids)
    if costs is None:
        costs = path_costs(grid, pose)
    index = {c: j for j, c in enumerate(partition.centroids)}

    owner = attribute_occupied(grid, partition)
    k = partition.k
    counts = np.bincount(owner, minlength=k)
    entropy_sum = np.bincount(owner, weights=belief.entropy(), minlength=k)
    mean_entropy = np.divide(entropy_sum, counts, out=np.zeros(k), where=counts > 0)
    max_post = np.zeros(k)
    np.maximum.at(max_post, owner, belief.target_posterior(target_class))

    rows = []
    for centroid in admissible:
        if centroid not in costs:
            raise UnreachableError(f"Centroid {centroid} is unreachable from {pose}")
        j = index[centroid]
        rows.append((j, centroid, float(mean_entropy[j]), float(max_post[j]), costs[centroid]))

    p_max = max((r[3] for r in rows), default=0.0)
    d_max = max((r[4] for r in rows), default=0)
    stats = []
    for j, centroid, h, p, d in rows:
        stats.append(ClusterStats(
            cluster=j,
            centroid=centroid,
            mean_entropy=h,
            max_target_posterior=p / p_max if p_max > 0 else 0.0,
            motion_cost=d / d_max if d_max > 0 else 0.0,
            raw_posterior=p,
            raw_cost=d,
        ))
    return stats


def utility(stats: ClusterStats, weights: UtilityWeights) -> float:
    return (
        weights.w_H * stats.mean_entropy
        + weights.w_d * (1.0 - stats.motion_cost)
        + weights.w_p * stats.max_target_posterior
    )


def bbums_next(stats: list, weights: UtilityWeights = UtilityWeights()) -> tuple:
    """Centroid of the highest-utility cluster; ties go to the smaller cell."""
    if not stats:
        raise ScheduleError("No admissible cluster to choose from")
    best = min(stats, key=lambda s: (-utility(s, weights), s.centroid))
    return best.centroid
