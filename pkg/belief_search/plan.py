"""Free-space clustering with progressive refinement, and primitive-level path search."""

from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .world import GridMap, Heading, MotionPrimitive, Pose, apply_primitive

MAX_KMEANS_ROUNDS = 100


class UnreachableError(RuntimeError):
    pass


class ScheduleError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterPartition:
    """Assignment of every free cell to one of ``k`` clusters.

    ``labels[i]`` is the cluster of ``map.free_cells[i]``; ``centroids[j]`` is
    the free cell used as viewpoint for cluster j.
    """

    level: int
    k: int
    labels: tuple
    centroids: tuple
    free_cells: tuple = field(repr=False)

    @property
    def assignment(self) -> dict:
        return dict(zip(self.free_cells, self.labels))

    def cluster_of(self, cell) -> int:
        return self.labels[self.free_cells.index(tuple(cell))]

    def sizes(self) -> list:
        return np.bincount(np.asarray(self.labels), minlength=self.k).tolist()


def k_for_level(k0: int, level: int, n_free: int) -> int:
    """Cluster count at a refinement level: min(2^level * k0, |F|)."""
    return min((2 ** level) * k0, n_free)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return (
        (points ** 2).sum(axis=1)[:, None]
        + (centers ** 2).sum(axis=1)[None, :]
        - 2.0 * points @ centers.T
    )


@lru_cache(maxsize=256)
def cluster_free_space(grid: GridMap, k: int, seed: int = 0, level: int = 0) -> ClusterPartition:
    """Deterministic k-means over free-cell centers.

    Seeding: the first center is a free cell drawn with ``seed``, each further
    center the free cell farthest from those chosen (lowest row-major index on
    ties). Lloyd rounds run to an assignment fixpoint or 100 rounds; each
    cluster's centroid then snaps to its member nearest the coordinate mean.
    """
    free = grid.free_cells
    n = len(free)
    if not 1 <= k <= n:
        raise ValueError(f"Cluster count must lie in [1, {n}], got {k}")
    points = np.asarray(free, dtype=float)

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    min_d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, ((points - points[nxt]) ** 2).sum(axis=1))
    centers = points[chosen].copy()

    labels = None
    for _ in range(MAX_KMEANS_ROUNDS):
        d2 = _sq_dists(points, centers)
        new_labels = np.argmin(d2, axis=1)
        counts = np.bincount(new_labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the point worst served by its center
            worst = int(np.argmax(d2[np.arange(n), new_labels] * (counts[new_labels] > 1)))
            counts[new_labels[worst]] -= 1
            new_labels[worst] = j
            counts[j] = 1
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        sums = np.zeros((k, 2))
        np.add.at(sums, labels, points)
        centers = sums / np.bincount(labels, minlength=k)[:, None]

    centroids = []
    for j in range(k):
        members = np.flatnonzero(labels == j)
        mean = points[members].mean(axis=0)
        best = members[int(np.argmin(((points[members] - mean) ** 2).sum(axis=1)))]
        centroids.append(free[best])

    return ClusterPartition(
        level=level,
        k=k,
        labels=tuple(int(v) for v in labels),
        centroids=tuple(centroids),
        free_cells=tuple(free),
    )


@dataclass
class RefinementSchedule:
    """Current refinement level, its partition, and the centroids visited so far."""

    k0: int
    level: int
    partition: ClusterPartition
    visited: set = field(default_factory=set)
    seed: int = 0

    @classmethod
    def start(cls, grid: GridMap, k0: int, seed: int = 0) -> "RefinementSchedule":
        if k0 < 1:
            raise ValueError(f"k0 must be at least 1, got {k0}")
        k = k_for_level(k0, 0, grid.n_free)
        return cls(k0=k0, level=0, partition=cluster_free_space(grid, k, seed, 0), seed=seed)

    @property
    def k(self) -> int:
        return self.partition.k

    @property
    def centroids(self) -> tuple:
        return self.partition.centroids

    @property
    def unvisited(self) -> list:
        return [c for c in self.partition.centroids if c not in self.visited]

    @property
    def exhausted(self) -> bool:
        return not self.unvisited

    def mark_visited(self, cell) -> bool:
        cell = tuple(cell)
        if cell in self.partition.centroids and cell not in self.visited:
            self.visited.add(cell)
            return True
        return False


def refine(schedule: RefinementSchedule, grid: GridMap) -> RefinementSchedule:
    """Move to the next level once every centroid of the current one is visited.

    At saturation (k = |F|) the level stays and the visited set restarts.
    """
    if not schedule.exhausted:
        raise ScheduleError(
            f"Cannot refine level {schedule.level}: {len(schedule.unvisited)} centroid(s) not yet visited"
        )
    if schedule.k >= grid.n_free:
        return RefinementSchedule(schedule.k0, schedule.level, schedule.partition, set(), schedule.seed)
    level = schedule.level + 1
    k = k_for_level(schedule.k0, level, grid.n_free)
    partition = cluster_free_space(grid, k, schedule.seed, level)
    return RefinementSchedule(schedule.k0, level, partition, set(), schedule.seed)


def dump_partition(partition: ClusterPartition, grid: GridMap) -> str:
    """Per-cell cluster ids, whitespace separated, '#' on occupied cells."""
    ids = partition.assignment
    width = len(str(max(partition.k - 1, 0)))
    lines = []
    for r in range(grid.height):
        row = []
        for c in range(grid.width):
            if grid.occupied[r, c]:
                row.append("#".rjust(width))
            else:
                row.append(str(ids[(r, c)]).rjust(width))
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


# ── Path search ────────────────────────────────────────────


@dataclass(frozen=True)
class Path:
    primitives: tuple
    end_pose: Pose

    @property
    def cost(self) -> int:
        return len(self.primitives)

    def __len__(self) -> int:
        return len(self.primitives)


_STEP_ORDER = (MotionPrimitive.MOVE_FORWARD, MotionPrimitive.TURN_LEFT, MotionPrimitive.TURN_RIGHT)


def _successors(grid: GridMap, pose: Pose):
    for prim in _STEP_ORDER:
        nxt = apply_primitive(grid, pose, prim)
        if nxt != pose:
            yield prim, nxt


def shortest_path(grid: GridMap, start: Pose, goal) -> Path:
    """Minimum primitive-count path from ``start`` to any heading at ``goal``.

    Breadth-first over (cell, heading); expansion order forward, left, right
    fixes the path among equal-cost alternatives.
    """
    goal = tuple(goal)
    if not grid.is_free(goal):
        raise ValueError(f"Goal {goal} is not a free cell")
    if start.cell == goal:
        return Path((), start)

    parents = {start: None}
    queue = deque([start])
    while queue:
        pose = queue.popleft()
        for prim, nxt in _successors(grid, pose):
            if nxt in parents:
                continue
            parents[nxt] = (pose, prim)
            if nxt.cell == goal:
                steps = []
                node = nxt
                while parents[node] is not None:
                    prev, p = parents[node]
                    steps.append(p)
                    node = prev
                return Path(tuple(reversed(steps)), nxt)
            queue.append(nxt)
    raise UnreachableError(f"Goal {goal} is unreachable from {start}")


def path_costs(grid: GridMap, start: Pose) -> dict:
    """Minimum primitive count from ``start`` to every reachable free cell."""
    costs = {start.cell: 0}
    dist = {start: 0}
    queue = deque([start])
    while queue:
        pose = queue.popleft()
        d = dist[pose] + 1
        for _, nxt in _successors(grid, pose):
            if nxt in dist:
                continue
            dist[nxt] = d
            costs.setdefault(nxt.cell, d)
            queue.append(nxt)
    return costs
