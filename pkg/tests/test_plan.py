"""Tests for free-space clustering, refinement and path search."""

from collections import deque

import numpy as np
import pytest

from belief_search.plan import (
    RefinementSchedule,
    ScheduleError,
    UnreachableError,
    cluster_free_space,
    dump_partition,
    k_for_level,
    path_costs,
    refine,
    shortest_path,
)
from belief_search.world import GridMap, Heading, MotionPrimitive, Pose, apply_primitive, load_map

CORRIDOR = "\n".join([
    "########",
    "#......#",
    "########",
])


def _random_grid(rng, size=20, density=0.25):
    occ = rng.random((size, size)) < density
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    occ[1, 1] = False
    return GridMap(occ)


def _bfs_oracle(grid, start, goal):
    """Independent breadth-first search over (row, col, heading)."""
    deltas = [(-1, 0), (0, 1), (1, 0), (0, -1)]
    s = (start.cell[0], start.cell[1], int(start.heading))
    dist = {s: 0}
    queue = deque([s])
    while queue:
        r, c, h = queue.popleft()
        if (r, c) == tuple(goal):
            return dist[(r, c, h)]
        nbrs = [(r, c, (h + 3) % 4), (r, c, (h + 1) % 4)]
        dr, dc = deltas[h]
        if not grid.occupied[r + dr, c + dc]:
            nbrs.append((r + dr, c + dc, h))
        for n in nbrs:
            if n not in dist:
                dist[n] = dist[(r, c, h)] + 1
                queue.append(n)
    return None


# ── Clustering ─────────────────────────────────────────────


def test_k_for_level_doubles_and_clamps():
    assert [k_for_level(4, level, 100) for level in range(6)] == [4, 8, 16, 32, 64, 100]
    assert k_for_level(4, 0, 3) == 3


def test_partition_is_complete_and_disjoint():
    rng = np.random.default_rng(0)
    for trial in range(100):
        grid = _random_grid(rng, size=int(rng.integers(6, 14)))
        n = grid.n_free
        k = int(rng.integers(1, n + 1))
        part = cluster_free_space(grid, k, seed=trial)
        assert len(part.labels) == n
        assert part.free_cells == tuple(grid.free_cells)
        assert set(part.labels) == set(range(k))
        assert len(set(part.centroids)) == k
        for j, centroid in enumerate(part.centroids):
            assert grid.is_free(centroid)
            assert part.cluster_of(centroid) == j
        assert sum(part.sizes()) == n


def test_partition_is_deterministic_per_seed():
    grid = load_map("\n".join(["#" * 12] + ["#" + "." * 10 + "#"] * 8 + ["#" * 12]))
    a = cluster_free_space(grid, 5, seed=3)
    cluster_free_space.cache_clear()
    b = cluster_free_space(grid, 5, seed=3)
    assert a == b


def test_partition_with_one_cluster_per_cell():
    grid = load_map(CORRIDOR)
    part = cluster_free_space(grid, grid.n_free)
    assert sorted(part.centroids) == grid.free_cells
    assert part.sizes() == [1] * grid.n_free


def test_two_separated_blocks_form_two_clusters():
    grid = load_map("\n".join([
        "###########",
        "#...###...#",
        "#...###...#",
        "#...###...#",
        "###########",
    ]))
    left = {(r, c) for r in (1, 2, 3) for c in (1, 2, 3)}
    for seed in range(10):
        part = cluster_free_space(grid, 2, seed=seed)
        groups = [{cell for cell, j in part.assignment.items() if j == label} for label in (0, 1)]
        assert left in groups, seed
        assert sorted(part.centroids) == [(2, 2), (2, 8)]


def test_partition_rejects_bad_k():
    grid = load_map(CORRIDOR)
    with pytest.raises(ValueError):
        cluster_free_space(grid, 0)
    with pytest.raises(ValueError):
        cluster_free_space(grid, grid.n_free + 1)


def test_single_cluster_centroid_is_medoid_of_corridor():
    grid = load_map(CORRIDOR)
    part = cluster_free_space(grid, 1)
    # mean column is 3.5; columns 3 and 4 tie and the first member wins
    assert part.centroids == ((1, 3),)


def test_dump_partition_format():
    grid = load_map(CORRIDOR)
    part = cluster_free_space(grid, 2)
    lines = dump_partition(part, grid).splitlines()
    assert lines[0] == " ".join(["#"] * 8)
    ids = lines[1].split()
    assert ids[0] == "#" and ids[-1] == "#"
    assert set(ids[1:-1]) == {"0", "1"}


# ── Refinement ─────────────────────────────────────────────


def test_schedule_follows_doubling_law_on_random_maps():
    rng = np.random.default_rng(1)
    for _ in range(100):
        grid = _random_grid(rng, size=int(rng.integers(5, 10)))
        k0 = int(rng.integers(1, 5))
        schedule = RefinementSchedule.start(grid, k0)
        for level in range(6):
            assert schedule.level <= level
            assert schedule.k == k_for_level(k0, schedule.level, grid.n_free)
            for c in schedule.centroids:
                schedule.mark_visited(c)
            assert schedule.exhausted
            schedule = refine(schedule, grid)
            assert not schedule.visited


def test_refine_before_exhaustion_is_an_error():
    grid = load_map(CORRIDOR)
    schedule = RefinementSchedule.start(grid, 2)
    schedule.mark_visited(schedule.centroids[0])
    with pytest.raises(ScheduleError):
        refine(schedule, grid)


def test_refine_at_saturation_restarts_sweep():
    grid = load_map(CORRIDOR)
    schedule = RefinementSchedule.start(grid, 8)
    assert schedule.k == grid.n_free == 6
    for c in schedule.centroids:
        schedule.mark_visited(c)
    again = refine(schedule, grid)
    assert again.level == schedule.level
    assert again.k == 6
    assert again.visited == set()


def test_mark_visited_ignores_non_centroids():
    grid = load_map(CORRIDOR)
    schedule = RefinementSchedule.start(grid, 1)
    other = next(c for c in grid.free_cells if c not in schedule.centroids)
    assert not schedule.mark_visited(other)
    assert schedule.mark_visited(schedule.centroids[0])
    assert not schedule.mark_visited(schedule.centroids[0])


def test_schedule_rejects_bad_k0():
    with pytest.raises(ValueError):
        RefinementSchedule.start(load_map(CORRIDOR), 0)


# ── Paths ──────────────────────────────────────────────────


def test_shortest_path_counts_turns():
    grid = load_map(CORRIDOR)
    path = shortest_path(grid, Pose((1, 1), Heading.NORTH), (1, 3))
    assert path.primitives == (MotionPrimitive.TURN_RIGHT, MotionPrimitive.MOVE_FORWARD, MotionPrimitive.MOVE_FORWARD)
    assert path.cost == 3
    assert path.end_pose == Pose((1, 3), Heading.EAST)


def test_shortest_path_to_current_cell_is_empty():
    grid = load_map(CORRIDOR)
    path = shortest_path(grid, Pose((1, 2), Heading.WEST), (1, 2))
    assert path.cost == 0


def test_shortest_path_errors():
    grid = load_map("\n".join(["#####", "#.#.#", "#####"]))
    with pytest.raises(UnreachableError):
        shortest_path(grid, Pose((1, 1)), (1, 3))
    with pytest.raises(ValueError):
        shortest_path(grid, Pose((1, 1)), (0, 0))


def test_shortest_path_matches_bfs_oracle():
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(250):
        grid = _random_grid(rng)
        start = Pose(grid.free_cells[int(rng.integers(grid.n_free))], Heading(int(rng.integers(4))))
        goal = grid.free_cells[int(rng.integers(grid.n_free))]
        expected = _bfs_oracle(grid, start, goal)
        if expected is None:
            with pytest.raises(UnreachableError):
                shortest_path(grid, start, goal)
            continue
        path = shortest_path(grid, start, goal)
        assert path.cost == expected
        pose = start
        for prim in path.primitives:
            pose = apply_primitive(grid, pose, prim)
        assert pose.cell == goal
        assert path_costs(grid, start)[goal] == expected
        checked += 1
    assert checked > 100


@pytest.mark.slow
def test_shortest_path_matches_bfs_oracle_at_scale():
    rng = np.random.default_rng(20)
    for _ in range(1000):
        grid = _random_grid(rng)
        start = Pose(grid.free_cells[int(rng.integers(grid.n_free))], Heading(int(rng.integers(4))))
        goal = grid.free_cells[int(rng.integers(grid.n_free))]
        expected = _bfs_oracle(grid, start, goal)
        if expected is not None:
            assert shortest_path(grid, start, goal).cost == expected


def test_path_costs_covers_reachable_cells():
    grid = load_map(CORRIDOR)
    costs = path_costs(grid, Pose((1, 1), Heading.EAST))
    assert costs == {(1, c): c - 1 for c in range(1, 7)}
