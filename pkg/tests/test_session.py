"""Tests for the shared episode executor."""

import numpy as np
import pytest

from belief_search.percept import CalibrationConfig, DetectorModel, confusion_matrix
from belief_search.session import SearchSession
from belief_search.world import EpisodeSpec, Heading, MotionPrimitive, Outcome, Pose, load_map

ROOMS = "\n".join([
    "##########",
    "#....#...#",
    "#....#...#",
    "#........#",
    "#....#...#",
    "##########",
])

CELL = "\n".join([
    "###",
    "#.#",
    "###",
])


def _make_session(text=ROOMS, start=Pose((1, 1), Heading.EAST), target=(1, 5), horizon=50,
                  detector=None, fov_deg=90.0, on_step=None, seed=0, k0=2):
    grid = load_map(text)
    spec = EpisodeSpec(map=grid, target_class=0, target_cell=target, start_pose=start, horizon=horizon)
    return SearchSession(
        spec,
        num_classes=3,
        detector=detector or DetectorModel(num_classes=3),
        calibration=CalibrationConfig(),
        rng=np.random.default_rng(seed),
        k0=k0,
        fov_deg=fov_deg,
        on_step=on_step,
    )


def _sharp_detector():
    return DetectorModel(
        false_negative_rate=0.0, confusion=confusion_matrix(3, 0.99),
        confidence_sharpness=20.0, logit_noise=0.0,
    )


def test_first_observation_happens_at_start_pose():
    calls = []
    session = _make_session(on_step=lambda s, frame: calls.append(s.pose))
    assert calls == [Pose((1, 1), Heading.EAST)]
    assert session.primitives_executed == 0
    assert not np.allclose(session.belief.params, 1.0)


def test_step_observes_after_every_primitive():
    calls = []
    session = _make_session(on_step=lambda s, frame: calls.append(s.primitives_executed))
    session.step(MotionPrimitive.MOVE_FORWARD)
    session.step(MotionPrimitive.TURN_LEFT)
    assert calls == [0, 1, 2]
    assert session.pose == Pose((1, 2), Heading.NORTH)
    assert session.state.distance_traveled == pytest.approx(0.30)


def test_horizon_exhaustion_stops_the_episode():
    session = _make_session(horizon=3, target=(1, 5))
    while session.running:
        session.step(MotionPrimitive.TURN_LEFT)
    assert session.outcome is Outcome.HORIZON_EXHAUSTED
    assert session.primitives_executed == 3
    with pytest.raises(RuntimeError):
        session.step(MotionPrimitive.TURN_LEFT)


def test_admissible_goals_are_unvisited_and_reachable():
    session = _make_session()
    goals = session.admissible()
    assert goals
    costs = session.costs()
    for g in goals:
        assert g in costs
        assert g not in session.schedule.visited


def test_travel_marks_goal_visited():
    session = _make_session(horizon=200)
    goal = session.admissible()[0]
    executed = session.travel_to(goal)
    assert executed > 0
    assert goal in session.schedule.visited
    if session.running:
        assert session.pose.cell == goal


def test_refinement_happens_once_level_is_swept():
    session = _make_session(horizon=500, k0=1)
    assert session.schedule.k == 1
    for _ in range(3):
        if not session.running:
            break
        goals = session.admissible()
        session.travel_to(goals[0])
    assert session.refinements >= 1 or not session.running


def test_single_free_cell_holds_and_finds_adjacent_target():
    session = _make_session(
        text=CELL, start=Pose((1, 1), Heading.NORTH), target=(0, 1), horizon=100,
        detector=_sharp_detector(), fov_deg=360.0,
    )
    while session.running:
        assert session.admissible() == []
        session.hold()
    assert session.outcome is Outcome.SUCCESS
    assert session.declared_cell == (0, 1)
    assert session.primitives_executed <= 25
