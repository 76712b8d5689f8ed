"""Tests for the synthetic detector and evidence vectors."""

import numpy as np
import pytest

from belief_search.percept import (
    CalibrationConfig,
    DetectorModel,
    background_evidence,
    confusion_matrix,
    fit_temperature,
    positive_evidence,
    sample_detections,
    simulate_frame,
    snap_to_occupied,
    synthetic_logits,
    temperature_softmax,
)
from belief_search.world import EpisodeSpec, Heading, Pose, load_map, visible_cells

ROOM = "\n".join([
    "#######",
    "#.....#",
    "#.....#",
    "#..#..#",
    "#.....#",
    "#######",
])


def _make_model(**kwargs):
    kwargs.setdefault("num_classes", 3)
    return DetectorModel(**kwargs)


def _make_spec(grid, pose):
    return EpisodeSpec(map=grid, target_class=1, target_cell=(3, 3), start_pose=pose, horizon=10)


# ── Evidence ───────────────────────────────────────────────


def test_temperature_softmax_matches_definition():
    z = np.array([2.0, 0.5, -1.0])
    p = temperature_softmax(z, CalibrationConfig(temperature=2.0))
    expected = np.exp(z / 2.0) / np.exp(z / 2.0).sum()
    assert np.allclose(p, expected, atol=1e-12)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_temperature_softmax_flattens_with_temperature():
    z = np.array([4.0, 0.0, 0.0])
    sharp = temperature_softmax(z, CalibrationConfig(1.0))
    flat = temperature_softmax(z, CalibrationConfig(100.0))
    assert sharp[0] > flat[0] > 1 / 3


def test_temperature_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        temperature_softmax([1.0, float("nan")], CalibrationConfig())
    with pytest.raises(ValueError):
        temperature_softmax([], CalibrationConfig())
    with pytest.raises(ValueError):
        CalibrationConfig(temperature=0.0)


def test_positive_evidence_matches_formula():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 8))
        p = rng.dirichlet(np.ones(k))
        o = positive_evidence(p)
        assert o.shape == (k + 1,)
        assert np.allclose(o[:k], p * k / (k + 1), atol=1e-12)
        assert o[k] == pytest.approx(1 / (k + 1), abs=1e-12)
        assert o.sum() == pytest.approx(1.0, abs=1e-9)


def test_positive_evidence_hand_case():
    o = positive_evidence([0.7, 0.2, 0.1])
    assert np.allclose(o, [0.525, 0.15, 0.075, 0.25], atol=1e-12)


def test_background_evidence_matches_formula():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = int(rng.integers(1, 8))
        model = _make_model(
            num_classes=k,
            false_negative_rate=float(rng.uniform(0, 0.5)),
            distance_decay=float(rng.uniform(0.05, 2.0)),
        )
        rho = float(rng.uniform(0, 5))
        o = background_evidence(rho, model, k)
        o_bg = (1 - model.false_negative_rate) / (1 + model.distance_decay * rho)
        assert o[k] == pytest.approx(o_bg, abs=1e-12)
        assert np.allclose(o[:k], (1 - o_bg) / k, atol=1e-12)
        assert o.sum() == pytest.approx(1.0, abs=1e-9)


def test_background_evidence_vectorized_and_at_zero_distance():
    model = _make_model(false_negative_rate=0.1, distance_decay=0.5)
    o = background_evidence(np.array([0.0, 2.0]), model, 3)
    assert o.shape == (2, 4)
    assert np.allclose(o[0], [1 / 30, 1 / 30, 1 / 30, 0.9])
    assert o[1, 3] == pytest.approx(0.45)
    with pytest.raises(ValueError):
        background_evidence(-1.0, model, 3)


def test_background_mass_decays_with_distance():
    model = _make_model()
    o = background_evidence(np.linspace(0, 3, 10), model, 3)
    assert np.all(np.diff(o[:, 3]) < 0)


# ── Detector model ─────────────────────────────────────────


def test_confusion_matrix_rows():
    conf = confusion_matrix(4, 0.7)
    assert np.allclose(conf.sum(axis=1), 1.0)
    assert np.allclose(np.diag(conf), 0.7)
    assert conf[0, 1] == pytest.approx(0.1)
    assert confusion_matrix(1).tolist() == [[1.0]]
    with pytest.raises(ValueError):
        confusion_matrix(3, 1.5)


def test_detector_model_validation():
    assert _make_model().confusion.shape == (3, 3)
    with pytest.raises(ValueError):
        DetectorModel()
    with pytest.raises(ValueError):
        _make_model(false_negative_rate=1.0)
    with pytest.raises(ValueError):
        _make_model(distance_decay=0.0)
    with pytest.raises(ValueError):
        DetectorModel(confusion=np.array([[0.5, 0.4], [0.5, 0.5]]))


def test_synthetic_logits_sharpen_up_close():
    model = _make_model(logit_noise=0.0)
    rng = np.random.default_rng(0)
    near = temperature_softmax(synthetic_logits(2, 0.0, model, rng), CalibrationConfig())
    far = temperature_softmax(synthetic_logits(2, 3.0, model, rng), CalibrationConfig())
    assert int(np.argmax(near)) == 2
    assert near[2] > far[2] > 1 / 3


def test_snap_to_occupied_prefers_smaller_cell_on_ties():
    grid = load_map(ROOM)
    assert snap_to_occupied(grid, (3, 3)) == (3, 3)
    assert snap_to_occupied(grid, (2, 3)) == (3, 3)
    # (1, 1) has walls at (0, 1) and (1, 0): the smaller one wins
    assert snap_to_occupied(grid, (1, 1)) == (0, 1)
    with pytest.raises(ValueError):
        snap_to_occupied(grid, (10, 10))


# ── Frames ─────────────────────────────────────────────────


def test_simulate_frame_detects_visible_target():
    grid = load_map(ROOM)
    pose = Pose((3, 1), Heading.EAST)
    model = _make_model(false_negative_rate=0.0, logit_noise=0.0)
    frame = simulate_frame(grid, pose, _make_spec(grid, pose), model, CalibrationConfig(), np.random.default_rng(0))
    assert [cell for cell, _ in frame.detections] == [(3, 3)]
    probs = frame.detections[0][1]
    assert int(np.argmax(probs)) == 1
    assert probs.sum() == pytest.approx(1.0)

    seen = visible_cells(grid, pose, 90.0, model.max_range)
    background = [cell for cell, _ in frame.background_cells]
    assert (3, 3) not in background
    assert background == sorted(background)
    assert set(background) == {c for c in seen if grid.is_occupied(c)} - {(3, 3)}
    for cell, rho in frame.background_cells:
        assert rho == pytest.approx(np.hypot(cell[0] - 3, cell[1] - 1) * 0.30)


def test_simulate_frame_without_target_in_view():
    grid = load_map(ROOM)
    pose = Pose((3, 1), Heading.WEST)
    model = _make_model(false_negative_rate=0.0)
    frame = simulate_frame(grid, pose, _make_spec(grid, pose), model, CalibrationConfig(), np.random.default_rng(0))
    assert frame.detections == []
    assert frame.background_cells


def test_simulate_frame_is_deterministic_per_seed():
    grid = load_map(ROOM)
    pose = Pose((3, 1), Heading.EAST)
    model = _make_model(projection_jitter=0.5)
    spec = _make_spec(grid, pose)

    def run(seed):
        frame = simulate_frame(grid, pose, spec, model, CalibrationConfig(), np.random.default_rng(seed))
        return [(c, p.tolist()) for c, p in frame.detections], frame.background_cells

    assert run(5) == run(5)


def test_false_negative_rate_drops_detections():
    grid = load_map(ROOM)
    pose = Pose((3, 1), Heading.EAST)
    model = _make_model(false_negative_rate=0.5)
    spec = _make_spec(grid, pose)
    rng = np.random.default_rng(11)
    trials = 10000
    hits = sum(
        bool(simulate_frame(grid, pose, spec, model, CalibrationConfig(), rng).detections)
        for _ in range(trials)
    )
    assert abs(hits / trials - 0.5) <= 0.02


def test_detections_are_sharper_up_close():
    grid = load_map("\n".join(["##########", "#........#", "##########"]))
    model = _make_model(false_negative_rate=0.0, max_range=10)
    spec = EpisodeSpec(map=grid, target_class=1, target_cell=(1, 9), start_pose=Pose((1, 1)), horizon=10)
    rng = np.random.default_rng(13)

    def mean_true_class(pose):
        probs = []
        for _ in range(500):
            frame = simulate_frame(grid, pose, spec, model, CalibrationConfig(), rng)
            assert [cell for cell, _ in frame.detections] == [(1, 9)]
            probs.append(frame.detections[0][1][1])
        return float(np.mean(probs))

    near = mean_true_class(Pose((1, 8), Heading.EAST))   # one cell away
    far = mean_true_class(Pose((1, 1), Heading.EAST))    # eight cells away
    assert near > far


def test_clutter_objects_are_detected_too():
    grid = load_map(ROOM)
    pose = Pose((1, 1), Heading.EAST)
    model = _make_model(false_negative_rate=0.0)
    spec = _make_spec(grid, pose)
    frame = simulate_frame(
        grid, pose, spec, model, CalibrationConfig(), np.random.default_rng(0),
        objects={(3, 3): 1, (1, 6): 2},
    )
    assert [cell for cell, _ in frame.detections] == [(1, 6), (3, 3)]
    assert int(np.argmax(frame.detections[0][1])) == 2


# ── Calibration ────────────────────────────────────────────


def test_fit_temperature_recovers_known_temperature():
    rng = np.random.default_rng(0)
    logits = rng.normal(0.0, 3.0, size=(6000, 4))
    probs = temperature_softmax(logits, CalibrationConfig(2.0))
    labels = np.array([rng.choice(4, p=p) for p in probs])
    cal = fit_temperature(logits, labels)
    assert cal.temperature == pytest.approx(2.0, rel=0.1)


def test_sample_detections_shapes():
    model = _make_model()
    logits, labels = sample_detections(model, 50, np.random.default_rng(0))
    assert logits.shape == (50, 3)
    assert labels.shape == (50,)
    assert set(labels.tolist()) <= {0, 1, 2}
    with pytest.raises(ValueError):
        fit_temperature(np.zeros((0, 3)), np.zeros(0))
