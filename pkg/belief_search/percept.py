"""Synthetic calibrated detector and evidence construction."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch.nn import functional as F

from .world import DEFAULT_MAX_RANGE, GridMap, Pose, cell_distance, visible_cells


@dataclass
class DetectorModel:
    """Parameters of the synthetic detector.

    ``distance_decay`` is λ per meter of robot-to-cell distance.
    ``confusion[c]`` weights the logits emitted for an object of class c.
    """

    false_negative_rate: float = 0.1
    distance_decay: float = 0.5
    confusion: Optional[np.ndarray] = None
    confidence_sharpness: float = 8.0
    max_range: int = DEFAULT_MAX_RANGE
    logit_noise: float = 0.5
    projection_jitter: float = 0.0
    num_classes: int = 0

    def __post_init__(self):
        if not 0.0 <= self.false_negative_rate < 1.0:
            raise ValueError(f"false_negative_rate must lie in [0, 1), got {self.false_negative_rate}")
        if self.distance_decay <= 0:
            raise ValueError(f"distance_decay must be positive, got {self.distance_decay}")
        if self.confidence_sharpness <= 0:
            raise ValueError(f"confidence_sharpness must be positive, got {self.confidence_sharpness}")
        if self.max_range < 1:
            raise ValueError(f"max_range must be at least 1, got {self.max_range}")
        if self.logit_noise < 0:
            raise ValueError(f"logit_noise must be nonnegative, got {self.logit_noise}")
        if not 0.0 <= self.projection_jitter <= 1.0:
            raise ValueError(f"projection_jitter must lie in [0, 1], got {self.projection_jitter}")
        if self.confusion is None:
            if self.num_classes < 1:
                raise ValueError("DetectorModel needs a confusion matrix or num_classes")
            self.confusion = confusion_matrix(self.num_classes)
        conf = np.asarray(self.confusion, dtype=float)
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
            raise ValueError(f"Confusion matrix must be square, got shape {conf.shape}")
        if (conf < 0).any() or not np.allclose(conf.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("Confusion matrix rows must be nonnegative and sum to 1")
        self.confusion = conf
        self.num_classes = conf.shape[0]


@dataclass
class CalibrationConfig:
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"Temperature must be positive, got {self.temperature}")


@dataclass
class Frame:
    """One time step of mapped evidence."""

    detections: list = field(default_factory=list)        # [(cell, probs)]
    background_cells: list = field(default_factory=list)  # [(cell, rho meters)]


def confusion_matrix(num_classes: int, accuracy: float = 0.8) -> np.ndarray:
    """Row-stochastic matrix with ``accuracy`` on the diagonal, rest spread evenly."""
    if num_classes < 1:
        raise ValueError(f"Need at least one class, got {num_classes}")
    if not 0.0 < accuracy <= 1.0:
        raise ValueError(f"accuracy must lie in (0, 1], got {accuracy}")
    if num_classes == 1:
        return np.ones((1, 1))
    off = (1.0 - accuracy) / (num_classes - 1)
    conf = np.full((num_classes, num_classes), off)
    np.fill_diagonal(conf, accuracy)
    return conf


# ── Evidence ───────────────────────────────────────────────


def temperature_softmax(logits, cal: CalibrationConfig) -> np.ndarray:
    """Class probabilities proportional to exp(logits / T)."""
    z = np.asarray(logits, dtype=float)
    if z.size == 0:
        raise ValueError("Need at least one logit")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"Non-finite logits: {z}")
    z = z / cal.temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def positive_evidence(p) -> np.ndarray:
    """Evidence from a detection: object mass rescaled by K/(K+1), background fixed at 1/(K+1)."""
    p = np.asarray(p, dtype=float)
    k = p.shape[-1]
    o = np.empty(p.shape[:-1] + (k + 1,))
    o[..., :k] = p * (k / (k + 1.0))
    o[..., k] = 1.0 / (k + 1.0)
    return o


def background_evidence(distance, model: DetectorModel, num_classes: int) -> np.ndarray:
    """Evidence from a visible occupied cell without a detection.

    Background mass (1 - η) / (1 + λρ) decays with distance; the remainder is
    spread evenly over the object classes. Vectorized over ``distance``.
    """
    rho = np.asarray(distance, dtype=float)
    if np.any(rho < 0):
        raise ValueError("Distance must be nonnegative")
    o_bg = (1.0 - model.false_negative_rate) / (1.0 + model.distance_decay * rho)
    o = np.empty(rho.shape + (num_classes + 1,))
    o[..., :num_classes] = ((1.0 - o_bg) / num_classes)[..., None]
    o[..., num_classes] = o_bg
    return o


def snap_to_occupied(grid: GridMap, cell) -> tuple:
    """Nearest occupied cell by center distance; ties go to the smaller (row, col)."""
    if not grid.in_bounds(cell):
        raise ValueError(f"Cell {cell} is outside the map")
    if grid.is_occupied(cell):
        return tuple(cell)
    occ = np.asarray(grid.occupied_cells)
    if occ.size == 0:
        raise ValueError("Map has no occupied cells")
    d2 = (occ[:, 0] - cell[0]) ** 2 + (occ[:, 1] - cell[1]) ** 2
    r, c = occ[int(np.argmin(d2))]
    return (int(r), int(c))


# ── Synthetic detector ─────────────────────────────────────


def synthetic_logits(true_class: int, rho: float, model: DetectorModel, rng: np.random.Generator) -> np.ndarray:
    """Confusion-weighted logits whose sharpness falls off with distance."""
    scale = model.confidence_sharpness / (1.0 + model.distance_decay * rho)
    logits = scale * model.confusion[true_class]
    if model.logit_noise > 0:
        logits = logits + rng.normal(0.0, model.logit_noise, size=model.num_classes)
    return logits


def _jitter(grid: GridMap, cell, rng: np.random.Generator) -> tuple:
    """Displace a projected detection to a random in-bounds 4-neighbour and snap it back."""
    r, c = cell
    options = [(r + dr, c + dc) for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1))]
    options = [o for o in options if grid.in_bounds(o)]
    moved = options[int(rng.integers(len(options)))]
    return snap_to_occupied(grid, moved)


def simulate_frame(
    grid: GridMap,
    pose: Pose,
    spec,
    model: DetectorModel,
    cal: CalibrationConfig,
    rng: np.random.Generator,
    objects: Optional[dict] = None,
    fov_deg: float = 90.0,
) -> Frame:
    """Detections and background cells for one observation from ``pose``.

    ``objects`` maps occupied cells to ground-truth class indices; it defaults
    to the episode target alone. Cells are processed in row-major order so the
    RNG stream is consumed deterministically.
    """
    if objects is None:
        objects = {spec.target_cell: spec.target_class}
    seen = visible_cells(grid, pose, fov_deg, model.max_range)
    occupied_seen = sorted(cell for cell in seen if grid.occupied[cell[0], cell[1]])

    detections = []
    for cell in occupied_seen:
        cls = objects.get(cell)
        if cls is None:
            continue
        if rng.random() >= 1.0 - model.false_negative_rate:
            continue
        rho = cell_distance(grid, pose.cell, cell)
        probs = temperature_softmax(synthetic_logits(cls, rho, model, rng), cal)
        mapped = cell
        if model.projection_jitter > 0 and rng.random() < model.projection_jitter:
            mapped = _jitter(grid, cell, rng)
        detections.append((mapped, probs))
    detections.sort(key=lambda d: d[0])

    mapped_cells = {cell for cell, _ in detections}
    background = [
        (cell, cell_distance(grid, pose.cell, cell))
        for cell in occupied_seen
        if cell not in mapped_cells
    ]
    return Frame(detections=detections, background_cells=background)


# ── Calibration ────────────────────────────────────────────


def sample_detections(
    model: DetectorModel,
    n: int,
    rng: np.random.Generator,
    cell_size: float = 0.30,
) -> tuple:
    """Labelled synthetic logits at uniformly drawn classes and distances."""
    labels = rng.integers(model.num_classes, size=n)
    rhos = rng.uniform(0.0, model.max_range * cell_size, size=n)
    logits = np.stack([synthetic_logits(int(c), float(r), model, rng) for c, r in zip(labels, rhos)])
    return logits, labels


def fit_temperature(logits, labels, max_iter: int = 100) -> CalibrationConfig:
    """Fit the softmax temperature by minimizing negative log-likelihood."""
    x = torch.as_tensor(np.asarray(logits), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ValueError("Need a non-empty (n, K) logit array and n labels")
    log_t = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.LBFGS([log_t], lr=0.1, max_iter=max_iter, line_search_fn="strong_wolfe")

    def closure():
        optimizer.zero_grad()
        loss = F.cross_entropy(x / log_t.exp(), y)
        loss.backward()
        return loss

    optimizer.step(closure)
    return CalibrationConfig(temperature=float(log_t.exp().item()))
