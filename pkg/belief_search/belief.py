"""Dirichlet belief map over occupied cells with Kaplan fusion."""

import csv
import math
from pathlib import Path

import numpy as np

from .percept import DetectorModel, Frame, background_evidence, positive_evidence
from .world import EpisodeSpec, GridMap, Outcome

# Above this any cell's parameters are rescaled by their minimum entry.
RESCALE_LIMIT = 1e12


class BeliefMap:
    """Per-occupied-cell Dirichlet parameters over K classes plus background.

    ``params[i]`` belongs to ``map.occupied_cells[i]`` (row-major order);
    the last column is the background class.
    """

    def __init__(self, grid: GridMap, num_classes: int, params: np.ndarray = None):
        if num_classes < 1:
            raise ValueError(f"Need at least one object class, got {num_classes}")
        self.map = grid
        self.num_classes = num_classes
        n = len(grid.occupied_cells)
        if params is None:
            params = np.ones((n, num_classes + 1))
        params = np.array(params, dtype=float)
        if params.shape != (n, num_classes + 1):
            raise ValueError(f"Expected parameters of shape {(n, num_classes + 1)}, got {params.shape}")
        if not (np.all(params > 0) and np.all(np.isfinite(params))):
            raise ValueError("Dirichlet parameters must be positive and finite")
        self.params = params

    def __len__(self) -> int:
        return self.params.shape[0]

    def copy(self) -> "BeliefMap":
        return BeliefMap(self.map, self.num_classes, self.params.copy())

    def beta(self, cell) -> np.ndarray:
        return self.params[self.map.occupied_index[tuple(cell)]]

    def posterior(self) -> np.ndarray:
        """Posterior means for every occupied cell, shape (n, K+1)."""
        return self.params / self.params.sum(axis=1, keepdims=True)

    def target_posterior(self, target_class: int) -> np.ndarray:
        return self.params[:, target_class] / self.params.sum(axis=1)

    def entropy(self) -> np.ndarray:
        return normalized_entropy(self.posterior())


def init_uniform(grid: GridMap, num_classes: int) -> BeliefMap:
    """Uniform prior: every occupied cell gets β = 1."""
    return BeliefMap(grid, num_classes)


def posterior_mean(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    return beta / beta.sum(axis=-1, keepdims=True)


def kaplan_update(beta, o) -> np.ndarray:
    """Conservative Dirichlet fusion of an observation simplex vector.

    β⁺_k = β_k (Σ_j β_j o_j + o_k) / (Σ_j β_j o_j + min_i o_i). Broadcasts
    over leading axes, one observation per row.
    """
    beta = np.asarray(beta, dtype=float)
    o = np.asarray(o, dtype=float)
    s = (beta * o).sum(axis=-1, keepdims=True)
    updated = beta * (s + o) / (s + o.min(axis=-1, keepdims=True))
    rows = np.atleast_2d(updated)
    big = rows.max(axis=1) > RESCALE_LIMIT
    if big.any():
        rows[big] = rows[big] / rows[big].min(axis=1, keepdims=True)
    return updated


def apply_frame(belief: BeliefMap, frame: Frame, model: DetectorModel) -> BeliefMap:
    """Fuse one frame in place: detections first, then background cells."""
    index = belief.map.occupied_index
    # several detections may map to one cell, so these go one at a time
    for cell, probs in frame.detections:
        i = index[cell]
        belief.params[i] = kaplan_update(belief.params[i], positive_evidence(probs))

    if frame.background_cells:
        rows = np.fromiter((index[cell] for cell, _ in frame.background_cells), dtype=int)
        rho = np.fromiter((d for _, d in frame.background_cells), dtype=float)
        o = background_evidence(rho, model, belief.num_classes)
        belief.params[rows] = kaplan_update(belief.params[rows], o)
    return belief


def normalized_entropy(posterior) -> np.ndarray:
    """Categorical entropy divided by ln(K+1); zero-probability entries contribute 0."""
    pi = np.asarray(posterior, dtype=float)
    n = pi.shape[-1]
    if n < 2:
        return np.zeros(pi.shape[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pi > 0, pi * np.log(np.where(pi > 0, pi, 1.0)), 0.0)
    return np.clip(-terms.sum(axis=-1) / math.log(n), 0.0, 1.0)


def check_termination(belief: BeliefMap, spec: EpisodeSpec) -> tuple:
    """Threshold test on the target posterior.

    Returns ``(outcome, declared_cell)``; the declared cell is the row-major
    first argmax, or None while running.
    """
    post = belief.target_posterior(spec.target_class)
    i = int(np.argmax(post))
    if post[i] < spec.confidence_threshold:
        return Outcome.RUNNING, None
    cell = belief.map.occupied_cells[i]
    if cell == tuple(spec.target_cell):
        return Outcome.SUCCESS, cell
    return Outcome.FALSE_DECLARATION, cell


# ── Snapshots ──────────────────────────────────────────────


def target_posterior_grid(belief: BeliefMap, target_class: int) -> np.ndarray:
    """H×W grid of the target posterior, zero on free cells."""
    grid = np.zeros(belief.map.shape)
    occ = np.asarray(belief.map.occupied_cells)
    grid[occ[:, 0], occ[:, 1]] = belief.target_posterior(target_class)
    return grid


def entropy_grid(belief: BeliefMap) -> np.ndarray:
    grid = np.zeros(belief.map.shape)
    occ = np.asarray(belief.map.occupied_cells)
    grid[occ[:, 0], occ[:, 1]] = belief.entropy()
    return grid


def write_snapshot(path: Path, grid: np.ndarray) -> Path:
    """Write a posterior grid as CSV, one map row per line."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([f"{v:.6f}" for v in row])
    return path
