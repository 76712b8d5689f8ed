"""Discrete grid world: occupancy map, robot pose, motion primitives, visibility."""

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import cached_property, lru_cache
from typing import Optional, Tuple

import numpy as np

Cell = Tuple[int, int]  # (row, col)

OCCUPIED_CHAR = "#"
FREE_CHAR = "."
DEFAULT_CELL_SIZE = 0.30
DEFAULT_MAX_RANGE = 10


class MapParseError(ValueError):
    """Raised when a map file cannot be parsed. Carries 1-based line/column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(f"{where}{message}")


class Heading(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def delta(self) -> Cell:
        return _HEADING_DELTAS[self]

    def left(self) -> "Heading":
        return Heading((self - 1) % 4)

    def right(self) -> "Heading":
        return Heading((self + 1) % 4)


_HEADING_DELTAS = {
    Heading.NORTH: (-1, 0),
    Heading.EAST: (0, 1),
    Heading.SOUTH: (1, 0),
    Heading.WEST: (0, -1),
}


class MotionPrimitive(Enum):
    MOVE_FORWARD = "move_forward"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"


PRIMITIVES = (MotionPrimitive.MOVE_FORWARD, MotionPrimitive.TURN_LEFT, MotionPrimitive.TURN_RIGHT)


@dataclass(frozen=True, eq=False)
class GridMap:
    """Known 2D occupancy grid. Immutable after construction; hashed by identity."""

    occupied: np.ndarray  # bool, shape (height, width)
    cell_size: float = DEFAULT_CELL_SIZE

    def __post_init__(self):
        grid = np.asarray(self.occupied, dtype=bool)
        if grid.ndim != 2 or grid.size == 0:
            raise ValueError("Occupancy grid must be a non-empty 2D array")
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if grid.all():
            raise ValueError("Map has no free cells")
        if not grid.any():
            raise ValueError("Map has no occupied cells")
        grid = grid.copy()
        grid.setflags(write=False)
        object.__setattr__(self, "occupied", grid)

    @property
    def height(self) -> int:
        return self.occupied.shape[0]

    @property
    def width(self) -> int:
        return self.occupied.shape[1]

    @property
    def shape(self) -> tuple:
        return self.occupied.shape

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.occupied[cell[0], cell[1]]

    def is_occupied(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and bool(self.occupied[cell[0], cell[1]])

    @cached_property
    def free_cells(self) -> list:
        """Free cells in row-major order."""
        return [(int(r), int(c)) for r, c in np.argwhere(~self.occupied)]

    @cached_property
    def occupied_cells(self) -> list:
        """Occupied cells in row-major order."""
        return [(int(r), int(c)) for r, c in np.argwhere(self.occupied)]

    @cached_property
    def occupied_index(self) -> dict:
        return {cell: i for i, cell in enumerate(self.occupied_cells)}

    @property
    def n_free(self) -> int:
        return len(self.free_cells)


@dataclass(frozen=True)
class Pose:
    cell: Cell
    heading: Heading = Heading.NORTH

    def __str__(self) -> str:
        return f"({self.cell[0]},{self.cell[1]}) {self.heading.name.lower()}"


class Outcome(Enum):
    RUNNING = "running"
    SUCCESS = "success"
    HORIZON_EXHAUSTED = "horizon_exhausted"
    FALSE_DECLARATION = "false_declaration"


@dataclass(frozen=True)
class EpisodeSpec:
    map: GridMap
    target_class: int
    target_cell: Cell
    start_pose: Pose
    horizon: int
    confidence_threshold: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if not self.map.is_occupied(self.target_cell):
            raise ValueError(f"Target cell {self.target_cell} is not occupied")
        if not self.map.is_free(self.start_pose.cell):
            raise ValueError(f"Start pose {self.start_pose} is not on a free cell")
        if self.horizon < 1:
            raise ValueError(f"Horizon must be at least 1, got {self.horizon}")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError(f"Confidence threshold must lie in (0, 1), got {self.confidence_threshold}")


@dataclass
class EpisodeState:
    """Per-episode accumulators for the efficiency metrics."""

    pose: Pose
    horizon: int
    primitives_executed: int = 0
    forward_moves: int = 0
    distance_traveled: float = 0.0
    finished: Outcome = Outcome.RUNNING

    @property
    def running(self) -> bool:
        return self.finished is Outcome.RUNNING

    @property
    def budget_spent(self) -> bool:
        return self.primitives_executed >= self.horizon

    def advance(self, grid: GridMap, prim: MotionPrimitive) -> Pose:
        """Execute one primitive and update the counters.

        The caller decides the outcome once the budget is spent, after the
        observation that follows this primitive.
        """
        if not self.running:
            raise RuntimeError(f"Episode already finished ({self.finished.value})")
        if self.budget_spent:
            raise RuntimeError(f"Horizon of {self.horizon} primitives already spent")
        new_pose = apply_primitive(grid, self.pose, prim)
        self.primitives_executed += 1
        if new_pose.cell != self.pose.cell:
            self.forward_moves += 1
            self.distance_traveled = self.forward_moves * grid.cell_size
        self.pose = new_pose
        return new_pose


# ── Map files ──────────────────────────────────────────────


def load_map(text: str) -> GridMap:
    """Parse the ASCII map format.

    An optional first line ``cellsize=<meters>`` sets the resolution; the
    remaining non-blank lines are rows of '#' (occupied) and '.' (free).
    """
    lines = text.splitlines()
    cell_size = DEFAULT_CELL_SIZE
    first = 0
    while first < len(lines) and not lines[first].strip():
        first += 1
    if first < len(lines) and "=" in lines[first]:
        key, _, value = lines[first].partition("=")
        if key.strip().lower() != "cellsize":
            raise MapParseError(f"Unknown header key {key.strip()!r}", first + 1, 1)
        try:
            cell_size = float(value)
        except ValueError:
            raise MapParseError(f"Invalid cell size {value.strip()!r}", first + 1, len(key) + 2)
        if not cell_size > 0:
            raise MapParseError(f"Cell size must be positive, got {cell_size}", first + 1, len(key) + 2)
        first += 1

    rows = []
    width = None
    for lineno, line in enumerate(lines[first:], start=first + 1):
        line = line.rstrip("\r\n").rstrip()
        if not line:
            continue
        if width is None:
            width = len(line)
        elif len(line) != width:
            raise MapParseError(f"Ragged row: expected {width} columns, got {len(line)}", lineno, min(len(line), width) + 1)
        row = []
        for col, ch in enumerate(line, start=1):
            if ch == OCCUPIED_CHAR:
                row.append(True)
            elif ch == FREE_CHAR:
                row.append(False)
            else:
                raise MapParseError(f"Unknown map character {ch!r}", lineno, col)
        rows.append(row)

    if not rows:
        raise MapParseError("Map contains no rows")
    grid = np.array(rows, dtype=bool)
    if grid.all():
        raise MapParseError("Map has no free cells")
    if not grid.any():
        raise MapParseError("Map has no occupied cells")
    return GridMap(grid, cell_size=cell_size)


def dump_map(grid: GridMap) -> str:
    """Serialize a map back to the ASCII format."""
    lines = [f"cellsize={grid.cell_size:g}"]
    for row in grid.occupied:
        lines.append("".join(OCCUPIED_CHAR if v else FREE_CHAR for v in row))
    return "\n".join(lines) + "\n"


# ── Motion ────────────────────────────────────────────────


def apply_primitive(grid: GridMap, pose: Pose, prim: MotionPrimitive) -> Pose:
    """Apply one motion primitive. A blocked forward move leaves the pose unchanged."""
    if prim is MotionPrimitive.TURN_LEFT:
        return Pose(pose.cell, pose.heading.left())
    if prim is MotionPrimitive.TURN_RIGHT:
        return Pose(pose.cell, pose.heading.right())
    dr, dc = pose.heading.delta
    ahead = (pose.cell[0] + dr, pose.cell[1] + dc)
    if grid.is_free(ahead):
        return Pose(ahead, pose.heading)
    return pose


def horizon_for(grid: GridMap, fraction: float = 0.75) -> int:
    """Primitive budget T = floor(fraction * |F|), at least 1."""
    if fraction <= 0:
        raise ValueError(f"Horizon fraction must be positive, got {fraction}")
    return max(1, int(math.floor(fraction * grid.n_free + 1e-9)))


# ── Visibility ─────────────────────────────────────────────


def in_range(dr: int, dc: int, max_range: float) -> bool:
    """Range disc test on center offsets (in cells)."""
    return dr * dr + dc * dc <= (max_range + 0.5) ** 2


def in_wedge(heading: Heading, dr: int, dc: int, fov_deg: float) -> bool:
    """True when the offset lies within ±fov/2 of the heading direction."""
    if dr == 0 and dc == 0:
        return True
    if fov_deg >= 360.0:
        return True
    hr, hc = heading.delta
    cos_angle = (dr * hr + dc * hc) / math.hypot(dr, dc)
    return cos_angle >= math.cos(math.radians(fov_deg / 2.0)) - 1e-12


def supercover_cells(start: Cell, end: Cell) -> list:
    """Cells whose closed square is touched by the segment between the two cell centers.

    Where the segment crosses a grid corner exactly, both side cells are
    included along with the diagonal one.
    """
    r0, c0 = start
    r1, c1 = end
    dr, dc = r1 - r0, c1 - c0
    nr, nc = abs(dr), abs(dc)
    sr = 1 if dr > 0 else -1
    sc = 1 if dc > 0 else -1
    r, c = r0, c0
    cells = [(r, c)]
    ir = ic = 0
    while ir < nr or ic < nc:
        # compare (0.5 + ir) / nr with (0.5 + ic) / nc without division
        decision = (1 + 2 * ir) * nc - (1 + 2 * ic) * nr
        if decision == 0:
            cells.append((r + sr, c))
            cells.append((r, c + sc))
            r += sr
            c += sc
            ir += 1
            ic += 1
        elif decision < 0:
            r += sr
            ir += 1
        else:
            c += sc
            ic += 1
        cells.append((r, c))
    return cells


def line_of_sight(grid: GridMap, start: Cell, end: Cell) -> bool:
    """True when no occupied cell other than ``end`` touches the segment."""
    for cell in supercover_cells(start, end):
        if cell == end:
            continue
        if not grid.in_bounds(cell) or grid.occupied[cell[0], cell[1]]:
            return False
    return True


@lru_cache(maxsize=1 << 16)
def visible_cells(
    grid: GridMap,
    pose: Pose,
    fov_deg: float = 90.0,
    max_range: int = DEFAULT_MAX_RANGE,
) -> frozenset:
    """Cells (free and occupied) seen from the pose.

    A ray is cast from the pose cell center to each candidate cell center
    inside the range disc and the field-of-view wedge; occupied cells stop
    rays but are visible themselves.
    """
    if max_range < 1:
        raise ValueError(f"max_range must be at least 1, got {max_range}")
    r0, c0 = pose.cell
    reach = int(math.floor(max_range + 0.5))
    seen = {pose.cell}
    for r in range(max(0, r0 - reach), min(grid.height, r0 + reach + 1)):
        for c in range(max(0, c0 - reach), min(grid.width, c0 + reach + 1)):
            dr, dc = r - r0, c - c0
            if (dr == 0 and dc == 0) or not in_range(dr, dc, max_range):
                continue
            if not in_wedge(pose.heading, dr, dc, fov_deg):
                continue
            if line_of_sight(grid, pose.cell, (r, c)):
                seen.add((r, c))
    return frozenset(seen)


def cell_distance(grid: GridMap, a: Cell, b: Cell) -> float:
    """Euclidean distance between cell centers, in meters."""
    return math.hypot(a[0] - b[0], a[1] - b[1]) * grid.cell_size


def flood_fill(grid: GridMap, start: Optional[Cell] = None) -> set:
    """Free cells 4-connected to ``start`` (default: first free cell)."""
    if start is None:
        start = grid.free_cells[0]
    seen = {start}
    stack = [start]
    while stack:
        r, c = stack.pop()
        for dr, dc in _HEADING_DELTAS.values():
            nxt = (r + dr, c + dc)
            if nxt not in seen and grid.is_free(nxt):
                seen.add(nxt)
                stack.append(nxt)
    return seen
