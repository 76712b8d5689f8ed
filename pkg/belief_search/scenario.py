"""Scenario files, procedural maps and start-pose suites."""

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .percept import CalibrationConfig, DetectorModel, confusion_matrix
from .policies import UtilityWeights
from .rl import TrainConfig
from .session import SearchSession
from .world import GridMap, Heading, MapParseError, Pose, flood_fill, load_map

DATA_DIR = Path(__file__).parent / "data"
SCENARIO_SUFFIX = ".scenario"


class ScenarioError(ValueError):
    pass


class MapGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Placement:
    class_index: int
    class_name: str
    cell: tuple


@dataclass
class ScenarioSpec:
    name: str
    map: GridMap
    class_names: list
    train_targets: list
    eval_targets: list
    clutter: list = field(default_factory=list)
    detector: DetectorModel = None
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    weights: UtilityWeights = field(default_factory=UtilityWeights)
    training: TrainConfig = field(default_factory=TrainConfig)
    k0: int = 4
    cluster_seed: int = 0
    fov_deg: float = 90.0
    start_poses: int = 100
    suite_seed: int = 0
    horizon_fraction: float = 0.75
    threshold: float = 0.8
    seed: int = 0
    source_text: str = ""
    map_text: str = ""

    def __post_init__(self):
        if self.detector is None:
            self.detector = DetectorModel(num_classes=self.num_classes)
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def objects(self) -> dict:
        """Ground-truth class of every object-bearing cell (all placements present)."""
        return {p.cell: p.class_index for p in self.train_targets + self.eval_targets + self.clutter}

    def validate(self):
        if self.num_classes < 1:
            raise ScenarioError("Scenario needs at least one object class")
        if self.detector.num_classes != self.num_classes:
            raise ScenarioError(
                f"Detector confusion matrix covers {self.detector.num_classes} classes, "
                f"scenario defines {self.num_classes}"
            )
        placements = self.train_targets + self.eval_targets + self.clutter
        cells = [p.cell for p in placements]
        if len(set(cells)) != len(cells):
            raise ScenarioError("Two objects share one cell")
        for p in placements:
            if not self.map.is_occupied(p.cell):
                raise ScenarioError(f"Object {p.class_name} at {p.cell} is not on an occupied cell")
        targets = self.train_targets + self.eval_targets
        target_classes = [p.class_index for p in targets]
        if len(set(target_classes)) != len(target_classes):
            raise ScenarioError("Each target class may be placed only once")
        train_cells = {p.cell for p in self.train_targets}
        for p in self.eval_targets:
            if p.cell in train_cells or p.class_index in {t.class_index for t in self.train_targets}:
                raise ScenarioError(f"Evaluation target {p.class_name} overlaps the training set")
        for p in self.clutter:
            if p.class_index in target_classes:
                raise ScenarioError(f"Clutter object {p.class_name} shares a class with a target")
        for p in targets:
            if not _borders_free(self.map, p.cell):
                raise ScenarioError(f"Target {p.class_name} at {p.cell} has no free neighbour and can never be seen")
        if self.k0 < 1:
            raise ScenarioError(f"k0 must be at least 1, got {self.k0}")
        if not 0.0 < self.threshold < 1.0:
            raise ScenarioError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.horizon_fraction <= 0:
            raise ScenarioError(f"horizon_fraction must be positive, got {self.horizon_fraction}")
        if self.start_poses < 1:
            raise ScenarioError(f"start_poses must be at least 1, got {self.start_poses}")

    def placement(self, class_name: str) -> Placement:
        for p in self.train_targets + self.eval_targets:
            if p.class_name == class_name:
                return p
        raise ScenarioError(f"No target placement for class {class_name!r}")

    def new_session(self, spec, rng: np.random.Generator, on_step=None) -> SearchSession:
        return SearchSession(
            spec,
            num_classes=self.num_classes,
            detector=self.detector,
            calibration=self.calibration,
            rng=rng,
            objects=self.objects,
            k0=self.k0,
            cluster_seed=self.cluster_seed,
            fov_deg=self.fov_deg,
            on_step=on_step,
        )

    def digest(self) -> str:
        """SHA-256 over the scenario and map text."""
        h = hashlib.sha256()
        h.update(self.source_text.encode("utf-8"))
        h.update(b"\0")
        h.update(self.map_text.encode("utf-8"))
        return h.hexdigest()


def _borders_free(grid: GridMap, cell) -> bool:
    r, c = cell
    return any(grid.is_free((r + dr, c + dc)) for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1)))


# ── Parsing ────────────────────────────────────────────────


def resolve_scenario(ref) -> Path:
    """A scenario path, or the stem of a bundled scenario."""
    path = Path(ref)
    if path.is_file():
        return path
    bundled = DATA_DIR / f"{ref}{SCENARIO_SUFFIX}"
    if bundled.is_file():
        return bundled
    names = ", ".join(sorted(p.stem for p in DATA_DIR.glob(f"*{SCENARIO_SUFFIX}")))
    raise FileNotFoundError(f"No scenario {ref!r} (bundled: {names})")


def _placements(value: str, class_index: dict, key: str) -> list:
    """Parse ``name row col; name row col; ...``."""
    out = []
    for item in value.split(";"):
        item = item.strip()
        if not item:
            continue
        parts = item.split()
        if len(parts) != 3:
            raise ScenarioError(f"[objects] {key}: expected 'class row col', got {item!r}")
        name, row, col = parts
        if name not in class_index:
            raise ScenarioError(f"[objects] {key}: unknown class {name!r}")
        try:
            cell = (int(row), int(col))
        except ValueError:
            raise ScenarioError(f"[objects] {key}: bad cell in {item!r}")
        out.append(Placement(class_index[name], name, cell))
    return out


def _matrix(value: str) -> np.ndarray:
    rows = [r.split() for r in value.split(";") if r.strip()]
    try:
        return np.array([[float(v) for v in row] for row in rows])
    except ValueError:
        raise ScenarioError(f"Bad confusion matrix {value!r}")


def parse_scenario(text: str, base_dir: Optional[Path] = None, name: str = "scenario") -> ScenarioSpec:
    """Build a ScenarioSpec from scenario-file text.

    Map paths are resolved relative to ``base_dir`` (default: bundled data).
    """
    base_dir = Path(base_dir) if base_dir is not None else DATA_DIR
    cfg = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cfg.read_string(text)
    except configparser.Error as e:
        raise ScenarioError(f"Cannot parse scenario: {e}")
    for section in ("scenario", "objects"):
        if not cfg.has_section(section):
            raise ScenarioError(f"Scenario is missing the [{section}] section")
    for section in ("detector", "policy", "training", "evaluation"):
        if not cfg.has_section(section):
            cfg.add_section(section)

    try:
        sc = cfg["scenario"]
        name = sc.get("name", name)
        map_ref = sc.get("map")
        if not map_ref:
            raise ScenarioError("[scenario] needs a 'map' entry")
        map_path = base_dir / map_ref
        if not map_path.is_file():
            raise FileNotFoundError(f"Map file not found: {map_path}")
        map_text = map_path.read_text(encoding="utf-8")
        grid = load_map(map_text)
        class_names = [c.strip() for c in sc.get("classes", "").split(",") if c.strip()]
        if len(set(class_names)) != len(class_names):
            raise ScenarioError("Duplicate class names")
        class_index = {c: i for i, c in enumerate(class_names)}

        ob = cfg["objects"]
        train = _placements(ob.get("train", ""), class_index, "train")
        evaluation = _placements(ob.get("eval", ""), class_index, "eval")
        clutter = _placements(ob.get("clutter", ""), class_index, "clutter")

        det = cfg["detector"]
        confusion = det.get("confusion")
        detector = DetectorModel(
            false_negative_rate=det.getfloat("false_negative_rate", 0.1),
            distance_decay=det.getfloat("distance_decay", 0.5),
            confusion=_matrix(confusion) if confusion else confusion_matrix(
                len(class_names), det.getfloat("accuracy", 0.8)
            ),
            confidence_sharpness=det.getfloat("confidence_sharpness", 8.0),
            max_range=det.getint("max_range", 10),
            logit_noise=det.getfloat("logit_noise", 0.5),
            projection_jitter=det.getfloat("projection_jitter", 0.0),
        )
        calibration = CalibrationConfig(temperature=det.getfloat("temperature", 1.0))

        pol = cfg["policy"]
        weights = UtilityWeights(
            w_H=pol.getfloat("w_H", 0.4),
            w_d=pol.getfloat("w_d", 0.5),
            w_p=pol.getfloat("w_p", 0.1),
        )

        tr = cfg["training"]
        training = TrainConfig(
            gamma=tr.getfloat("gamma", 0.99),
            learning_rate=tr.getfloat("learning_rate", 1e-3),
            batch_size=tr.getint("batch_size", 64),
            buffer_capacity=tr.getint("buffer_capacity", 50000),
            target_sync_every=tr.getint("target_sync_every", 2000),
            episodes=tr.getint("episodes", 5000),
            epsilon_start=tr.getfloat("epsilon_start", 1.0),
            epsilon_end=tr.getfloat("epsilon_end", 0.05),
            epsilon_fraction=tr.getfloat("epsilon_fraction", 0.8),
            hidden_channels=tr.getint("hidden_channels", 32),
        )

        ev = cfg["evaluation"]
        return ScenarioSpec(
            name=name,
            map=grid,
            class_names=class_names,
            train_targets=train,
            eval_targets=evaluation,
            clutter=clutter,
            detector=detector,
            calibration=calibration,
            weights=weights,
            training=training,
            k0=pol.getint("k0", 4),
            cluster_seed=pol.getint("cluster_seed", 0),
            fov_deg=det.getfloat("fov_deg", 90.0),
            start_poses=ev.getint("start_poses", 100),
            suite_seed=ev.getint("suite_seed", 0),
            horizon_fraction=ev.getfloat("horizon_fraction", 0.75),
            threshold=ev.getfloat("threshold", 0.8),
            seed=ev.getint("seed", 0),
            source_text=text,
            map_text=map_text,
        )
    except ValueError as e:
        if isinstance(e, (ScenarioError, MapParseError)):
            raise
        raise ScenarioError(f"Invalid scenario {name!r}: {e}")


def load_scenario(ref) -> ScenarioSpec:
    path = resolve_scenario(ref)
    return parse_scenario(path.read_text(encoding="utf-8"), base_dir=path.parent, name=path.stem)


def start_pose_suite(grid: GridMap, count: int, seed: int) -> list:
    """Distinct (cell, heading) start poses drawn without replacement."""
    total = grid.n_free * 4
    count = min(count, total)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=count, replace=False)
    return [Pose(grid.free_cells[int(i) // 4], Heading(int(i) % 4)) for i in picks]


# ── Procedural maps ────────────────────────────────────────

MIN_ROOM = 3
MAX_ATTEMPTS = 50


def _split_region(occ: np.ndarray, region: tuple, rng: np.random.Generator):
    """Draw one wall with a door across ``region`` (interior r0..r1, c0..c1 inclusive).

    Returns the two sub-regions, or None when no wall position keeps every
    existing door open.
    """
    r0, r1, c0, c1 = region
    h, w = r1 - r0 + 1, c1 - c0 + 1
    vertical = w > h or (w == h and rng.random() < 0.5)
    for orient in (vertical, not vertical):
        span = w if orient else h
        if span < 2 * MIN_ROOM + 1:
            continue
        lo = (c0 if orient else r0) + MIN_ROOM
        hi = (c1 if orient else r1) - MIN_ROOM
        candidates = list(range(lo, hi + 1))
        rng.shuffle(candidates)
        for pos in candidates:
            if orient:
                # the wall's ends must not land in an existing door gap
                if not (occ[r0 - 1, pos] and occ[r1 + 1, pos]):
                    continue
                occ[r0:r1 + 1, pos] = True
                door = int(rng.integers(r0, r1 + 1))
                occ[door, pos] = False
                return (r0, r1, c0, pos - 1), (r0, r1, pos + 1, c1)
            if not (occ[pos, c0 - 1] and occ[pos, c1 + 1]):
                continue
            occ[pos, c0:c1 + 1] = True
            door = int(rng.integers(c0, c1 + 1))
            occ[pos, door] = False
            return (r0, pos - 1, c0, c1), (pos + 1, r1, c0, c1)
    return None


def generate_map(width: int, height: int, rooms: int, seed: int, cell_size: float = 0.30) -> GridMap:
    """Walled floorplan split into ``rooms`` axis-aligned rooms joined by doors.

    Deterministic per seed; every free cell is reachable from every other.
    """
    if width < 8 or height < 8:
        raise ValueError(f"Map must be at least 8x8, got {width}x{height}")
    if rooms < 1:
        raise ValueError(f"Need at least one room, got {rooms}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_ATTEMPTS):
        occ = np.zeros((height, width), dtype=bool)
        occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
        regions = [(1, height - 2, 1, width - 2)]
        stuck = set()
        while len(regions) < rooms:
            open_regions = [r for r in regions if r not in stuck]
            if not open_regions:
                break
            region = max(open_regions, key=lambda r: ((r[1] - r[0] + 1) * (r[3] - r[2] + 1), r))
            halves = _split_region(occ, region, rng)
            if halves is None:
                stuck.add(region)
                continue
            regions.remove(region)
            regions.extend(halves)
        if len(regions) < rooms:
            continue
        grid = GridMap(occ, cell_size=cell_size)
        if len(flood_fill(grid)) == grid.n_free:
            return grid
    raise MapGenerationError(
        f"Could not generate a connected {width}x{height} map with {rooms} rooms after {MAX_ATTEMPTS} attempts"
    )
