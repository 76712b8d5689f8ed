"""Output files: records and metrics CSV, aligned text tables, training log, manifest."""

import csv
import dataclasses
import hashlib
import json
import math
from pathlib import Path

from .bench import MetricsTable, RunRecord
from .rl import TrainingLogRow

RECORD_COLUMNS = ("method", "episode", "outcome", "actions", "distance")
METRIC_COLUMNS = (
    "method", "sr", "episodes", "subset",
    "actions_mean", "actions_se", "distance_mean", "distance_se",
)
TRAINING_COLUMNS = ("episode", "target", "return", "length", "outcome", "epsilon", "loss")

METHOD_LABELS = {"rws": "RWS", "pcss": "PCSS", "bbums": "BBUMS", "bbdps": "BBDPS"}


def _fmt(value: float, digits: int = 6) -> str:
    return "nan" if math.isnan(value) else f"{value:.{digits}f}"


# ── Records ────────────────────────────────────────────────


def write_records(path: Path, records) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([r.method, r.episode, r.outcome, r.primitives_executed, f"{r.distance:.6f}"])
    return path


def read_records(path: Path) -> list:
    """Parse a records CSV back into RunRecords."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ValueError(f"{path} is not a records file (columns {reader.fieldnames})")
        try:
            return [
                RunRecord(
                    method=row["method"],
                    episode=int(row["episode"]),
                    outcome=row["outcome"],
                    primitives_executed=int(row["actions"]),
                    distance=round(float(row["distance"]), 6),
                )
                for row in reader
            ]
        except (TypeError, ValueError) as e:
            raise ValueError(f"Malformed row in {path}: {e}")


# ── Metrics ────────────────────────────────────────────────


def write_metrics(path: Path, table: MetricsTable) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for m in table.rows:
            writer.writerow([
                m.method, _fmt(m.sr, 4), m.episodes, m.subset,
                _fmt(m.actions_mean, 4), _fmt(m.actions_se, 4),
                _fmt(m.distance_mean, 4), _fmt(m.distance_se, 4),
            ])
    return path


def _aligned(header: list, rows: list) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(
            str(v).ljust(w) if i == 0 else str(v).rjust(w) for i, (v, w) in enumerate(zip(row, widths))
        ))
    return "\n".join(lines) + "\n"


def success_table(table: MetricsTable, scenario_name: str) -> str:
    """Success rate per method."""
    rows = [[METHOD_LABELS.get(m.method, m.method), f"{m.sr:.2f}", str(m.episodes)] for m in table.rows]
    return f"Success rate ({scenario_name})\n\n" + _aligned(["Method", "SR", "Episodes"], rows)


def efficiency_table(table: MetricsTable, scenario_name: str) -> str:
    """Mean ± SE of primitives and distance over the joint-success subset."""
    def pm(mean, se, digits):
        return "n/a" if math.isnan(mean) else f"{mean:.{digits}f} ± {se:.{digits}f}"

    rows = [
        [
            METHOD_LABELS.get(m.method, m.method),
            pm(m.actions_mean, m.actions_se, 2),
            pm(m.distance_mean, m.distance_se, 2),
        ]
        for m in table.rows
    ]
    title = f"Efficiency over {len(table.subset)} joint-success episode(s) ({scenario_name})\n\n"
    return title + _aligned(["Method", "Actions", "Distance (m)"], rows)


# ── Training log ───────────────────────────────────────────


def write_training_log(path: Path, log) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAINING_COLUMNS)
        for row in log:
            writer.writerow([
                row.episode, row.target, f"{row.episode_return:.4f}", row.length,
                row.outcome, f"{row.epsilon:.4f}", _fmt(row.loss),
            ])
    return path


def read_training_log(path: Path) -> list:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            TrainingLogRow(
                episode=int(row["episode"]),
                target=row["target"],
                episode_return=float(row["return"]),
                length=int(row["length"]),
                outcome=row["outcome"],
                epsilon=float(row["epsilon"]),
                loss=float(row["loss"]),
            )
            for row in csv.DictReader(fh)
        ]


# ── Manifest ───────────────────────────────────────────────


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "tolist"):
        return value.tolist()
    return value


def scenario_config(scenario) -> dict:
    """Resolved run parameters of a scenario, for the manifest."""
    return {
        "name": scenario.name,
        "map_shape": list(scenario.map.shape),
        "cell_size": scenario.map.cell_size,
        "classes": list(scenario.class_names),
        "train_targets": _jsonable(scenario.train_targets),
        "eval_targets": _jsonable(scenario.eval_targets),
        "clutter": _jsonable(scenario.clutter),
        "detector": _jsonable(scenario.detector),
        "temperature": scenario.calibration.temperature,
        "weights": _jsonable(scenario.weights),
        "training": _jsonable(scenario.training),
        "k0": scenario.k0,
        "cluster_seed": scenario.cluster_seed,
        "fov_deg": scenario.fov_deg,
        "start_poses": scenario.start_poses,
        "suite_seed": scenario.suite_seed,
        "horizon_fraction": scenario.horizon_fraction,
        "threshold": scenario.threshold,
    }


def write_manifest(out_dir: Path, command: str, scenario, seed: int, extra: dict = None) -> Path:
    """Write manifest.json describing the run and hashing every output file in ``out_dir``."""
    out_dir = Path(out_dir)
    outputs = {
        p.relative_to(out_dir).as_posix(): sha256_file(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "command": command,
        "scenario": scenario.name,
        "scenario_sha256": scenario.digest(),
        "seed": seed,
        "config": scenario_config(scenario),
        "outputs": outputs,
    }
    if extra:
        manifest.update(_jsonable(extra))
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
