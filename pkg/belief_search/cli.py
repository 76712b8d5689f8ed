"""Command-line interface for belief-search."""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .belief import entropy_grid, target_posterior_grid, write_snapshot
from .bench import METHODS, aggregate, eval_target_for, joint_success_filter, run_episode, run_suite
from .percept import fit_temperature, sample_detections, temperature_softmax
from .report import (
    efficiency_table,
    read_records,
    success_table,
    write_manifest,
    write_metrics,
    write_records,
    write_training_log,
)
from .rl import load_checkpoint, run_training, save_checkpoint
from .scenario import generate_map, load_scenario, start_pose_suite
from .world import dump_map

CHECKPOINT_NAME = "bbdps.ckpt"


def print_progress(step: int, total: int, message: str):
    """Print progress to stderr."""
    pct = int(step / total * 100) if total > 0 else 0
    print(f"  [{pct:3d}%] {message}", file=sys.stderr)


def _progress(quiet: bool):
    if quiet:
        return None
    return lambda message, step, total: print_progress(step, total, message)


def _say(args, message: str):
    if not args.quiet:
        print(f"  {message}", file=sys.stderr)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, scenario) -> int:
    return scenario.seed if args.seed is None else args.seed


def _train(args, scenario, out: Path, seed: int):
    cfg = scenario.training
    if args.episodes_train is not None:
        cfg = dataclasses.replace(cfg, episodes=args.episodes_train)
    _say(args, f"Training BBDPS on {scenario.name} for {cfg.episodes} episode(s)...")
    learner, log = run_training(scenario, cfg, rng_seed=seed, on_progress=_progress(args.quiet))
    ckpt = save_checkpoint(out / CHECKPOINT_NAME, learner.net)
    write_training_log(out / "training_log.csv", log)
    _say(args, f"✓ Wrote {ckpt}")
    return learner.net, cfg


def _network(args, scenario, out: Path, seed: int):
    if args.checkpoint is not None:
        net = load_checkpoint(args.checkpoint)
        if (net.height, net.width) != scenario.map.shape:
            raise ValueError(
                f"Checkpoint is for a {net.height}x{net.width} map, scenario map is "
                f"{scenario.map.height}x{scenario.map.width}"
            )
        return net
    net, _ = _train(args, scenario, out, seed)
    return net


# ── Subcommands ────────────────────────────────────────────


def cmd_genmap(args) -> int:
    grid = generate_map(args.width, args.height, args.rooms, args.seed or 0, cell_size=args.cell_size)
    text = dump_map(grid)
    if args.output is None:
        sys.stdout.write(text)
        return 0
    args.output.parent.mkdir(parents=True, exist_ok=True)
    args.output.write_text(text, encoding="utf-8")
    _say(args, f"✓ Wrote {args.output} ({grid.width}x{grid.height}, {grid.n_free} free cells)")
    return 0


def cmd_train(args) -> int:
    scenario = load_scenario(args.scenario)
    out = _out_dir(args)
    seed = _seed(args, scenario)
    _, cfg = _train(args, scenario, out, seed)
    write_manifest(out, "train", scenario, seed, {"episodes": cfg.episodes})
    return 0


def cmd_eval(args) -> int:
    scenario = load_scenario(args.scenario)
    out = _out_dir(args)
    seed = _seed(args, scenario)
    method = args.method or "bbums"
    network = _network(args, scenario, out, seed) if method == "bbdps" else None
    _say(args, f"Evaluating {method} on {scenario.name}...")
    records = run_suite(
        method, scenario, seed, episodes=args.episodes, network=network,
        jobs=args.jobs, on_progress=_progress(args.quiet),
    )
    path = write_records(out / f"records_{method}.csv", records)
    successes = sum(r.success for r in records)
    _say(args, f"✓ {successes}/{len(records)} successful; wrote {path}")
    write_manifest(out, "eval", scenario, seed, {"method": method, "episodes": len(records)})
    return 0


def cmd_bench(args) -> int:
    scenario = load_scenario(args.scenario)
    out = _out_dir(args)
    seed = _seed(args, scenario)
    network = _network(args, scenario, out, seed)
    records = []
    for method in METHODS:
        _say(args, f"Evaluating {method} on {scenario.name}...")
        records += run_suite(
            method, scenario, seed, episodes=args.episodes, network=network,
            jobs=args.jobs, on_progress=_progress(args.quiet),
        )
    write_records(out / "records.csv", records)
    subset = joint_success_filter(records)
    table = aggregate(records, subset)
    write_metrics(out / "metrics.csv", table)
    tables = success_table(table, scenario.name) + "\n" + efficiency_table(table, scenario.name)
    (out / "tables.txt").write_text(tables, encoding="utf-8")
    sys.stdout.write(tables)
    write_manifest(out, "bench", scenario, seed, {
        "methods": list(METHODS),
        "episodes": len(records) // len(METHODS),
        "joint_success": subset,
        "checkpoint": str(args.checkpoint) if args.checkpoint else CHECKPOINT_NAME,
    })
    return 0


def cmd_replay(args) -> int:
    scenario = load_scenario(args.scenario)
    out = _out_dir(args)
    seed = _seed(args, scenario)
    method = args.method or "bbums"
    if args.records is not None:
        recorded = [r for r in read_records(args.records) if r.method == method and r.episode == args.episode]
        if not recorded:
            raise ValueError(f"No {method} record for episode {args.episode} in {args.records}")
    if method == "bbdps" and args.checkpoint is None:
        raise ValueError("Replaying bbdps needs --checkpoint")
    network = load_checkpoint(args.checkpoint) if method == "bbdps" else None

    poses = start_pose_suite(scenario.map, args.episodes or scenario.start_poses, scenario.suite_seed)
    if not 0 <= args.episode < len(poses):
        raise ValueError(f"Episode {args.episode} is outside the suite of {len(poses)} start poses")
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    steps = []

    def on_step(session, frame):
        n = len(steps)
        target = session.spec.target_class
        write_snapshot(snap_dir / f"step_{n:04d}_posterior.csv", target_posterior_grid(session.belief, target))
        write_snapshot(snap_dir / f"step_{n:04d}_entropy.csv", entropy_grid(session.belief))
        steps.append((session.primitives_executed, str(session.pose), len(frame.detections)))

    record = run_episode(
        method, scenario, eval_target_for(scenario, args.episode), poses[args.episode],
        seed ^ args.episode, network, args.episode, on_step=on_step,
    )
    write_records(out / "replay.csv", [record])
    if args.records is not None and recorded[0] != record:
        raise RuntimeError(f"Replay diverged from the recorded episode: {recorded[0]} != {record}")
    _say(args, f"✓ {record.outcome} after {record.primitives_executed} primitives; "
               f"{len(steps)} snapshot(s) in {snap_dir}")
    write_manifest(out, "replay", scenario, seed, {"method": method, "episode": args.episode})
    return 0


def cmd_calibrate(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = _seed(args, scenario)
    rng = np.random.default_rng(seed)
    logits, labels = sample_detections(scenario.detector, args.samples, rng, scenario.map.cell_size)
    cal = fit_temperature(logits, labels)
    probs = temperature_softmax(logits, cal)
    accuracy = float((probs.argmax(axis=1) == labels).mean())
    confidence = float(probs.max(axis=1).mean())
    print(f"temperature = {cal.temperature:.4f}")
    _say(args, f"accuracy {accuracy:.3f}, mean confidence {confidence:.3f} over {args.samples} detections")
    return 0


# ── Parser ─────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--scenario",
        default="desk",
        help="Scenario file or bundled scenario name (default: desk).",
    )
    common.add_argument("--seed", type=int, default=None, help="Base seed (default: the scenario's seed).")
    common.add_argument("--out", type=Path, default=Path("results"), help="Output directory (default: results).")
    common.add_argument("--method", choices=METHODS, default=None, help="Search method (default: bbums).")
    common.add_argument("--episodes", type=int, default=None, help="Number of start poses to evaluate.")
    common.add_argument("--checkpoint", type=Path, default=None, help="Trained BBDPS checkpoint.")
    common.add_argument(
        "--train-episodes",
        dest="episodes_train",
        type=int,
        default=None,
        help="Override the scenario's training episode count.",
    )
    common.add_argument("--jobs", type=int, default=1, help="Parallel episode workers (default: 1).")
    common.add_argument("-q", "--quiet", action="store_true", help="Suppress progress output.")

    parser = argparse.ArgumentParser(
        prog="belief-search",
        description="Object search in grid worlds with Dirichlet belief maps.",
        epilog="Outputs are CSV files plus a manifest.json under --out.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genmap", parents=[common], help="Generate a random floorplan map.")
    p.add_argument("--width", type=int, default=20)
    p.add_argument("--height", type=int, default=20)
    p.add_argument("--rooms", type=int, default=4)
    p.add_argument("--cell-size", type=float, default=0.30)
    p.add_argument("-o", "--output", type=Path, default=None, help="Map file to write (default: stdout).")
    p.set_defaults(func=cmd_genmap)

    p = sub.add_parser("train", parents=[common], help="Train the BBDPS Q-network.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Run one method over the start-pose suite.")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="Run all four methods and tabulate results.")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", parents=[common], help="Re-run one episode and dump belief snapshots.")
    p.add_argument("--episode", type=int, default=0, help="Episode index in the suite (default: 0).")
    p.add_argument("--records", type=Path, default=None, help="Records CSV to check the replay against.")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("calibrate", parents=[common], help="Fit the detector softmax temperature.")
    p.add_argument("--samples", type=int, default=2000, help="Synthetic detections to fit on (default: 2000).")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    if args.episodes is not None and args.episodes < 1:
        parser.error("--episodes must be at least 1")

    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"\nError: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    sys.exit(main())
