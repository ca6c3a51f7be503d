"""``mmoforge`` command line: map generation, simulation, training, evaluation, overlays, benchmarks.

Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 invalid config, 4 missing file.
Failures print a single JSON line ``{"error": kind, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import Config, ConfigError, config_from_dict, default_config, seed_rng

log = logging.getLogger("mmoforge")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4

# Single-process training defaults to this batch unless the config file sets one.
DESK_BATCH_ACTIONS = 1024


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would print usage over several lines
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _configure_logging() -> None:
    level = os.environ.get("MMOFORGE_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_config(args: argparse.Namespace) -> tuple[Config, dict[str, Any]]:
    """Config from ``--config`` plus flag overrides; also returns the raw file contents."""
    raw: dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = config_from_dict(raw, default_config())
    overrides: dict[str, Any] = {"seed": args.seed}
    if getattr(args, "agents", None) is not None:
        overrides["spawn_cap"] = args.agents
    return config_from_dict(overrides, cfg), raw


def write_manifest(out_dir: Path, command: str, argv: Sequence[str], cfg: Config, extra: dict[str, Any]) -> Path:
    import scipy

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {
            "mmoforge": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        **extra,
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _load_params(path: str, cfg: Config):
    from .neural import checkpoint

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return checkpoint.load(p, cfg)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("worker counts must be positive")
    return values


# ---------------------------------------------------------------------------
# commands


def cmd_generate_map(args, argv) -> int:
    from .world import generate_map

    cfg, _ = resolve_config(args)
    tile_map = generate_map(cfg, seed_rng(cfg.seed, "map_gen"))
    out = Path(args.out or f"map-{cfg.seed}.map")
    out.parent.mkdir(parents=True, exist_ok=True)
    tile_map.save(out)
    write_manifest(out.parent, "generate-map", argv, cfg, {"outputs": [str(out)]})
    print(f"wrote {out} ({tile_map.height}x{tile_map.width})")
    return EXIT_OK


def cmd_simulate(args, argv) -> int:
    from .engine import new_world, step
    from .obsio import ObservationBuilder, build_schema
    from .scripted import VARIANTS, act, make_policy
    from .world import TileMap

    if args.policy not in VARIANTS:
        raise UsageError(f"simulate needs a scripted policy, one of {', '.join(VARIANTS)}")
    cfg, _ = resolve_config(args)
    tile_map = None
    if args.map:
        if not Path(args.map).exists():
            raise FileNotFoundError(f"map file not found: {args.map}")
        tile_map = TileMap.load(args.map, cfg.border_thickness)
    out = Path(args.out or f"mmoforge-out/simulate-{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    state = new_world(cfg, seed=cfg.seed, tile_map=tile_map)
    schema = build_schema(cfg)
    policy = make_policy(args.policy, cfg, cfg.seed)
    n_deaths = n_spawns = 0
    t0 = time.perf_counter()
    events_path = None
    if args.log_events:
        events_path = out / "events.jsonl" if args.log_events is True else Path(args.log_events)
        events_path.parent.mkdir(parents=True, exist_ok=True)
    events_fh = open(events_path, "w") if events_path else None
    try:
        with open(out / "hashes.csv", "w", newline="") as fh:
            hashes = csv.writer(fh)
            hashes.writerow(["tick", "living", "state_hash"])
            for _ in range(args.ticks):
                observations = ObservationBuilder(state, schema).observe_all()
                actions = {aid: act(policy, obs) for aid, obs in observations.items()}
                state, events, _ = step(state, actions)
                hashes.writerow([state.tick, len(state.agents), state.state_hash()])
                n_spawns += len(events.spawns)
                for d in events.deaths:
                    n_deaths += 1
                    log.info("death tick=%d agent=%d", events.tick, d["agent"])
                    print(
                        f"death tick={events.tick} agent={d['agent']} cause={d['cause']} lifetime={d['lifetime']}"
                    )
                if events_fh is not None:
                    events_fh.write(json.dumps(events.to_record(), sort_keys=True) + "\n")
    finally:
        if events_fh is not None:
            events_fh.close()
    summary = {
        "ticks": args.ticks,
        "spawns": n_spawns,
        "deaths": n_deaths,
        "living": len(state.agents),
        "final_hash": state.state_hash(),
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    extra = {"policy": args.policy, "map": args.map, "events": events_path and str(events_path), "summary": summary}
    write_manifest(out, "simulate", argv, cfg, extra)
    print(json.dumps(summary))
    return EXIT_OK


def _train_batch(args, raw: dict[str, Any], cfg: Config) -> int:
    if args.batch_actions is not None:
        return args.batch_actions
    return cfg.batch_actions if "batch_actions" in raw else DESK_BATCH_ACTIONS


def cmd_train(args, argv) -> int:
    from .trainer import train

    cfg, raw = resolve_config(args)
    batch = _train_batch(args, raw, cfg)
    cfg = cfg.replace(batch_actions=batch)
    out = Path(args.out or f"mmoforge-out/train-{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    params = _load_params(args.resume, cfg) if args.resume else None
    t0 = time.perf_counter()
    if args.distributed or args.servers > 1 or args.clients > 1:
        history = _train_cluster(args, cfg, params, out / "metrics.csv", ckpt)
    else:
        _, history = train(
            cfg, args.steps, seed=cfg.seed, params=params, metrics_path=out / "metrics.csv",
            checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every, batch_actions=batch,
        )
    last = history[-1] if history else {}
    extra = {
        "steps": args.steps,
        "batch_actions": batch,
        "distributed": bool(args.distributed),
        "servers": args.servers,
        "clients": args.clients,
        "checkpoint": str(ckpt),
        "final": {k: v for k, v in last.items() if k != "client_digests"},
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    write_manifest(out, "train", argv, cfg, extra)
    print(json.dumps(extra["final"], default=str))
    return EXIT_OK


CLUSTER_FIELDS = ("step", "mean_lifetime", "value_loss", "policy_loss", "grad_norm", "n_actions", "servers")


def _train_cluster(args, cfg: Config, params, metrics_path: Path, ckpt: Path) -> list[dict]:
    from .ascend.mmo import build_stack, run_cluster_epoch
    from .neural import checkpoint

    cluster = build_stack(cfg, args.servers, args.clients, seed=cfg.seed, params=params, distributed=args.distributed)
    history = []
    try:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CLUSTER_FIELDS)
            for i in range(args.steps):
                m = run_cluster_epoch(cluster)
                history.append(m)
                writer.writerow([m[k] for k in CLUSTER_FIELDS])
                fh.flush()
                if args.checkpoint_every and (i + 1) % args.checkpoint_every == 0:
                    checkpoint.save(ckpt, cluster.params, cfg)
        checkpoint.save(ckpt, cluster.params, cfg)
    finally:
        cluster.close()
    for msg in cluster.incidents:
        log.warning(msg)
    return history


def cmd_evaluate(args, argv) -> int:
    from .trainer import evaluate_lifetime

    cfg, _ = resolve_config(args)
    policy = args.policy or "neural"
    if policy == "neural":
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint for the neural policy")
        params = _load_params(args.checkpoint, cfg)
    else:
        params = None
    lifetimes = [
        evaluate_lifetime(cfg, params, seed=cfg.seed + k, ticks=args.ticks, policy=policy)
        for k in range(args.episodes)
    ]
    result = {
        "policy": policy,
        "episodes": args.episodes,
        "ticks": args.ticks,
        "mean_lifetime": float(np.mean(lifetimes)),
        "median_lifetime": float(np.median(lifetimes)),
        "per_episode": lifetimes,
    }
    out = Path(args.out or f"mmoforge-out/evaluate-{cfg.seed}")
    write_manifest(out, "evaluate", argv, cfg, {"checkpoint": args.checkpoint, "result": result})
    (out / "evaluation.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps({k: result[k] for k in ("policy", "episodes", "mean_lifetime", "median_lifetime")}))
    return EXIT_OK


def cmd_overlay(args, argv) -> int:
    from . import telemetry
    from .engine import new_world

    cfg, _ = resolve_config(args)
    out = Path(args.out or f"mmoforge-out/overlay-{args.kind}-{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    pops = [args.population] if args.population is not None else list(range(cfg.n_populations))
    if any(not 0 <= p < cfg.n_populations for p in pops):
        raise ConfigError(f"population must be in [0, {cfg.n_populations})")
    written: list[str] = []
    stats: dict[str, Any] = {}
    if args.kind == "visits":
        from .trainer import Rollout

        policy = args.policy or ("neural" if args.checkpoint else "forager")
        params = _load_params(args.checkpoint, cfg) if policy == "neural" else None
        if policy == "neural" and params is None:
            raise UsageError("neural visit overlays need --checkpoint")
        ro = Rollout(cfg, params, seed=cfg.seed, policy=policy)
        counter = telemetry.VisitationCounter.for_state(ro.state)
        for _ in range(args.ticks):
            ro.tick()
            ro.completed.clear()
            telemetry.record_visits(counter, ro.state)
        mask = telemetry._explorable(ro.state.map)
        targets = [(f"visits_pop{p}", p) for p in pops] + ([("visits_all", None)] if args.population is None else [])
        for name, p in targets:
            csv_path, pgm_path = telemetry.export_heatmap(counter.grid(p), out / name, mask, args.scale)
            written += [str(csv_path), str(pgm_path)]
            stats[name] = {
                "coverage": telemetry.coverage(counter, ro.state.map, p),
                "entropy_bits": telemetry.visitation_entropy(counter, p),
            }
    else:
        if not args.checkpoint:
            raise UsageError("value overlays need --checkpoint")
        params = _load_params(args.checkpoint, cfg)
        state = new_world(cfg, seed=cfg.seed)
        mask = telemetry._explorable(state.map)
        for p in pops:
            grid = telemetry.value_overlay(params, state, p)
            csv_path, pgm_path = telemetry.export_heatmap(grid, out / f"value_pop{p}", mask, "linear")
            written += [str(csv_path), str(pgm_path)]
            stats[f"value_pop{p}"] = {"min": float(grid[mask].min()), "max": float(grid[mask].max())}
    write_manifest(out, "overlay", argv, cfg, {"kind": args.kind, "outputs": written, "stats": stats})
    print(json.dumps(stats))
    return EXIT_OK


def cmd_bench_sync(args, argv) -> int:
    from .telemetry import bench_sync

    cfg, _ = resolve_config(args)
    out = Path(args.out or "mmoforge-out/bench-sync")
    out.mkdir(parents=True, exist_ok=True)
    report = bench_sync(cfg, args.servers, args.clients, trials=args.trials, batch_actions=args.batch_actions)
    report.to_csv(out / "bench.csv")
    summary = report.summary()
    write_manifest(out, "bench-sync", argv, cfg, {"summary": summary, "rows": report.rows})
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .scripted import VARIANTS

    parser = _Parser(prog="mmoforge", description="Persistent multi-agent gridworld toolkit.")
    parser.add_argument("--version", action="version", version=f"mmoforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser, out_help: str = "output directory") -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("generate-map", help="write a procedurally generated map")
    common(p, "map file to write")
    p.set_defaults(func=cmd_generate_map)

    p = sub.add_parser("simulate", help="run scripted agents and record per-tick state hashes")
    common(p)
    p.add_argument("--policy", default="forager", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--ticks", type=int, default=1000)
    p.add_argument("--agents", type=int, help="spawn cap override")
    p.add_argument("--map", help="map file from generate-map")
    p.add_argument(
        "--log-events", nargs="?", const=True, default=None, metavar="PATH",
        help="write one JSON event record per tick (default <out>/events.jsonl)",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the neural policy")
    common(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--agents", type=int, help="spawn cap override")
    p.add_argument("--batch-actions", type=int)
    p.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.bin)")
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--resume", help="start from this checkpoint")
    p.add_argument("--distributed", action="store_true", help="servers run as separate processes over TCP")
    p.add_argument("--servers", type=int, default=1)
    p.add_argument("--clients", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mean agent lifetime over fresh maps")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--policy", help="neural (default) or a scripted variant as a baseline")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--ticks", type=int, default=500)
    p.add_argument("--agents", type=int, help="spawn cap override")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("overlay", help="visitation or value heatmaps")
    common(p)
    p.add_argument("--kind", choices=("visits", "value"), default="visits")
    p.add_argument("--checkpoint")
    p.add_argument("--policy")
    p.add_argument("--ticks", type=int, default=500)
    p.add_argument("--agents", type=int, help="spawn cap override")
    p.add_argument("--population", type=int)
    p.add_argument("--scale", choices=("linear", "log"), default="linear")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("bench-sync", help="synchronize timing at both stack boundaries")
    common(p)
    p.add_argument("--servers", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--clients", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--batch-actions", type=int, default=4096)
    p.set_defaults(func=cmd_bench_sync)
    return parser


def _check_counts(args: argparse.Namespace) -> None:
    for name in ("ticks", "steps", "episodes", "trials", "servers", "clients", "batch_actions", "checkpoint_every"):
        value = getattr(args, name, None)
        if isinstance(value, int) and value < (0 if name == "checkpoint_every" else 1):
            raise UsageError(f"--{name.replace('_', '-')} must be positive")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        _check_counts(args)
        return args.func(args, argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), EXIT_MISSING)
    except KeyboardInterrupt:
        return _fail("interrupted", "interrupted", EXIT_FAILURE)
    except Exception as exc:
        log.debug("unhandled failure", exc_info=True)
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
