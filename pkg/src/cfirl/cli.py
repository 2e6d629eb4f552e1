"""Command-line entry point tying the pipeline together.

Subcommands: gen-world, train, loop, annotate-serve, evaluate,
validate-scene. Every artifact-producing command writes a manifest.json
beside its outputs recording the command, configuration, seeds, inputs, and
versions, so runs are reproducible from the manifest alone. Exit codes:
0 success, 2 validation/configuration, 3 IO, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .active_loop import LoopConfig, mean_rollout_hausdorff, run_active_loop, save_loop_report
from .annotation_service import AnnotationServer, SessionStore
from .benchmarks import AMBIGUITY_TERRAIN, recovery_world_config
from .cf_gen import CfGenConfig
from .cf_irl import TrainConfig, phase1_config, phase3_config, train, write_training_log
from .errors import CfirlError, NumericalError, ValidationError
from .nav_planner import Mission, SimConfig, load_mission, metrics_table, simulate_mission
from .reward_model import HeadConfig, init_params, load_checkpoint, save_checkpoint
from .synth_world import WorldConfig, gen_scene, load_scene, save_scene, validate_scene

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def data_root() -> Path:
    return Path(os.environ.get("CFIRL_DATA_ROOT", "."))


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                   inputs: list[str], outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seeds": seeds,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "versions": {"cfirl": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "wall_clock_s": round(time.time() - started, 3),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def world_config_from_file(path) -> WorldConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "terrain" in doc:
        doc["terrain"] = tuple(
            (name, float("inf") if cost is None else float(cost)) for name, cost in doc["terrain"]
        )
    if "class_fractions" in doc and doc["class_fractions"] is not None:
        doc["class_fractions"] = tuple(doc["class_fractions"])
    return WorldConfig(**doc)


def load_scene_dir(scenes_dir: Path):
    files = sorted(Path(scenes_dir).glob("scene-*.json"))
    if not files:
        raise ValidationError(f"no scene files under {scenes_dir}")
    return [load_scene(f) for f in files], [str(f) for f in files]


def head_config(kind: str, channels: int) -> HeadConfig:
    return HeadConfig(kind=kind, in_channels=channels)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_world(args) -> int:
    started = time.time()
    cfg = world_config_from_file(args.config) if args.config else recovery_world_config(seed=args.seed)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(args.count):
        scene = gen_scene(cfg, i)
        validate_scene(scene)
        path = out / f"scene-{i:05d}.json"
        save_scene(scene, path)
        outputs.append(str(path))
    cfg_doc = asdict(cfg)
    cfg_doc["terrain"] = [[n, None if np.isinf(c) else c] for n, c in cfg.terrain]
    write_manifest(out, "gen-world", cfg_doc, {"seed": cfg.seed},
                   [args.config] if args.config else [], outputs, started)
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_validate_scene(args) -> int:
    paths = [Path(p) for p in args.paths]
    expanded = []
    for p in paths:
        expanded.extend(sorted(p.glob("scene-*.json")) if p.is_dir() else [p])
    problems = 0
    for path in expanded:
        try:
            validate_scene(load_scene(path))
        except (CfirlError, KeyError, json.JSONDecodeError) as exc:
            problems += 1
            print(f"INVALID {path}: {exc}")
    print(f"validated {len(expanded)} scene files, {problems} invalid")
    return EXIT_OK if problems == 0 else EXIT_VALIDATION


def cmd_train(args) -> int:
    started = time.time()
    scenes, inputs = load_scene_dir(args.scenes)
    cfg = TrainConfig(
        alpha=args.alpha, epochs=args.epochs, learning_rate=args.learning_rate,
        lr_decay=args.lr_decay, horizon=args.horizon, temperature=args.temperature,
        seed=args.seed, alpha_reg=args.alpha_reg, smoothness_weight=args.smoothness_weight,
    )
    if cfg.alpha > 0 and not any(s.labeled_counterfactuals() for s in scenes):
        raise ValidationError("--alpha > 0 requires scenes with labeled counterfactuals")
    params = init_params(head_config(args.head, scenes[0].grid.channel_count), args.seed)
    params, stats = train(scenes, params, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out)
    log_path = out.with_suffix(".log.tsv")
    write_training_log(stats, log_path)
    write_manifest(out.parent, "train", asdict(cfg) | {"head": args.head},
                   {"seed": args.seed}, inputs, [str(out), str(log_path)], started)
    print(f"checkpoint {out} (final loss {stats.mean_loss:.6f})")
    return EXIT_OK


def _service_round_annotator(store: SessionStore, url: str, poll_s: float):
    def annotate_round(round_idx: int, pairs):
        # sessions are namespaced per round: a rescened scene gets fresh
        # candidates, so its earlier session's labels must not carry over
        keyed = {f"{scene.id}.r{round_idx}": scene for scene, _ in pairs}
        cand_sets = {f"{scene.id}.r{round_idx}": cands for scene, cands in pairs}
        existing = {row["scene_id"] for row in store.list_sessions()}
        fresh = [sid for sid in keyed if sid not in existing]
        if fresh:
            store.create_sessions(fresh, keyed, {sid: cand_sets[sid] for sid in fresh})
        wanted = {f"sess-{sid}" for sid in keyed}
        print(f"round {round_idx}: {len(wanted)} sessions to annotate at {url}")
        while True:
            rows = {r["session_id"]: r["status"] for r in store.list_sessions()}
            open_left = [s for s in wanted if rows.get(s) != "complete"]
            if not open_left:
                break
            print(f"  waiting on {len(open_left)} open sessions...", flush=True)
            time.sleep(poll_s)
        labels = {}
        for sid, scene in keyed.items():
            session = store.get(f"sess-{sid}")
            labels[scene.id] = dict(session.labels)
        return labels

    return annotate_round


def cmd_loop(args) -> int:
    started = time.time()
    scenes, inputs = load_scene_dir(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    head = head_config(args.head, scenes[0].grid.channel_count)
    cfg = LoopConfig(
        hausdorff_threshold=args.threshold, max_rounds=args.max_rounds,
        convergence_eps=args.convergence_eps,
        phase1=phase1_config(seed=args.seed, horizon=args.horizon),
        phase3=phase3_config(seed=args.seed, horizon=args.horizon),
        annotator=args.annotator, oracle_margin=args.oracle_margin,
        cf=CfGenConfig(num_candidates=args.candidates, mu=args.mu, sigma=args.sigma,
                       seed=args.seed),
        head=head, rollout_horizon=args.rollout_horizon, seed=args.seed,
    )
    outputs = []

    def checkpoint_round(round_idx, params, report):
        path = out / f"round-{round_idx:02d}.rw1"
        save_checkpoint(params, path)
        outputs.append(str(path))

    annotate_round_fn = None
    server = None
    if args.annotator == "human_service":
        store = SessionStore(out / "sessions")
        server = AnnotationServer(store, port=args.port, static_dir=args.static or None)
        server.start()
        print(f"annotation UI at {server.url} (sessions in {out / 'sessions'})")
        annotate_round_fn = _service_round_annotator(store, server.url, args.poll_seconds)
    try:
        params, report = run_active_loop(scenes, cfg, round_callback=checkpoint_round,
                                         annotate_round_fn=annotate_round_fn)
    finally:
        if server is not None:
            server.stop()
    final_path = out / "final.rw1"
    save_checkpoint(params, final_path)
    save_loop_report(report, out / "loop_report.json")
    (out / "loop_summary.tsv").write_text(report.summary_table())
    outputs += [str(final_path), str(out / "loop_report.json"), str(out / "loop_summary.tsv")]
    write_manifest(out, "loop", {"threshold": args.threshold, "annotator": args.annotator,
                                 "max_rounds": args.max_rounds, "head": args.head},
                   {"seed": args.seed}, inputs, outputs, started)
    print(f"loop done: baseline H {report.baseline_mean_hausdorff:.3f} -> "
          f"final H {report.final_mean_hausdorff:.3f} over {len(report.rounds)} rounds")
    return EXIT_OK


def cmd_annotate_serve(args) -> int:
    store = SessionStore(args.sessions)
    server = AnnotationServer(store, port=args.port, static_dir=args.static or None)
    print(f"serving annotation API at {server.url} (ctrl-c to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    params = load_checkpoint(args.checkpoint)
    missions_dir = Path(args.missions)
    mission_files = sorted(missions_dir.glob("mission-*.json"))
    if not mission_files:
        raise ValidationError(f"no mission files under {missions_dir}")
    rows = {}
    sim = SimConfig(mission_timeout=args.timeout)
    for mf in mission_files:
        mission, scene_file = load_mission(mf)
        if scene_file is None:
            raise ValidationError(f"{mf} does not reference a scene file")
        scene = load_scene((missions_dir / scene_file) if not Path(scene_file).is_absolute()
                           else Path(scene_file))
        if scene.grid.channel_count != params.config.in_channels:
            raise ValidationError(
                f"checkpoint expects {params.config.in_channels} channels, "
                f"scene {scene.id} has {scene.grid.channel_count}")
        rows[mf.stem] = simulate_mission(scene, params, mission, sim)
    table = metrics_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.tsv").write_text(table)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump({name: rep.row() for name, rep in rows.items()}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "evaluate", {"timeout": args.timeout},
                   {}, [args.checkpoint] + [str(f) for f in mission_files],
                   [str(out / "metrics.tsv"), str(out / "metrics.json")], started)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfirl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate synthetic scenes")
    p.add_argument("--config", help="world config JSON (defaults to the recovery world)")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("validate-scene", help="check scene files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_validate_scene)

    p = sub.add_parser("train", help="train a reward head on scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head", choices=("linear", "msfcn"), default="linear")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--alpha-reg", type=float, default=1.0)
    p.add_argument("--smoothness-weight", type=float, default=4.0)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--lr-decay", type=float, default=0.96)
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loop", help="run the active reward-learning loop")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--annotator", choices=("oracle", "human_service"), default="oracle")
    p.add_argument("--head", choices=("linear", "msfcn"), default="linear")
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--max-rounds", type=int, default=3)
    p.add_argument("--convergence-eps", type=float, default=0.25)
    p.add_argument("--oracle-margin", type=float, default=0.1)
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--rollout-horizon", type=int, default=110)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--port", type=int, default=8808)
    p.add_argument("--static", default="")
    p.add_argument("--poll-seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("annotate-serve", help="serve annotation sessions over HTTP")
    p.add_argument("--sessions", required=True)
    p.add_argument("--port", type=int, default=8808)
    p.add_argument("--static", default="")
    p.set_defaults(func=cmd_annotate_serve)

    p = sub.add_parser("evaluate", help="simulate missions against a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--missions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timeout", type=float, default=240.0)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CfirlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
