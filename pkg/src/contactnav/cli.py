"""Command-line entry point: train / eval / replay / plot.

All behaviour is driven by one YAML config plus flat ``--set section.key=value``
overrides; there are no environment variables.  The ``--workers`` flag only
changes wall-clock time, never any output byte.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, load_config, save_config
from .errors import ContactNavError, ReplayDivergenceError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def cmd_train(args) -> int:
    from .trainer import Trainer

    cfg = _load_cfg(args)
    out = Path(args.out)
    trainer = Trainer(cfg, out, workers=args.workers, resume=args.resume)
    save_config(cfg, out / "config.yaml")
    final = trainer.train(log=lambda s: print(s, file=sys.stderr))
    print(f"final checkpoint: {final}")
    print(f"metrics: {trainer.metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation
    from .episodelog import EpisodeLogWriter

    cfg = _load_cfg(args)
    policy = evaluation.checkpoint_policy_from_file(
        args.checkpoint, cfg, cfg.evaluation.policy_mode
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.log_episodes:
        # per-episode logs for replay, written next to the report
        logs_dir = out / "episodes"
        logs_dir.mkdir(exist_ok=True)
        ev = cfg.evaluation
        outcomes = []
        i = 0
        for d in ev.densities:
            for _ in range(ev.trials_per_density):
                seed = ev.base_seed + i
                writer = EpisodeLogWriter(logs_dir / f"episode_{i:05d}.jsonl")
                outcomes.append(evaluation.run_episode(policy, cfg, seed, d, writer))
                writer.close()
                i += 1
        report = evaluation.aggregate(outcomes, cfg)
    else:
        report = evaluation.run_sweep(policy, cfg)

    (out / "report.json").write_text(report.to_json())
    table = report.text_table()
    (out / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_replay(args) -> int:
    from . import evaluation
    from .episodelog import EpisodeLog, replay_episode
    from .world import generate_corridor

    cfg = _load_cfg(args)
    log = EpisodeLog.load(args.log)
    desc = log.header["policy"]
    if desc["kind"] == "checkpoint":
        if not args.checkpoint:
            print("error: log was recorded with a checkpoint policy; pass --checkpoint",
                  file=sys.stderr)
            return EXIT_USAGE
        policy = evaluation.checkpoint_policy_from_file(args.checkpoint, cfg, desc["mode"])
        from .policy import params_digest
        if params_digest(policy.params) != desc["params_digest"]:
            print("error: checkpoint parameters differ from the ones used in the log",
                  file=sys.stderr)
            return EXIT_USAGE
    elif desc["kind"] == "zero":
        policy = evaluation.ZeroPolicy()
    elif desc["kind"] == "straight_line":
        policy = evaluation.StraightLinePolicy()
    elif desc["kind"] == "charge_nearest":
        policy = evaluation.ChargeNearestPolicy()
    else:
        print(f"error: unknown policy kind {desc['kind']!r} in log", file=sys.stderr)
        return EXIT_USAGE

    try:
        replay_episode(log, cfg, policy)
    except ReplayDivergenceError as e:
        print(f"replay FAILED: {e}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"replay OK: {len(log.steps)} steps matched exactly")

    if args.strip:
        from .plotting import plot_replay_strip
        world = generate_corridor(log.header["world_seed"], cfg.world)
        p = plot_replay_strip(log, world, args.strip)
        print(f"wrote {p}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import plotting
    from .evaluation import EvalReport

    if not args.metrics and not args.report:
        print("error: nothing to plot; pass --metrics and/or --report", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.report:
        report = EvalReport.from_json(Path(args.report).read_text())
        written.append(plotting.plot_success(report, out / "success_vs_density.svg"))
        written.append(plotting.plot_completion_time(report, out / "time_vs_density.svg"))
    if args.metrics:
        written.append(plotting.plot_training_curves(args.metrics, out / "training_curves.svg"))
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contactnav",
        description="Contact-based crowd navigation: simulator, PPO trainer, evaluator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (defaults used if omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set crowd.density=1.2")

    p = sub.add_parser("train", help="run the PPO training loop")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="rollout worker processes")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run a density sweep on a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-episodes", action="store_true",
                   help="write a replayable JSON-lines log per episode")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-simulate a logged episode and verify it")
    common(p)
    p.add_argument("--log", required=True, help="episode JSON-lines log")
    p.add_argument("--checkpoint", help="checkpoint used when the log was recorded")
    p.add_argument("--strip", help="also render a frame strip SVG to this path")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("plot", help="render report/metrics figures")
    p.add_argument("--report", help="eval report JSON")
    p.add_argument("--metrics", help="training metrics CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContactNavError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
