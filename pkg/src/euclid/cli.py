"""``euclid`` command line: pretrain | finetune | evaluate | select-head | plot.

Exit codes: 0 success, 1 usage error (bad flags, config or overrides),
2 runtime error (unreadable or mismatched checkpoint, bad metrics file).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import orchestrator as orch
from .config import ConfigError, load_config
from .envs import ENVS, EpisodeStateError, UnknownTaskError
from .nn_core import CheckpointError
from .plots import MetricsFormatError, emit_plots

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("pretrain", "finetune", "evaluate", "select-head", "plot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="euclid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", default=None, help="output directory (created if absent)")
        if name == "plot":
            p.add_argument("--metrics", action="append", required=True,
                           help="metrics CSV; repeat once per seed")
            continue
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--steps", type=int, default=None,
                       help="pt_steps for pretrain, ft_steps for finetune")
        p.add_argument("--env", default=None)
        p.add_argument("--task", default=None)
        p.add_argument("--explorer", default=None)
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
        if name == "finetune":
            p.add_argument("--scratch", action="store_true",
                           help="fine-tune without a pre-trained checkpoint")
        if name == "evaluate":
            p.add_argument("--episodes", type=int, default=None)
    return parser


def _config(args):
    explicit = dict(seed=args.seed, env=args.env, task=args.task, explorer=args.explorer)
    if args.steps is not None:
        if args.command == "pretrain":
            explicit["pt_steps"] = args.steps
        elif args.command == "finetune":
            explicit["ft_steps"] = args.steps
    cfg = load_config(args.config, args.overrides, **explicit)
    if cfg.env not in ENVS:
        raise ConfigError(f"unknown env {cfg.env!r}; choose from {sorted(ENVS)}")
    if args.command != "pretrain" and cfg.task not in ENVS[cfg.env].tasks:
        raise ConfigError(f"unknown task {cfg.task!r} for {cfg.env}; choose from {ENVS[cfg.env].tasks}")
    return cfg


def _dispatch(args) -> int:
    if args.command == "plot":
        out = Path(args.out or "plots")
        for p in emit_plots(args.metrics, out):
            print(p)
        return EXIT_OK

    cfg = _config(args)
    needs_ckpt = args.command in ("evaluate", "select-head") or (
        args.command == "finetune" and not args.scratch)
    if needs_ckpt and args.checkpoint is None:
        raise UsageError(f"{args.command} requires --checkpoint")
    out = Path(args.out or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())

    if args.command == "pretrain":
        res = orch.pretrain(cfg, out)
        print(res.checkpoint)
    elif args.command == "finetune":
        res = orch.finetune(cfg, None if args.scratch else args.checkpoint, out)
        print(json.dumps({"score": res.score, "selected_head": res.selected_head}))
    elif args.command == "evaluate":
        episodes = args.episodes or cfg.eval_episodes or 5
        if episodes < 1:
            raise UsageError("--episodes must be >= 1")
        res = orch.evaluate(cfg, args.checkpoint, episodes, out)
        print(json.dumps({"mean": res.mean, "ci95": res.ci95}))
    else:
        head, rets = orch.select_head_only(cfg, args.checkpoint, out)
        print(json.dumps({"selected_head": head, "returns": rets}))
    return EXIT_OK


def run(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _dispatch(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, orch.CheckpointMismatchError, MetricsFormatError,
            UnknownTaskError, EpisodeStateError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
