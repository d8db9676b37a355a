"""
Command line: ``avatar-runtime <command> [--config PATH] [--seed N] [--out PATH] ...``.

Exit codes: 0 on success, 1 when inputs or configuration are invalid, 2 when a
run fails.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import tasks
from . import tensor as T
from .config import DEFAULT_CFG, AvatarRuntimeConfig, load_config
from .exceptions import ConfigError, ValidationError
from .streaming import drift_csv
from .util import parse_key_values

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _common(parser: argparse.ArgumentParser, out_required: bool = False) -> None:
    parser.add_argument("--config", default=None, help="key = value configuration file")
    parser.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
    parser.add_argument("--out", type=Path, required=out_required, default=None, help="output path")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="configuration override, may repeat")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avatar-runtime",
                                     description="Streaming audio-driven avatar generation on a toy latent task")
    commands = parser.add_subparsers(dest="command", required=True)

    _common(commands.add_parser("train-teacher", help="train the bidirectional toy teacher"), out_required=True)

    sub = commands.add_parser("gen-ode-pairs", help="record teacher trajectories at the student noise levels")
    _common(sub, out_required=True)
    sub.add_argument("--teacher", required=True)

    sub = commands.add_parser("ode-init", help="regress the causal student onto ODE pairs")
    _common(sub, out_required=True)
    sub.add_argument("--teacher", required=True)
    sub.add_argument("--pairs", required=True)

    for name, text in (("distill", "score distillation with student-forcing rollouts"),
                       ("refine", "adversarial refinement against a teacher-initialised discriminator")):
        sub = commands.add_parser(name, help=text)
        _common(sub, out_required=True)
        sub.add_argument("--teacher", required=True)
        sub.add_argument("--student", required=True)

    sub = commands.add_parser("stream", help="run the two-stage streaming pipeline")
    _common(sub)
    sub.add_argument("--student", default=None, help="defaults to the configured checkpoint")
    sub.add_argument("--track", default=None, help="audio track file; a synthetic track otherwise")

    _common(commands.add_parser("bench", help="stage timing table under the simulated clock"))

    sub = commands.add_parser("drift", help="per-chunk drift from the reference over a long rollout")
    _common(sub)
    sub.add_argument("--student", default=None)
    sub.add_argument("--variant", default="sink+rapr", help=f"one of {', '.join(tasks.VARIANTS)}")
    sub.add_argument("--track", default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> AvatarRuntimeConfig:
    try:
        overrides = parse_key_values("\n".join(args.set))
    except ValueError as exc:
        raise ConfigError(f"--set: {exc}") from exc
    if args.seed is not None:
        overrides["seed"] = args.seed
    unknown = sorted(set(overrides) - set(DEFAULT_CFG))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return load_config(args.config, overrides)


def _checkpoint(args: argparse.Namespace, cfg: AvatarRuntimeConfig) -> str:
    path = args.student or cfg.checkpoint
    if not path:
        raise ConfigError("no student checkpoint: pass --student or set checkpoint")
    return path


def _output(args: argparse.Namespace, cfg: AvatarRuntimeConfig) -> Optional[Path]:
    if args.out is not None:
        return args.out
    return Path(cfg.output) if cfg.output else None


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    try:
        logging.getLogger().setLevel(cfg.log_level.upper())
    except ValueError as exc:
        raise ConfigError(f"log_level: {exc}") from exc
    T.set_default_dtype(cfg.precision)
    out = _output(args, cfg)

    if args.command == "train-teacher":
        tasks.train_teacher_job(cfg, out)
    elif args.command == "gen-ode-pairs":
        tasks.gen_ode_pairs_job(cfg, args.teacher, out)
    elif args.command == "ode-init":
        tasks.ode_init_job(cfg, args.teacher, args.pairs, out)
    elif args.command == "distill":
        tasks.distill_job(cfg, args.teacher, args.student, out)
    elif args.command == "refine":
        tasks.refine_job(cfg, args.teacher, args.student, out)
    elif args.command == "stream":
        result = tasks.stream_job(cfg, _checkpoint(args, cfg), out, args.track)
        if out is None:
            sys.stdout.write(result.metrics.table())
    elif args.command == "bench":
        table = tasks.bench_job(cfg, out)
        if out is None:
            sys.stdout.write(table)
    elif args.command == "drift":
        curve = tasks.drift_job(cfg, _checkpoint(args, cfg), args.variant, out, args.track)
        if out is None:
            sys.stdout.write(drift_csv(curve))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        run(args)
    except ValidationError as exc:
        logger.error("[Task] %s: %s", args.command, exc)
        return EXIT_VALIDATION
    except Exception:
        logger.exception("[Task] %s failed", args.command)
        return EXIT_RUNTIME
    return EXIT_OK
