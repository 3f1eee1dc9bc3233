"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 partial data
failure (some utterances could not be processed; the rest were).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, load_config
from .io import FormatError, parse_manifest
from .metrics import ALL_METRICS, MetricError
from .model import AblationFlags
from .pipeline import CACHE_ENV, PipelineError, cmd_eval, cmd_prepare, cmd_synth, cmd_train, cmd_train_units
from .training import CheckpointError, TrainingError
from .units import UnitError

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for partial data failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file or preset name (default, smoke)")
    common.add_argument("--manifest", required=True, help="tab-separated utterance manifest")
    common.add_argument("--out", required=True, help="output directory (for prepare: the cache root)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--cache", default=None, help=f"feature cache root (default ${CACHE_ENV} or ~/.cache/lip2speech)")
    common.add_argument("--split", choices=("train", "val", "test"), default=None, help="restrict to one split")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--no-l2t-sra", action="store_true", help="drop phoneme attention; use visual features only")
    common.add_argument("--no-acoustic-branch", action="store_true", help="drop the speaker-prompt path")
    common.add_argument("--no-energy-predictor", action="store_true", help="drop the energy predictor")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lip2speech", description="Lip-to-speech feature preparation, training, synthesis and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="extract features into the cache")
    sub.add_parser("train-units", parents=[common], help="fit the speech-unit codebook")
    p = sub.add_parser("train", parents=[common], help="train the model")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p = sub.add_parser("synth", parents=[common], help="synthesize waveforms")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt-source", default=None, help="utterance id whose audio supplies the speaker prompt")
    p = sub.add_parser("eval", parents=[common], help="score synthesized audio against references")
    p.add_argument("--synth-dir", required=True)
    p.add_argument("--metrics", default=",".join(ALL_METRICS),
                   help=f"comma-separated subset of {','.join(ALL_METRICS)}")
    return parser


def _resolve_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    flags = AblationFlags(
        no_l2t_sra=cfg.flags.no_l2t_sra or args.no_l2t_sra,
        no_acoustic_branch=cfg.flags.no_acoustic_branch or args.no_acoustic_branch,
        no_energy_predictor=cfg.flags.no_energy_predictor or args.no_energy_predictor,
    )
    return dataclasses.replace(cfg, flags=flags)


def run(args) -> int:
    cfg = _resolve_config(args)  # validated before any data is touched
    records = parse_manifest(args.manifest)
    if args.split:
        records = [r for r in records if r.split == args.split]
    if not records:
        raise UsageError("manifest selects no utterances")
    cmd = args.command
    if cmd == "prepare":
        result = cmd_prepare(records, cfg, args.out, workers=args.workers)
    elif cmd == "train-units":
        result = cmd_train_units(records, cfg, args.out, args.cache)
    elif cmd == "train":
        result = cmd_train(records, cfg, args.out, args.cache, resume=args.resume)
    elif cmd == "synth":
        result = cmd_synth(records, cfg, args.checkpoint, args.out, args.cache, prompt_source=args.prompt_source)
    else:
        metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
        unknown = sorted(set(metrics) - set(ALL_METRICS))
        if unknown or not metrics:
            raise UsageError(f"unknown metrics: {unknown}; choose from {', '.join(ALL_METRICS)}")
        result = cmd_eval(records, args.synth_dir, args.out, metrics, workers=args.workers)
        print(result.report.table())
    for uid, reason in result.failures:
        print(f"FAILED {uid}: {reason}", file=sys.stderr)
    return result.exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (UsageError, ConfigError, FormatError, PipelineError, CheckpointError, MetricError, UnitError,
            TrainingError, OSError) as exc:
        # the whole command failed: bad input, missing cache or incompatible checkpoint
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
