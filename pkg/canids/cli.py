"""
Command-line entry point.

Purpose: One ``canids`` command wiring the toolkit into its workflow:

    generate  synthetic per-class captures + manifest
    split     train / validation / test directories + split manifest
    train     checkpoint, history CSV and training curves
    eval      metrics report (JSON + table)
    predict   label and class probabilities for one CSV line
    info      checkpoint header and parameter summary

Key decisions:
- Every failure of a toolkit error family, a usage error or a missing file exits with status 1
  and a one-line diagnostic on stderr
- Run-config precedence: defaults < --config file < named flags (--seed, --arch, --p, ...)
  < --set key=value overrides
- All randomness comes from explicit seeds; throughput and wall-clock timings only go to the log
- train --captures rebuilds the split from its manifest and the source captures instead of the
  exported part directories; CANIDS_PLOT=false turns training curves off like --no-plot
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from canids.checkpoint import load_checkpoint, read_header, save_checkpoint
from canids.config import ConfigError, RunConfig, dump_run_config, env_flag, load_run_config, setup_logging
from canids.dataset import (
    PARTS,
    DatasetBundle,
    DatasetError,
    build_bundle,
    export_bundle,
    load_split_manifest,
    materialize,
    save_split_manifest,
)
from canids.lora import LoraError, attach_from_config, save_adapters
from canids.metrics import MetricsError, compute_metrics, confusion_matrix, format_report_table
from canids.model import (
    ModelError,
    TransformerModel,
    model_summary,
    predict_label,
    predict_records,
    reinit_head,
)
from canids.nn_core import ShapeError
from canids.reporting import plot_history_svg
from canids.textify import DEFAULT_VOCAB, TokenizerError
from canids.train import OptimizerError, TrainingError, train_run
from ingest.can_log import AttackClass, CanLogError, LabeledRecord, parse_frame
from ingest.capture_store import load_capture_path, save_captures
from ingest.traffic_sim import (
    TrafficSimError,
    default_attack_spec,
    desk_profile,
    generate_table_layout,
    load_profile,
    parse_attack_list,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1

CHECKPOINT_NAME = 'model.ckpt'
ADAPTERS_NAME = 'adapters.ckpt'
HISTORY_NAME = 'history.csv'
CURVES_NAME = 'curves.svg'
RUN_CONFIG_NAME = 'run.cfg'
SPLIT_MANIFEST_NAME = 'split_manifest.json'

ERROR_FAMILIES = (
    CanLogError, TrafficSimError, DatasetError, TokenizerError, ModelError, LoraError,
    TrainingError, OptimizerError, MetricsError, ConfigError, ShapeError, OSError,
)


class CliError(Exception):
    """Invalid combination of command-line arguments or inputs."""
    pass


class _ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAILURE, f'{self.prog}: error: {message}\n')


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=Path, help='Run-config file (key = value)')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one run-config key, e.g. train.epochs=3 (repeatable)')


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog='canids', description='Transformer intrusion detection for CAN bus traffic')
    parser.add_argument('--log-level', default=None,
                        help='Logging level (DEBUG, INFO, WARNING, ...); default CANIDS_LOG_LEVEL or INFO')
    sub = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    gen = sub.add_parser('generate', help='Generate synthetic per-class captures')
    gen.add_argument('--profile', default='desk', help="'desk' or a key=value profile file")
    gen.add_argument('--attacks', default='dos,fuzzy,gear,rpm', help='Comma separated attack classes')
    gen.add_argument('--duration', type=float, default=None, help='Capture length in seconds')
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--out', type=Path, required=True)

    split = sub.add_parser('split', help='Split captures into train/validation/test')
    split.add_argument('--in', dest='in_dir', type=Path, required=True)
    split.add_argument('--p', type=float, default=None, help='Attack subsample fraction')
    split.add_argument('--seed', type=int, default=None)
    split.add_argument('--out', type=Path, required=True)
    _add_config_args(split)

    train = sub.add_parser('train', help='Train a classifier (optionally LoRA on a base checkpoint)')
    train.add_argument('--data', type=Path, default=None, help='Split output directory')
    train.add_argument('--arch', choices=('encoder', 'decoder'), default=None)
    train.add_argument('--lora', action='store_true', help='Attach LoRA adapters and freeze the base')
    train.add_argument('--base', type=Path, default=None, help='Start from this checkpoint with a fresh head')
    train.add_argument('--seed', type=int, default=None)
    train.add_argument('--captures', type=Path, default=None,
                       help='Rebuild the split from these source captures and <data>/split_manifest.json')
    train.add_argument('--no-plot', action='store_true')
    train.add_argument('--out', type=Path, default=None)
    _add_config_args(train)

    ev = sub.add_parser('eval', help='Evaluate a checkpoint on labeled captures')
    ev.add_argument('--model', type=Path, required=True)
    ev.add_argument('--data', type=Path, required=True, help='Capture directory or single CSV')
    ev.add_argument('--report', type=Path, default=None, help='Write the report JSON here')
    ev.add_argument('--batch-size', type=int, default=32)

    pred = sub.add_parser('predict', help='Classify one CSV line')
    pred.add_argument('--model', type=Path, required=True)
    pred.add_argument('--line', required=True)

    info = sub.add_parser('info', help='Show checkpoint header and parameter summary')
    info.add_argument('--model', type=Path, required=True)
    return parser


def _run_config(args: argparse.Namespace, named: Sequence[str]) -> RunConfig:
    return load_run_config(args.config, [*named, *args.overrides])


def cmd_generate(args: argparse.Namespace) -> int:
    if args.profile == 'desk':
        profile = desk_profile(duration_s=60.0 if args.duration is None else args.duration, seed=args.seed)
    else:
        profile = load_profile(args.profile)
        if args.duration is not None:
            profile = replace(profile, duration_s=args.duration).validate()
    specs = [default_attack_spec(kind) for kind in parse_attack_list(args.attacks)]
    if not specs:
        raise CliError('--attacks selects no attack class')
    captures, manifest = generate_table_layout(profile, specs, args.seed)
    save_captures(captures, args.out, manifest)
    logger.info(f'Generated {sum(len(c) for c in captures.values())} frames into {args.out}')
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    named = []
    if args.p is not None:
        named.append(f'split.p={args.p}')
    if args.seed is not None:
        named.append(f'split.seed={args.seed}')
    cfg = _run_config(args, named)
    if not args.in_dir.is_dir():
        raise CliError(f'--in must be a capture directory: {args.in_dir}')
    records = load_capture_path(args.in_dir)
    sources = sorted(path.name for path in args.in_dir.glob('*.csv'))
    bundle = build_bundle(records, cfg.split)
    export_bundle(bundle, args.out)
    save_split_manifest(bundle, cfg.split, args.out / SPLIT_MANIFEST_NAME, sources, len(records))
    return EXIT_OK


def _load_part(root: Path, name: str, required: bool = True) -> List[LabeledRecord]:
    path = root / name
    if not path.is_dir():
        if required:
            raise CliError(f'split directory {root} has no {name}/ part')
        return []
    return load_capture_path(path)


def cmd_train(args: argparse.Namespace) -> int:
    named = []
    if args.arch is not None:
        named.append(f'model.arch={args.arch}')
    if args.seed is not None:
        named.extend(f'{key}={args.seed}' for key in ('model.seed', 'train.seed', 'lora.seed'))
    if args.lora:
        named.append('lora.enabled=true')
    cfg = _run_config(args, named)
    data_dir = args.data or Path(cfg.paths.split_dir)
    out_dir = args.out or Path(cfg.paths.out_dir)

    if args.captures is not None:
        manifest = load_split_manifest(data_dir / SPLIT_MANIFEST_NAME)
        bundle = materialize(manifest, load_capture_path(args.captures))
    else:
        bundle = DatasetBundle(
            train=_load_part(data_dir, PARTS[0]),
            validation=_load_part(data_dir, PARTS[1]),
            test=_load_part(data_dir, PARTS[2], required=False),
        )
    bundle.log_summary()

    base_digest: Optional[str] = None
    if args.base is not None:
        model = load_checkpoint(args.base)
        base_digest = model.checkpoint_digest
        if model.arch != cfg.model.arch:
            logger.warning(f'Base checkpoint is a {model.arch}; ignoring model.arch={cfg.model.arch}')
        reinit_head(model, cfg.lora.seed)
    else:
        model = TransformerModel(cfg.model, DEFAULT_VOCAB, cfg.text)
    if cfg.lora.enabled:
        attach_from_config(model, cfg.lora)
    summary = model_summary(model)
    logger.info(f'{model.arch} model: {summary.total} parameters, {summary.trainable} trainable '
                f'({summary.fraction:.2%})')

    result = train_run(model, bundle, cfg.train)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / CHECKPOINT_NAME)
    if cfg.lora.enabled and base_digest is not None:
        save_adapters(model, out_dir / ADAPTERS_NAME, base_digest)
    result.history.write_csv(out_dir / HISTORY_NAME)
    if not args.no_plot and env_flag('CANIDS_PLOT', True):
        plot_history_svg(result.history, out_dir / CURVES_NAME)
    (out_dir / RUN_CONFIG_NAME).write_text(dump_run_config(cfg), encoding='utf-8')
    logger.info(f'Best epoch {result.best_epoch} (BA={result.best_ba:.6f}); artifacts in {out_dir}')
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    records = load_capture_path(args.data)
    if not records:
        raise CliError(f'no records in {args.data}')
    started = time.perf_counter()
    predictions, _ = predict_records(model, records, args.batch_size)
    elapsed = time.perf_counter() - started
    logger.info(f'Inference: {len(records)} messages in {elapsed:.2f}s '
                f'({len(records) / max(elapsed, 1e-9):.0f} messages/s)')
    labels = np.fromiter((int(rec.label) for rec in records), dtype=np.int64, count=len(records))
    report = compute_metrics(confusion_matrix(predictions, labels, model.config.n_classes))
    if args.report is not None:
        report.write_json(args.report)
        logger.info(f'Wrote report to {args.report}')
    print(format_report_table(report), end='')
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    label, probs = predict_label(model, parse_frame(args.line))
    print(label.display_name)
    for cls, value in zip(AttackClass, probs):
        print(f'{cls.display_name}\t{value:.6f}')
    return EXIT_OK


def cmd_info(args: argparse.Namespace) -> int:
    header = read_header(args.model)
    model = load_checkpoint(args.model)
    summary = model_summary(model)
    print(f'checkpoint: {args.model}')
    print(f'digest: {model.checkpoint_digest}')
    print(f"vocab: {header['vocab']['version']} ({header['vocab']['hash'][:12]})")
    for key, value in sorted(header['model_config'].items()):
        print(f'model.{key}: {value}')
    for adapter in header.get('adapters', []):
        print(f"adapter: {adapter['layer']} r={adapter['r']} alpha={adapter['alpha']}")
    print(f'parameters: {summary.total}')
    print(f'trainable: {summary.trainable} ({summary.fraction:.2%})')
    for group, count in sorted(summary.groups.items()):
        print(f'  {group}: {count}')
    return EXIT_OK


COMMANDS = {
    'generate': cmd_generate,
    'split': cmd_split,
    'train': cmd_train,
    'eval': cmd_eval,
    'predict': cmd_predict,
    'info': cmd_info,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (CliError, *ERROR_FAMILIES) as exc:
        logger.debug('Command failed', exc_info=True)
        print(f'canids {args.command}: {type(exc).__name__}: {exc}', file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run())
