"""Run the desk-scale experiment end to end and print the test reports.

Steps: generate synthetic captures, split them, train the default encoder, evaluate it on the
held-out test part, then LoRA fine-tune a fresh head on top of the trained encoder and evaluate
again. Everything is written under the work directory (default runs/desk). The seed defaults to
CANIDS_SEED (0 when unset).

When executed directly from the repository root Python may not be able to import the `canids`
package unless the repo root is on PYTHONPATH, so the repo root is added to sys.path.

Usage:
    python scripts/run_desk_experiment.py [--work runs/desk] [--seed N] [--duration 60] [--skip-lora]
"""
import argparse
import os
import sys

# Ensure repo root is on sys.path so `canids` and `ingest` can be imported
repo_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if repo_root not in sys.path:
    sys.path.insert(0, repo_root)

from canids.cli import run
from canids.config import env_int


def main() -> int:
    parser = argparse.ArgumentParser(description='Desk-scale generate/split/train/eval pipeline')
    parser.add_argument('--work', default=os.path.join('runs', 'desk'))
    parser.add_argument('--seed', type=int, default=env_int('CANIDS_SEED', 0))
    parser.add_argument('--duration', type=float, default=60.0)
    parser.add_argument('--skip-lora', action='store_true')
    parser.add_argument('--log-level', default='INFO')
    args = parser.parse_args()

    config_dir = os.path.join(repo_root, 'config')
    data = os.path.join(args.work, 'generated')
    split = os.path.join(args.work, 'split')
    encoder = os.path.join(args.work, 'encoder')
    lora = os.path.join(args.work, 'encoder_lora')
    seed = str(args.seed)
    common = ['--log-level', args.log_level]

    steps = [
        ['generate', '--out', data, '--seed', seed, '--duration', str(args.duration)],
        ['split', '--in', data, '--out', split, '--seed', seed,
         '--config', os.path.join(config_dir, 'desk_common.cfg')],
        ['train', '--config', os.path.join(config_dir, 'desk_encoder.cfg'), '--data', split,
         '--seed', seed, '--out', encoder],
        ['eval', '--model', os.path.join(encoder, 'model.ckpt'), '--data', os.path.join(split, 'test'),
         '--report', os.path.join(encoder, 'test_report.json')],
    ]
    if not args.skip_lora:
        steps += [
            ['train', '--config', os.path.join(config_dir, 'desk_lora.cfg'), '--data', split,
             '--base', os.path.join(encoder, 'model.ckpt'), '--lora', '--seed', seed, '--out', lora],
            ['eval', '--model', os.path.join(lora, 'model.ckpt'), '--data', os.path.join(split, 'test'),
             '--report', os.path.join(lora, 'test_report.json')],
        ]

    for step in steps:
        print(f"==> canids {' '.join(step)}")
        status = run(common + step)
        if status != 0:
            print(f'Step {step[0]} failed with exit status {status}')
            return status
    return 0


if __name__ == '__main__':
    sys.exit(main())
