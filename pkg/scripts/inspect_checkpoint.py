"""
Utility: inspect a checkpoint or adapter file and print its JSON header and tensor table.
Run: python scripts/inspect_checkpoint.py <path-to-checkpoint>
"""
import json
import os
import sys

repo_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if repo_root not in sys.path:
    sys.path.insert(0, repo_root)

from canids.checkpoint import CheckpointError, read_container

if len(sys.argv) < 2:
    print("Usage: python scripts/inspect_checkpoint.py <model.ckpt>")
    sys.exit(2)

p = sys.argv[1]
try:
    header, tensors, digest = read_container(p)
except (CheckpointError, OSError) as e:
    print('error:', e)
    sys.exit(1)

entries = header.pop('tensors')
print('digest:', digest)
print('kind:', header.get('kind'))
if 'vocab' in header:
    header['vocab'] = {k: v for k, v in header['vocab'].items() if k != 'tokens'}
print('\nheader:\n')
print(json.dumps(header, indent=2, sort_keys=True))
print('\ntensors:')
for entry in entries:
    flags = 'frozen' if entry.get('frozen') else ''
    print(f" - {entry['name']} {tuple(entry['shape'])} {flags}".rstrip())
print(f'\n{len(entries)} tensors, {sum(t.size for t in tensors.values())} values')
