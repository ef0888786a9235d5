"""Command-line entrypoint (project root).

Runs the ``canids`` command without installing anything; equivalent to ``python -m canids``.

Usage examples:
  - python main.py generate --out data/generated
  - python main.py split --in data/generated --p 0.1 --out data/split
  - python main.py train --config config/desk_encoder.cfg --data data/split --out runs/encoder
  - python main.py eval --model runs/encoder/model.ckpt --data data/split/test --report runs/encoder/test.json
"""
from dotenv import load_dotenv

from canids.cli import main

# Load environment variables from .env (if present)
load_dotenv()

if __name__ == '__main__':
    main()
