"""
Entry point of the design pipeline.

    python app.py train --corpus chain_set.jsonl --splits chain_set_splits.json --out runs/cath
"""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
