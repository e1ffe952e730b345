#!/usr/bin/env python3
"""rsc entry point: gen-data, train, eval, ablate and gradcheck."""
import sys
from pathlib import Path

# Add src directory to path
sys.path.insert(0, str(Path(__file__).parent))

from rsc_runner.cli import run


def main():
    """Main entry point."""
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
