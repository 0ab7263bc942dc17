#!/usr/bin/env python3
"""
Prints the header of a DYSL container (dataset or checkpoint) without
reading its payload.
"""

import argparse
import json
import os
import sys

# --- Path Setup ---
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.abspath(os.path.join(SCRIPT_DIR, '..'))
sys.path.insert(0, PROJECT_ROOT)

# --- Local/Project Imports ---
try:
    from dyslim.data_io import read_header
    from dyslim.errors import FormatError
except ImportError:
    print("Error: The 'dyslim' package is not found.", file=sys.stderr)
    print("Please ensure the script is in a 'tools' directory next to the 'dyslim' package.", file=sys.stderr)
    sys.exit(1)

# Header fields that are too long to print in full.
BULKY_FIELDS = ("manifest", "normalizer", "rng_state")


def describe(path: str, full: bool) -> None:
    header = read_header(path)
    print(f"{path}: {header.get('kind', 'unknown')} container")
    for key in sorted(header):
        value = header[key]
        if key in BULKY_FIELDS and not full:
            size = len(value) if isinstance(value, (list, dict)) else 1
            print(f"  {key}: <{size} entries, use --full>")
        elif isinstance(value, dict):
            print(f"  {key}: {json.dumps(value, sort_keys=True)}")
        else:
            print(f"  {key}: {value}")


def main():
    parser = argparse.ArgumentParser(
        description="Show DYSL container headers.",
        formatter_class=argparse.RawTextHelpFormatter
    )
    parser.add_argument('paths', nargs='+', help="Dataset or checkpoint files.")
    parser.add_argument('--full', action='store_true', help="Print manifest, normalizer and RNG state too.")
    args = parser.parse_args()

    failed = False
    for path in args.paths:
        try:
            describe(path, args.full)
        except (OSError, FormatError) as e:
            print(f"Error: {e}", file=sys.stderr)
            failed = True
    sys.exit(4 if failed else 0)


if __name__ == '__main__':
    main()
