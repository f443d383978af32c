#!/usr/bin/env python3
"""Run the acceptance checks and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py            # all criteria (~18 min on one core)
    python3 scripts/run_acceptance.py --fast     # skip the end-to-end training runs
"""
import argparse
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    ap.add_argument("--fast", action="store_true", help="skip criteria 8 and 9")
    args = ap.parse_args()
    argv = [str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider",
            "--rootdir", str(ROOT)]
    if args.fast:
        argv += ["-m", "not slow"]
    return int(pytest.main(argv))


if __name__ == "__main__":
    sys.exit(main())
