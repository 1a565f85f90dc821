"""C_chi over the (w1, w2) and (lambda, mu) grids.

Usage: python scripts/run_sensitivity.py [--out runs/sensitivity]
"""

import argparse
import sys

from deformhom.cli import dispatch


def main(argv):
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="configs/reference_scenario.toml")
    p.add_argument("--out", default="runs/sensitivity")
    a = p.parse_args(argv)
    for sweep in ("geometry", "lame"):
        rc = dispatch(["sensitivity", "--sweep", sweep, "--config", a.config,
                       "--out", f"{a.out}/{sweep}", "--force"])
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
