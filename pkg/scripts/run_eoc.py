"""Convergence study: micro runs for several eps against the micro-macro model.

Usage: python scripts/run_eoc.py [--config configs/reference_scenario.toml] [--eps 1,2,4,8,16] [--out runs/eoc]
"""

import sys

from deformhom.cli import dispatch


def main(argv):
    args = ["eoc", "--config", "configs/reference_scenario.toml", "--out", "runs/eoc", "--force"]
    return dispatch(args + list(argv))


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
