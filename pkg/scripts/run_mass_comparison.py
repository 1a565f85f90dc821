"""Mass curves of the micro-macro model and the two alternative models.

Usage: python scripts/run_mass_comparison.py [--micro-eps 1/8] [--out runs/mass]
"""

import sys

from deformhom.cli import dispatch


def main(argv):
    args = ["compare-alternatives", "--config", "configs/reference_scenario.toml", "--out", "runs/mass", "--force"]
    return dispatch(args + list(argv))


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
