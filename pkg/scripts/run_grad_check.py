"""Finite-difference gradient check of all three variants."""

import sys

from domst.cli import main

if __name__ == "__main__":
    sys.exit(main(["grad-check", "--pixels", "8", "--lookback", "16", "--heads", "2", "--seed", "42"]))
