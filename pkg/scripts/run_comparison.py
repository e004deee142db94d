"""Three-variant NSE comparison on four synthetic watersheds, five seeds each."""

import sys

from domst.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/comparison"
    sys.exit(main(["compare", "--out", out, "--watersheds", "4", "--pixels", "8", "--days", "400",
                   "--noise", "0.05", "--lookback", "20", "--epochs", "4", "--heads", "4",
                   "--seeds", "42,43,44,45,46", "--pool", "4"]))
