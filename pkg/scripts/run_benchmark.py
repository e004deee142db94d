"""S vs IP-D timing table over eight watersheds, plus the model-parallel timing."""

import sys

from domst.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "runs/bench"
    sys.exit(main(["bench", "--out", out, "--watersheds", "8", "--pixels", "8", "--days", "250",
                   "--lookback", "20", "--epochs", "2", "--heads", "4", "--pool", "4",
                   "--variants", "singlehead_plus_p,multihead_plus_p", "--model-parallel", "--workers", "4"]))
