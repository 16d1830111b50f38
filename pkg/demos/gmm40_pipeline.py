"""
End-to-end run on the 40-mode mixture
=====================================

The command line drives training, evaluation and plotting from a preset.
The smoke profile finishes in under a minute; drop ``--profile smoke`` (or
use ``reduced``) for real runs, which take many CPU-hours.
"""

import json
import os
import sys
import tempfile

from ctds.cli import main

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="ctds-")
preset = "gmm40-ctds"

main(["train", "--preset", preset, "--profile", "smoke", "--output-dir", out])
main(["eval", out, "--trials", "1"])
with open(os.path.join(out, "metrics.json")) as f:
    print(json.dumps(json.load(f), indent=2))

# beta_hist_pre.csv (before training) and beta_hist.csv (after) hold the
# temperature histograms; plot renders them and the samples to SVG.
try:
    main(["plot", out])
except ImportError:
    print("matplotlib not installed; skipping plots")
print("artifacts in", out, sorted(os.listdir(out)))
