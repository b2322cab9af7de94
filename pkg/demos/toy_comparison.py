# The two-mode toy: Re-MeanFlow vs. 2-rectified flow vs. MeanFlow from scratch.
#
# Each method gets the same number of optimizer steps (20k in total at full
# size). Re-MeanFlow and the 2-rectified flow share the first flow and its
# couplings. This script runs a reduced budget so it finishes in about a minute;
# pass --full for the real budgets (several minutes on one core).

import sys
import tempfile
from pathlib import Path

from reflowlab.config import load_config
from reflowlab.pipeline import run_comparison

root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "toy_fast.yaml")
if "--full" not in sys.argv:
    cfg = cfg.with_overrides(**{
        "stage1.iters": 2000, "stage3.iters": 2000,
        "comparison.second_flow_iters": 2000, "comparison.scratch_iters": 4000,
        "reflow.n_pairs": 20000, "eval.n_samples": 5000,
    })

out = Path(tempfile.mkdtemp(prefix="toy_compare_"))
res = run_comparison(cfg, out)

print(f"{'method':18s} {'outliers':>9s} {'energy dist':>12s} {'fwd evals':>12s}")
for name, rep in res.reports.items():
    print(f"{name:18s} {rep.outlier_rate:9.5f} {rep.energy_distance:12.5f} {rep.budget['forward_evals']:12,d}")

# scatter plots and the quality-vs-compute curve are plain SVG files
for svg in sorted((out / "figures").glob("*.svg")):
    print(svg)
print("manifest:", res.manifest)
