"""Accuracy and FLOPs across the routing ratios 0.17, 0.34, 0.51 and 0.68.

    python demos/routing_sweep.py [out_dir]

Each ratio is a full run of the pipeline (warm-up, profile, convert, tune,
evaluate) with the lookup preset, so the dense model is the same in every
row.  The capacity column evaluates with the same top-k routing used in
training; the threshold column lets the router decide alone (keep_prob >= 0.5).
Takes about four minutes on one core.
"""

import sys
from pathlib import Path

from modlab.experiment import ExperimentConfig, run_experiment, sweep_csv, sweep_row
from modlab.modlayer import STANDARD_ROUTING_RATIOS

out = Path(sys.argv[1] if len(sys.argv) > 1 else "sweep_out")
rows = []
print(f"{'alpha':>6} {'dense':>7} {'capacity':>9} {'threshold':>10} {'FLOPs saved':>12}")
for alpha in STANDARD_ROUTING_RATIOS:
    res = run_experiment(ExperimentConfig.preset(routing_ratio=alpha), out / f"alpha_{alpha}")
    row = sweep_row(res, alpha)
    rows.append(row)
    print(f"{alpha:6.2f} {row['dense_accuracy']:7.3f} {row['mod_accuracy_capacity']:9.3f} "
          f"{row['mod_accuracy_inference']:10.3f} {100 * row['savings']:11.1f}%")

(out / "sweep.csv").write_text(sweep_csv(rows))
print(f"\nwrote {out / 'sweep.csv'}")
