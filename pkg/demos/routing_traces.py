"""Which tokens does the router skip?

    python demos/routing_traces.py [out_dir]

Runs the preset at alpha = 0.34, then prints the routing trace of a few
held-out sequences for the converted layer: one character per token,
upper case when the token is processed and lower case when it skips the
layer (i = image cell, q = question, r = response).  Threshold routing is
what the trace records; question tokens are protected only during training.
"""

import json
import sys
from pathlib import Path

from modlab.experiment import FILES, ExperimentConfig, run_experiment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "traces_out")
res = run_experiment(ExperimentConfig.preset(routing_ratio=0.34), out)
print((out / FILES["summary"]).read_text())

header, *lines = (out / FILES["traces"]).read_text().splitlines()
print("trace header:", header)
for rec in map(json.loads, lines[:8]):
    marks = "".join(s[0].upper() if keep else s[0] for s, keep in zip(rec["segments"], rec["selected"]))
    probs = " ".join(f"{p:.2f}" for p in rec["keep_prob"])
    print(f"seq {rec['sequence']:>12} layer {rec['layer']}  {marks}   keep_prob {probs}")
