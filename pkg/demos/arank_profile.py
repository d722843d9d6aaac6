"""Where is the redundancy?  ARank on constructed inputs and on a trained model.

    python demos/arank_profile.py

First part: sequences built from r distinct rows have attention logits of
rank at most r, and ARank reports exactly that.  Second part: the warm-up
model of the lookup preset, profiled over 50 training sequences.  Both of
its layers come out at full numerical rank, so the threshold rule with
keep_top_k=1 converts nothing; the preset converts layer 0 by hand.
"""

import numpy as np

from modlab.arank import profile_arank, profile_layer_inputs, report_from_profile, select_mod_layers
from modlab.experiment import ExperimentConfig
from modlab.model import Model, ModelConfig
from modlab.tasks import make_splits
from modlab.training import evaluate, train_dense

rng = np.random.default_rng(0)
probe = Model(ModelConfig(n_layers=3, d_model=32, n_heads=2, d_ff=64, vocab_size=8, max_seq_len=24, seed=7))
print("constructed inputs: 20 tokens drawn from r distinct rows")
for r in (1, 2, 4, 8, 20):
    inputs = []
    for _ in range(5):
        base = rng.normal(size=(r, 32))
        inputs.append(base[np.arange(20) % r][rng.permutation(20)])
    rep = report_from_profile(profile_layer_inputs(probe, inputs))
    print(f"  r={r:2d}  ARank per layer {[round(a, 2) for a in rep.arank]}")

cfg = ExperimentConfig.preset()
splits = make_splits(cfg.task, cfg.n_train, cfg.n_heldout)
print(f"\nwarm-up: {cfg.train.warmup_steps} steps on a {cfg.task.grid_rows}x{cfg.task.grid_cols} lookup task")
dense, rep = train_dense(Model(cfg.model), splits.train, cfg.train, eval_data=splits.heldout)
print("  held-out accuracy by step:", [(e["step"], e["accuracy"]) for e in rep.evals])
print("  final:", evaluate(dense, splits.heldout).accuracy)

arank = profile_arank(dense, splits.train, n_samples=50, seed=0)
print(f"\nARank (tolerance {arank.rel_tol:g} x largest singular value, {arank.sample_count} samples)")
for i, (a, s) in enumerate(zip(arank.arank, arank.std)):
    print(f"  layer {i}: {a:.3f} +- {s:.3f}   (sequence length {cfg.task.seq_len}, head width {cfg.model.head_dim})")
plan = select_mod_layers(arank, keep_top_k=1)
print(f"threshold rule, keep_top_k=1: threshold {plan.threshold:.3f} -> {plan.kinds}")
