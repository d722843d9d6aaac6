"""Analytic FLOPs of the layer stack, plus an instrumented cross-check.

Convention: one multiply-accumulate is 2 FLOPs.  Per layer, with ``l`` tokens
processed, width ``d`` and feed-forward width ``f``:

    attention  8 l d^2 + 4 l^2 d     (Q, K, V, O projections; scores and weighted sum)
    ffn        4 l d f
    router     4 L d                  (MoD layers only; every token of the full length L)

Normalization, softmax, activations and embedding lookups are left out of
the analytic count.  :func:`instrumented_flops` counts everything the forward
pass actually evaluates inside each layer, so the two differ by those terms.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import OpCounter
from .errors import InputError
from .model import Batch, Model, ModelConfig, forward


@dataclass
class FlopsCount:
    per_layer: list[float]
    attention: list[float]
    ffn: list[float]
    router: list[float]
    kinds: list[str]
    skip_ratios: list[float]
    seq_len: int

    @property
    def total(self) -> float:
        return float(sum(self.per_layer))

    def to_dict(self) -> dict:
        return {"total": self.total, "per_layer": self.per_layer, "attention": self.attention,
                "ffn": self.ffn, "router": self.router, "kinds": self.kinds,
                "skip_ratios": self.skip_ratios, "seq_len": self.seq_len}


def layer_flops(l_kept: float, d: int, d_ff: int) -> tuple[float, float]:
    """(attention, ffn) FLOPs for ``l_kept`` processed tokens."""
    return 8.0 * l_kept * d * d + 4.0 * l_kept * l_kept * d, 4.0 * l_kept * d * d_ff


def count_flops(config: ModelConfig, plan, skip_ratios, seq_len: int) -> FlopsCount:
    """Per-layer and total FLOPs of one forward pass over ``seq_len`` tokens.

    ``plan`` is a LayerPlan or a list of layer kinds; ``skip_ratios`` gives
    the fraction of tokens each layer skips (must be 0 for dense layers).
    """
    kinds = list(getattr(plan, "kinds", plan))
    skip = [float(s) for s in (skip_ratios if skip_ratios is not None else [0.0] * len(kinds))]
    if len(kinds) != config.n_layers or len(skip) != len(kinds):
        raise InputError(f"plan ({len(kinds)}) / skip ratios ({len(skip)}) / n_layers "
                         f"({config.n_layers}) lengths differ")
    d, f = config.d_model, config.d_ff
    att, ffn, router, per_layer = [], [], [], []
    for kind, s in zip(kinds, skip):
        if not 0.0 <= s <= 1.0:
            raise InputError(f"skip ratio {s} outside [0, 1]")
        if kind == "dense" and s != 0.0:
            raise InputError("dense layers cannot skip tokens")
        l_kept = seq_len * (1.0 - s)
        a, m = layer_flops(l_kept, d, f)
        r = 4.0 * seq_len * d if kind == "mod" else 0.0
        att.append(a)
        ffn.append(m)
        router.append(r)
        per_layer.append(a + m + r)
    return FlopsCount(per_layer, att, ffn, router, kinds, skip, seq_len)


def dense_flops(config: ModelConfig, seq_len: int) -> float:
    return count_flops(config, ["dense"] * config.n_layers, None, seq_len).total


def savings(count: FlopsCount, config: ModelConfig) -> float:
    """Fraction of dense-stack FLOPs removed (negative if routing overhead dominates)."""
    base = dense_flops(config, count.seq_len)
    return 1.0 - count.total / base if base else 0.0


@dataclass
class InstrumentedCount:
    per_layer: list[float]
    skip_ratios: list[float]
    by_kind: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.per_layer))


def instrumented_flops(model: Model, seqs, mod_config=None) -> InstrumentedCount:
    """Average per-sequence FLOPs of each layer, counted op by op during a forward pass."""
    batch = Batch.of(seqs)
    with OpCounter() as counter:
        res = forward(model, batch, mod_config=mod_config)
    per_layer = [counter.by_scope.get(f"layer{i}", 0.0) / batch.size for i in range(model.config.n_layers)]
    skip = [res.routing[i].skip_ratio if i in res.routing else 0.0 for i in range(model.config.n_layers)]
    return InstrumentedCount(per_layer, skip, dict(counter.by_kind))


def flops_csv(rows: dict[str, FlopsCount]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "layer", "kind", "skip_ratio", "attention", "ffn", "router", "total"])
    for name, c in rows.items():
        for i in range(len(c.kinds)):
            w.writerow([name, i, c.kinds[i], repr(c.skip_ratios[i]), repr(c.attention[i]),
                        repr(c.ffn[i]), repr(c.router[i]), repr(c.per_layer[i])])
        w.writerow([name, "all", "", "", repr(float(np.sum(c.attention))), repr(float(np.sum(c.ffn))),
                    repr(float(np.sum(c.router))), repr(c.total)])
    return buf.getvalue()
