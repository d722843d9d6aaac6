"""Mixture-of-depths layers with one router shared by every converted block.

A MoD block routes each token with ``softmax(x W_R + b_R)`` (class 0 = skip,
class 1 = keep), runs the wrapped transformer block on the selected tokens
only, scales the block's residual update by the keep probability and
scatters it back.  Skipped tokens pass through unchanged and are invisible
as keys/values to the selected ones.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import InputError, ShapeError
from .model import Batch, ForwardPass, LayerParams, Model, Segment, block_delta

SELECTION_MODES = ("capacity_topk", "threshold")
STANDARD_ROUTING_RATIOS = (0.17, 0.34, 0.51, 0.68)
PROB_CLAMP = 1e-9
_HALF_UP_SLACK = 1e-9


class DegenerateSelectionWarning(UserWarning):
    """A MoD layer selected no tokens and acts as the identity."""


@dataclass(frozen=True)
class MoDConfig:
    routing_ratio: float = 0.34
    selection_mode: str = "capacity_topk"
    threshold: float = 0.5
    force_keep_question: bool = True
    loss_coefficient: float = 0.01
    # Testing hook: bypass the router, keep every token with score exactly 1.
    pin_scores: bool = False

    def __post_init__(self):
        if not 0.0 <= self.routing_ratio < 1.0:
            raise InputError(f"routing_ratio must lie in [0, 1), got {self.routing_ratio}")
        if self.selection_mode not in SELECTION_MODES:
            raise InputError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.loss_coefficient < 0:
            raise InputError("loss_coefficient must be >= 0")

    def for_inference(self) -> "MoDConfig":
        """Threshold routing with the router running free (no forced question tokens)."""
        return replace(self, selection_mode="threshold", force_keep_question=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MoDConfig":
        return cls(**d)


@dataclass(eq=False)
class RouterState:
    """The shared router.  ``W`` is (d_model, 2), ``b`` is (2,); both alias ``model.params``."""
    W: np.ndarray
    b: np.ndarray
    prefix: str = "router"


@dataclass(eq=False)
class RoutingDecision:
    keep_prob: np.ndarray
    skip_prob: np.ndarray
    selected: np.ndarray | None = None
    eligible: np.ndarray | None = None
    capacity: np.ndarray | None = None
    segments: np.ndarray | None = None
    keep_var: Var | None = field(default=None, repr=False)
    skip_var: Var | None = field(default=None, repr=False)

    @property
    def target(self) -> np.ndarray:
        """One-hot keep target: 1 where the token was selected."""
        return self.selected.astype(np.float64)

    @property
    def skip_ratio(self) -> float:
        return float(1.0 - self.selected.mean())

    @property
    def skipped_count(self) -> int:
        return int(self.selected.size - np.count_nonzero(self.selected))

    def segment_skip_ratios(self) -> dict[str, float]:
        out = {}
        for seg in Segment:
            m = self.segments == seg
            n = int(m.sum())
            if n:
                out[seg.name.lower()] = float(n - np.count_nonzero(self.selected[m])) / n
        return out

    def segment_counts(self) -> dict[str, tuple[int, int]]:
        """Per segment: (skipped, total)."""
        out = {}
        for seg in Segment:
            m = self.segments == seg
            out[seg.name.lower()] = (int(m.sum() - np.count_nonzero(self.selected[m])), int(m.sum()))
        return out


def capacity(n_eligible: int, routing_ratio: float) -> int:
    """Tokens kept out of ``n_eligible``: round-half-up of (1 - ratio) * n, at least 1 if any."""
    if n_eligible <= 0:
        return 0
    k = math.floor((1.0 - routing_ratio) * n_eligible + 0.5 + _HALF_UP_SLACK)
    return int(min(max(k, 1), n_eligible))


def _router_probs(x: Var, W: Var, b: Var) -> Var:
    return ad.softmax(x @ W + b)


def route(x, router: RouterState) -> RoutingDecision:
    """Two-class routing probabilities for token matrix (L, d) or batch (B, L, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != router.W.shape[0]:
        raise ShapeError(f"route: token width {x.shape[-1]} != router input {router.W.shape[0]}")
    p = _router_probs(ad.constant(x), ad.constant(router.W), ad.constant(router.b)).value
    return RoutingDecision(keep_prob=p[..., 1], skip_prob=p[..., 0])


def _select_row(keep: np.ndarray, seg: np.ndarray, config: MoDConfig):
    forced = (seg == Segment.QUESTION) if config.force_keep_question else np.zeros(seg.shape, bool)
    eligible = ~forced
    if config.selection_mode == "capacity_topk":
        idx = np.flatnonzero(eligible)
        k = capacity(idx.size, config.routing_ratio)
        # stable sort on -keep: equal scores keep lower positions first
        top = idx[np.argsort(-keep[idx], kind="stable")[:k]]
        sel = forced.copy()
        sel[top] = True
    else:
        sel = (keep >= config.threshold) | forced
        k = int(np.count_nonzero(sel & eligible))
    return sel, eligible, k


def select_tokens(decision: RoutingDecision, config: MoDConfig, segments) -> RoutingDecision:
    """Apply capacity top-k or threshold selection to routing probabilities."""
    keep = np.asarray(decision.keep_prob)
    seg = np.broadcast_to(np.asarray(segments, dtype=np.int64), keep.shape)
    keep2, seg2 = keep.reshape(-1, keep.shape[-1]), seg.reshape(-1, keep.shape[-1])
    if config.pin_scores:
        sel = np.ones(keep2.shape, bool)
        eligible = np.ones(keep2.shape, bool)
        caps = np.full(keep2.shape[0], keep2.shape[1])
    else:
        rows = [_select_row(kr, sr, config) for kr, sr in zip(keep2, seg2)]
        sel = np.stack([r[0] for r in rows])
        eligible = np.stack([r[1] for r in rows])
        caps = np.array([r[2] for r in rows])
    if np.any(sel.sum(axis=1) == 0):
        warnings.warn("MoD layer selected no tokens; acting as identity", DegenerateSelectionWarning,
                      stacklevel=2)
    return replace(decision, selected=sel.reshape(keep.shape), eligible=eligible.reshape(keep.shape),
                   capacity=caps.reshape(keep.shape[:-1]), segments=seg.copy())


class MoDLayer:
    """Wraps block ``index`` so that only routed tokens are processed."""

    kind = "mod"

    def __init__(self, index: int, router: RouterState):
        self.index = index
        self.router = router

    def forward(self, fp: ForwardPass, x: Var, batch: Batch) -> Var:
        cfg = fp.model.config
        mod_cfg = fp.mod_config
        with ad.flop_scope(f"layer{self.index}"):
            W = fp.var(f"{self.router.prefix}.W")
            b = fp.var(f"{self.router.prefix}.b")
            probs = _router_probs(x, W, b)
            keep, skip = probs[..., 1], probs[..., 0]
            decision = select_tokens(
                RoutingDecision(keep.value, skip.value, keep_var=keep, skip_var=skip),
                mod_cfg, batch.segments)
            fp.routing[self.index] = decision
            scale = ad.constant(np.ones(keep.shape)) if mod_cfg.pin_scores else keep
            w = fp.layer_vars(self.index)
            out, logits = _sparse_block(w, x, scale, decision.selected, cfg.n_heads,
                                        cfg.scale_attention)
            if fp.capture:
                fp.attention[self.index] = logits
            return out

    def __repr__(self):
        return f"MoDLayer({self.index}, router={self.router.prefix!r})"


def _sparse_block(w, x: Var, scale: Var, selected: np.ndarray, n_heads: int, scale_attention: bool):
    counts = selected.sum(axis=1)
    if np.all(counts == counts[0]):
        if counts[0] == 0:
            return x, [np.zeros((n_heads, 0, 0))] * x.shape[0]
        idx = np.stack([np.flatnonzero(r) for r in selected])
        rows = np.arange(idx.shape[0])[:, None]
        delta, logits = block_delta(w, x[rows, idx], n_heads, scale_attention)
        s = scale[rows, idx].reshape(idx.shape[0], idx.shape[1], 1)
        return ad.scatter_add(x, delta * s, idx), list(logits)
    # ragged selection (threshold mode): one sequence at a time
    outs, logits = [], []
    for b in range(selected.shape[0]):
        out_b, lg = _sparse_block(w, x[b:b + 1], scale[b:b + 1], selected[b:b + 1],
                                  n_heads, scale_attention)
        outs.append(out_b)
        logits.extend(lg)
    return ad.concat(outs, axis=0), logits


def mod_block_forward(x, layer: LayerParams, router: RouterState, config: MoDConfig,
                      segments=None) -> tuple[np.ndarray, RoutingDecision]:
    """Apply one MoD block to token matrix (L, d) or batch (B, L, d) without recording gradients."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    if segments is None:
        segments = np.full(xb.shape[:2], Segment.IMAGE)
    seg = np.broadcast_to(np.asarray(segments, dtype=np.int64), xb.shape[:2])
    probs = _router_probs(ad.constant(xb), ad.constant(router.W), ad.constant(router.b))
    keep, skip = probs[..., 1], probs[..., 0]
    decision = select_tokens(RoutingDecision(keep.value, skip.value), config, seg)
    scale = ad.constant(np.ones(keep.shape)) if config.pin_scores else keep
    w = {k: ad.constant(v) for k, v in layer.weights.items()}
    out, _ = _sparse_block(w, ad.constant(xb), scale, decision.selected, layer.n_heads,
                           layer.scale_attention)
    if squeeze:
        return out.value[0], replace(decision, keep_prob=decision.keep_prob[0],
                                     skip_prob=decision.skip_prob[0], selected=decision.selected[0],
                                     eligible=decision.eligible[0], capacity=decision.capacity[0],
                                     segments=decision.segments[0])
    return out.value, decision


def _masked_bce(keep: Var, skip: Var, target: np.ndarray, mask: np.ndarray) -> Var:
    n = float(mask.sum())
    k = ad.clip(keep, PROB_CLAMP, 1.0 - PROB_CLAMP)
    s = ad.clip(skip, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = ad.log(k) * target + ad.log(s) * (1.0 - target)
    return (bce * mask).sum() * (-1.0 / n)


def masked_routing_loss(decision: RoutingDecision, question_mask) -> Var:
    """Binary cross-entropy of keep probabilities against the top-k one-hot target.

    Averaged over positions where ``question_mask`` is 1; question positions
    (mask 0) contribute nothing.  Returns a :class:`~modlab.autodiff.Var`
    so the loss can be differentiated when the decision came from a taped
    forward pass; use ``float(loss.value)`` for the number.
    """
    mask = np.broadcast_to(np.asarray(question_mask, dtype=np.float64), decision.keep_prob.shape)
    if mask.sum() == 0:
        warnings.warn("masked_routing_loss: every position is masked", RuntimeWarning, stacklevel=2)
        return ad.constant(0.0)
    keep = decision.keep_var if decision.keep_var is not None else ad.constant(decision.keep_prob)
    skip = decision.skip_var if decision.skip_var is not None else ad.constant(decision.skip_prob)
    return _masked_bce(keep, skip, decision.target, mask)


def init_router(model: Model, prefix: str = "router") -> RouterState:
    """Zero router: every token starts at keep_prob 0.5 and the index tie-break picks the first selection."""
    model.params[f"{prefix}.W"] = np.zeros((model.config.d_model, 2))
    model.params[f"{prefix}.b"] = np.zeros(2)
    return RouterState(model.params[f"{prefix}.W"], model.params[f"{prefix}.b"], prefix)


def attach_mod_layers(model: Model, indices, config: MoDConfig) -> Model:
    """Wrap ``indices`` of ``model`` in place, all sharing one router (created if absent)."""
    if "router.W" in model.params:
        router = RouterState(model.params["router.W"], model.params["router.b"])
    else:
        router = init_router(model)
    for i in indices:
        model.layers[i] = MoDLayer(i, router)
    model.router = router
    model.mod_config = config
    return model


def convert_model(model: Model, plan, config: MoDConfig) -> Model:
    """Copy of ``model`` with every layer the plan marks ``mod`` wrapped as a MoD block.

    ``plan`` is a :class:`~modlab.arank.LayerPlan` or a list of ``"dense"``/``"mod"`` kinds.
    """
    kinds = list(getattr(plan, "kinds", plan))
    if len(kinds) != model.config.n_layers:
        raise InputError(f"plan covers {len(kinds)} layers, model has {model.config.n_layers}")
    bad = set(kinds) - {"dense", "mod"}
    if bad:
        raise InputError(f"unknown layer kinds in plan: {sorted(bad)}")
    out = model.copy()
    mods = [i for i, k in enumerate(kinds) if k == "mod"]
    if not mods:
        return out
    return attach_mod_layers(out, mods, config)


def unwrap_model(model: Model) -> Model:
    """Dense copy: MoD wrappers and router parameters removed."""
    from .model import DenseLayer
    out = model.copy()
    out.layers = [DenseLayer(i) for i in range(model.config.n_layers)]
    for name in [n for n in out.params if n.startswith("router")]:
        del out.params[name]
    out.router = None
    out.mod_config = None
    return out


def routing_trace_lines(routing: dict[int, RoutingDecision], sources=None) -> list[str]:
    """JSON-lines records: one per (sequence, layer) with per-token segment, keep_prob, selected."""
    lines = []
    for layer in sorted(routing):
        d = routing[layer]
        for b in range(d.keep_prob.shape[0]):
            rec = {
                "layer": int(layer),
                "sequence": sources[b] if sources is not None else b,
                "segments": [Segment(int(s)).name.lower() for s in d.segments[b]],
                "keep_prob": [float(v) for v in d.keep_prob[b]],
                "selected": [bool(v) for v in d.selected[b]],
            }
            lines.append(json.dumps(rec, sort_keys=True))
    return lines
