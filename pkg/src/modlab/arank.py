"""Attention-map rank profiling and rank-gated choice of layers to convert.

A layer's ARank is the average, over heads and profiling samples, of the
numerical rank of its raw query-key score matrix.  Layers whose ARank falls
strictly below the ``keep_top_k``-th largest value are marked for
mixture-of-depths conversion.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError, StateError
from .model import Model, attention_logits, forward
from .numerics import DEFAULT_RANK_TOL, Rng, rank_from_singular_values, residual_fraction, svd

REPORT_SCHEMA = "modlab.arank_report/1"
PLAN_SCHEMA = "modlab.layer_plan/1"
DEFAULT_SAMPLES = 50
DEFAULT_KEEP_TOP_K = 4


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AttentionProfile:
    """Captured score matrices and their spectra, indexed ``[layer][head][sample]``."""
    maps: list
    spectra: list
    ranks: np.ndarray
    lengths: list[int]
    rel_tol: float
    masked: bool

    @property
    def sample_count(self) -> int:
        return self.ranks.shape[2]

    @property
    def n_layers(self) -> int:
        return self.ranks.shape[0]


def _lower_triangle(a: np.ndarray) -> np.ndarray:
    return np.tril(a)


def _build_profile(per_sample_maps, n_layers: int, n_heads: int, rel_tol: float,
                   masked: bool) -> AttentionProfile:
    n = len(per_sample_maps)
    maps = [[[None] * n for _ in range(n_heads)] for _ in range(n_layers)]
    spectra = [[[None] * n for _ in range(n_heads)] for _ in range(n_layers)]
    ranks = np.zeros((n_layers, n_heads, n), dtype=np.int64)
    lengths = []
    for s, layer_maps in enumerate(per_sample_maps):
        lengths.append(int(layer_maps[0][0].shape[0]) if n_layers else 0)
        for li in range(n_layers):
            for h in range(n_heads):
                a = layer_maps[li][h]
                if masked:
                    a = _lower_triangle(a)
                sv = svd(a).singular_values
                maps[li][h][s] = a
                spectra[li][h][s] = sv
                ranks[li, h, s] = rank_from_singular_values(sv, rel_tol)
    return AttentionProfile(maps, spectra, ranks, lengths, rel_tol, masked)


def _pick(dataset, n_samples: int, seed):
    data = list(dataset)
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    if len(data) < n_samples:
        raise InputError(f"dataset has {len(data)} samples, profiling needs {n_samples}")
    if seed is None:
        return data[:n_samples]
    idx = Rng(seed).split("arank").choice(len(data), size=n_samples, replace=False)
    return [data[i] for i in sorted(idx)]


def profile_attention(model: Model, dataset, n_samples: int = DEFAULT_SAMPLES, masked_mode: bool = False,
                      rel_tol: float = DEFAULT_RANK_TOL, seed: int | None = None) -> AttentionProfile:
    """Run ``n_samples`` sequences through the model and keep every head's score matrix."""
    samples = _pick(dataset, n_samples, seed)
    per_sample = []
    for seq in samples:
        res = forward(model, seq, capture=True)
        if res.attention is None:
            raise StateError("attention capture is disabled")
        layer_maps = []
        for li in range(model.config.n_layers):
            a = res.attention[li]
            layer_maps.append([np.asarray(a[0][h]) for h in range(model.config.n_heads)])
        per_sample.append(layer_maps)
    return _build_profile(per_sample, model.config.n_layers, model.config.n_heads, rel_tol, masked_mode)


def profile_layer_inputs(model: Model, inputs, masked_mode: bool = False,
                         rel_tol: float = DEFAULT_RANK_TOL) -> AttentionProfile:
    """Profile every layer on given representation matrices (L, d) instead of token sequences.

    Each matrix is fed directly as the input of every layer, so rank bounds
    that hold for the input (e.g. only ``r`` distinct rows) carry over.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    if not inputs:
        raise InputError("no inputs to profile")
    per_sample = []
    for x in inputs:
        per_sample.append([[attention_logits(x, model.layer_params(li), h)
                            for h in range(model.config.n_heads)]
                           for li in range(model.config.n_layers)])
    return _build_profile(per_sample, model.config.n_layers, model.config.n_heads, rel_tol, masked_mode)


@dataclass
class ARankReport:
    arank: list[float]
    std: list[float]
    rel_tol: float
    sample_count: int
    n_heads: int
    masked: bool
    length_stats: dict
    config_digest: str = ""
    schema: str = REPORT_SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ARankReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise InputError(f"unsupported ARank report schema {d.get('schema')!r}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ARankReport":
        return cls.from_dict(json.loads(text))

    def table(self) -> str:
        lines = ["layer  arank     std"]
        for i, (a, s) in enumerate(zip(self.arank, self.std)):
            lines.append(f"{i:5d}  {a:7.3f}  {s:6.3f}")
        return "\n".join(lines)


def report_from_profile(profile: AttentionProfile, config_digest: str = "") -> ARankReport:
    # mean over heads per sample, then mean/std over samples
    per_sample = profile.ranks.mean(axis=1) if profile.n_layers else np.zeros((0, 1))
    lengths = np.asarray(profile.lengths)
    return ARankReport(
        arank=[float(v) for v in per_sample.mean(axis=1)],
        std=[float(v) for v in per_sample.std(axis=1)],
        rel_tol=profile.rel_tol,
        sample_count=profile.sample_count,
        n_heads=int(profile.ranks.shape[1]),
        masked=profile.masked,
        length_stats={"min": int(lengths.min()), "max": int(lengths.max()),
                      "mean": float(lengths.mean())},
        config_digest=config_digest,
    )


def profile_arank(model: Model, dataset, n_samples: int = DEFAULT_SAMPLES, masked_mode: bool = False,
                  rel_tol: float = DEFAULT_RANK_TOL, seed: int | None = None) -> ARankReport:
    """Per-layer ARank estimated over ``n_samples`` sequences (default 50)."""
    profile = profile_attention(model, dataset, n_samples, masked_mode, rel_tol, seed)
    digest = _digest({"model": model.config.to_dict(), "n_samples": n_samples,
                      "masked": masked_mode, "rel_tol": rel_tol, "seed": seed})
    return report_from_profile(profile, digest)


@dataclass
class LayerPlan:
    kinds: list[str]
    threshold: float
    keep_top_k: int
    arank: list[float] = field(default_factory=list)
    config_digest: str = ""
    schema: str = PLAN_SCHEMA
    # "arank" when the kinds come from the threshold rule, "override" when set by hand
    source: str = "arank"

    @property
    def mod_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == "mod"]

    @property
    def dense_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == "dense"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mod_layers"] = self.mod_layers
        d["dense_layers"] = self.dense_layers
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPlan":
        if d.get("schema") != PLAN_SCHEMA:
            raise InputError(f"unsupported layer plan schema {d.get('schema')!r}")
        d = {k: v for k, v in d.items() if k not in ("mod_layers", "dense_layers")}
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "LayerPlan":
        return cls.from_dict(json.loads(text))


def select_mod_layers(report, keep_top_k: int = DEFAULT_KEEP_TOP_K) -> LayerPlan:
    """Threshold at the ``keep_top_k``-th largest ARank; strictly lower layers become MoD.

    ``report`` may be an :class:`ARankReport` or a plain sequence of per-layer values.
    """
    values = [float(v) for v in getattr(report, "arank", report)]
    if keep_top_k < 1:
        raise InputError("keep_top_k must be >= 1")
    if keep_top_k > len(values):
        raise InputError(f"keep_top_k={keep_top_k} exceeds the {len(values)} profiled layers")
    threshold = sorted(values, reverse=True)[keep_top_k - 1]
    kinds = ["mod" if v < threshold else "dense" for v in values]
    return LayerPlan(kinds, threshold, keep_top_k, values, getattr(report, "config_digest", ""))


def rank_residual_report(profile: AttentionProfile, r_prime: int) -> np.ndarray:
    """Mean share of spectral energy beyond the top ``r_prime`` singular values, per (layer, head)."""
    if r_prime < 0:
        raise InputError("r_prime must be >= 0")
    out = np.zeros(profile.ranks.shape[:2])
    for li, heads in enumerate(profile.spectra):
        for h, samples in enumerate(heads):
            out[li, h] = np.mean([residual_fraction(s, r_prime) for s in samples])
    return out


def heatmap_csv(reports: dict[str, ARankReport]) -> str:
    """Layers as columns, one row per task/batch label."""
    labels = list(reports)
    n_layers = len(reports[labels[0]].arank) if labels else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task"] + [f"layer{i}" for i in range(n_layers)])
    for label in labels:
        w.writerow([label] + [repr(float(v)) for v in reports[label].arank])
    return buf.getvalue()
