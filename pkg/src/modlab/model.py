"""A small pre-norm decoder-only transformer on top of :mod:`modlab.autodiff`.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
(``layers.0.attn.wq`` ...).  A forward pass wraps them as tape parameters
when gradients are wanted, or as constants otherwise.

Each block computes a residual update ``delta(x) = attn + ffn`` and a dense
layer returns ``x + delta(x)``; mixture-of-depths layers (see
:mod:`modlab.modlayer`) reuse :func:`block_delta` on a gathered subsequence.
"""

from __future__ import annotations

import copy
import io
import json
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ArtifactError, InputError, ShapeError, StateError
from .numerics import Rng

CHECKPOINT_FORMAT = "modlab-checkpoint"
CHECKPOINT_VERSION = 1
_MASK_VALUE = -1e30


class Segment(IntEnum):
    QUESTION = 0
    IMAGE = 1
    RESPONSE = 2


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 128
    vocab_size: int = 32
    max_seq_len: int = 32
    seed: int = 0
    init_gain: float = 0.02
    scale_attention: bool = True

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise InputError("n_layers must be >= 0")
        if self.max_seq_len < 2:
            raise InputError("max_seq_len must be >= 2")
        if self.d_model % self.n_heads:
            raise InputError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    token_ids: np.ndarray
    segments: np.ndarray
    source: str = ""

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        seg = np.asarray(self.segments, dtype=np.int64)
        if ids.ndim != 1 or ids.shape != seg.shape:
            raise InputError(f"token_ids {ids.shape} and segments {seg.shape} must be equal-length 1-D")
        if seg.size and (seg.min() < 0 or seg.max() > 2):
            raise InputError("segment labels must be question/image/response (0/1/2)")
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "segments", seg)

    @property
    def length(self) -> int:
        return int(self.token_ids.size)

    @property
    def question_mask(self) -> np.ndarray:
        """0 at question positions, 1 elsewhere."""
        return (self.segments != Segment.QUESTION).astype(np.float64)

    def __eq__(self, other):
        return (isinstance(other, TokenSequence)
                and np.array_equal(self.token_ids, other.token_ids)
                and np.array_equal(self.segments, other.segments))

    __hash__ = None


@dataclass
class Batch:
    """Equal-length sequences stacked into (B, L) arrays."""
    token_ids: np.ndarray
    segments: np.ndarray

    @classmethod
    def of(cls, seqs) -> "Batch":
        if isinstance(seqs, Batch):
            return seqs
        if isinstance(seqs, TokenSequence):
            seqs = [seqs]
        seqs = list(seqs)
        if not seqs:
            raise InputError("empty batch")
        lengths = {s.length for s in seqs}
        if len(lengths) != 1:
            raise InputError(f"batch needs equal-length sequences, got lengths {sorted(lengths)}")
        return cls(np.stack([s.token_ids for s in seqs]), np.stack([s.segments for s in seqs]))

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def length(self) -> int:
        return self.token_ids.shape[1]

    @property
    def question_mask(self) -> np.ndarray:
        return (self.segments != Segment.QUESTION).astype(np.float64)


_LAYER_KEYS = ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
               "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")


@dataclass
class LayerParams:
    """Read-only view of one block's weights.  Head ``h`` owns columns ``h*dh:(h+1)*dh``."""
    weights: dict
    n_heads: int
    scale_attention: bool = True

    @property
    def head_dim(self) -> int:
        return self.weights["attn.wq"].shape[1] // self.n_heads

    def _cols(self, key: str, head: int) -> np.ndarray:
        dh = self.head_dim
        if not 0 <= head < self.n_heads:
            raise ShapeError(f"head {head} out of range for {self.n_heads} heads")
        return self.weights[key][:, head * dh:(head + 1) * dh]

    def query(self, head: int) -> np.ndarray:
        return self._cols("attn.wq", head)

    def key(self, head: int) -> np.ndarray:
        return self._cols("attn.wk", head)

    def value(self, head: int) -> np.ndarray:
        return self._cols("attn.wv", head)


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Gaussian init with std ``init_gain``; residual output projections shrink by 1/sqrt(2 n_layers)."""
    rng = Rng(config.seed).split("init")
    d, f, g = config.d_model, config.d_ff, config.init_gain
    out_scale = g / np.sqrt(2.0 * max(config.n_layers, 1))
    p = {
        "tok_emb": rng.split("tok_emb").normal((config.vocab_size, d), g),
        "pos_emb": rng.split("pos_emb").normal((config.max_seq_len, d), g),
        "seg_emb": rng.split("seg_emb").normal((3, d), g),
    }
    for i in range(config.n_layers):
        r = rng.split(f"layer{i}")
        pre = f"layers.{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "attn.wq"] = r.split("wq").normal((d, d), g)
        p[pre + "attn.wk"] = r.split("wk").normal((d, d), g)
        p[pre + "attn.wv"] = r.split("wv").normal((d, d), g)
        p[pre + "attn.wo"] = r.split("wo").normal((d, d), out_scale)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = r.split("w1").normal((d, f), g)
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = r.split("w2").normal((f, d), out_scale)
        p[pre + "ffn.b2"] = np.zeros(d)
    p["ln_f.g"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    p["head.w"] = rng.split("head").normal((d, config.vocab_size), g)
    return p


class ForwardPass:
    """Per-call state: parameter wrappers, captured attention logits, routing decisions."""

    def __init__(self, model: "Model", tape: Tape | None = None, capture: bool = False,
                 mod_config=None):
        self.model = model
        self.tape = tape
        self.capture = capture
        self.mod_config = mod_config if mod_config is not None else model.mod_config
        self.attention: dict[int, np.ndarray] | None = {} if capture else None
        self.routing: dict = {}
        self._vars: dict[str, Var] = {}

    def var(self, name: str) -> Var:
        v = self._vars.get(name)
        if v is None:
            arr = self.model.params[name]
            v = self.tape.param(name, arr) if self.tape is not None else Var(arr, name=name)
            self._vars[name] = v
        return v

    def layer_vars(self, index: int) -> dict[str, Var]:
        return {k: self.var(f"layers.{index}.{k}") for k in _LAYER_KEYS}


def causal_mask(length: int) -> np.ndarray:
    m = np.zeros((length, length))
    m[np.triu_indices(length, 1)] = _MASK_VALUE
    return m


def block_delta(w: dict[str, Var], x: Var, n_heads: int, scale_attention: bool = True):
    """Residual update of one pre-norm block for ``x`` of shape (B, L, d).

    Returns ``(delta, logits)`` where ``logits`` is the (B, H, L, L) array of
    unscaled, unmasked query-key products.
    """
    B, L, d = x.shape
    dh = d // n_heads
    h = ad.layer_norm(x, w["ln1.g"], w["ln1.b"])

    def heads(t: Var) -> Var:
        return t.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(h @ w["attn.wq"])
    k = heads(h @ w["attn.wk"])
    v = heads(h @ w["attn.wv"])
    scores = q @ k.transpose(0, 1, 3, 2)
    logits = scores.value
    if scale_attention:
        scores = scores * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores + causal_mask(L))
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    a = o @ w["attn.wo"]
    h2 = ad.layer_norm(x + a, w["ln2.g"], w["ln2.b"])
    f = ad.gelu(h2 @ w["ffn.w1"] + w["ffn.b1"]) @ w["ffn.w2"] + w["ffn.b2"]
    return a + f, logits


class DenseLayer:
    kind = "dense"

    def __init__(self, index: int):
        self.index = index

    def forward(self, fp: ForwardPass, x: Var, batch: Batch) -> Var:
        cfg = fp.model.config
        with ad.flop_scope(f"layer{self.index}"):
            delta, logits = block_delta(fp.layer_vars(self.index), x, cfg.n_heads, cfg.scale_attention)
            if fp.capture:
                fp.attention[self.index] = logits
            return x + delta

    def __repr__(self):
        return f"DenseLayer({self.index})"


class Model:
    """Configuration, parameters and the per-layer stack (dense or mixture-of-depths)."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 layers: list | None = None, router=None, mod_config=None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.layers = layers if layers is not None else [DenseLayer(i) for i in range(config.n_layers)]
        self.router = router
        self.mod_config = mod_config
        if len(self.layers) != config.n_layers:
            raise InputError(f"{len(self.layers)} layers for n_layers={config.n_layers}")

    @property
    def layer_kinds(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    @property
    def mod_layers(self) -> list[int]:
        return [layer.index for layer in self.layers if layer.kind == "mod"]

    def layer_params(self, index: int) -> LayerParams:
        pre = f"layers.{index}."
        return LayerParams({k: self.params[pre + k] for k in _LAYER_KEYS},
                           self.config.n_heads, self.config.scale_attention)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def __repr__(self):
        return f"Model({self.config}, kinds={self.layer_kinds})"


@dataclass
class ForwardResult:
    logits: Var
    attention: dict | None
    routing: dict = field(default_factory=dict)


def forward(model: Model, seqs, tape: Tape | None = None, capture: bool = False,
            mod_config=None) -> ForwardResult:
    """Logits (B, L, vocab) for equal-length sequences.

    ``mod_config`` overrides the routing configuration stored on a converted
    model (e.g. inference-time threshold routing).
    """
    batch = Batch.of(seqs)
    cfg = model.config
    if batch.length > cfg.max_seq_len:
        raise InputError(f"sequence length {batch.length} exceeds max_seq_len={cfg.max_seq_len}")
    if batch.token_ids.min() < 0 or batch.token_ids.max() >= cfg.vocab_size:
        raise InputError("token id outside vocabulary")
    fp = ForwardPass(model, tape, capture, mod_config)
    x = (ad.embedding(fp.var("tok_emb"), batch.token_ids)
         + fp.var("pos_emb")[: batch.length]
         + ad.embedding(fp.var("seg_emb"), batch.segments))
    for layer in model.layers:
        x = layer.forward(fp, x, batch)
    x = ad.layer_norm(x, fp.var("ln_f.g"), fp.var("ln_f.b"))
    logits = x @ fp.var("head.w")
    return ForwardResult(logits, fp.attention, fp.routing)


def attention_logits(x, layer: LayerParams, head: int, scaled: bool = False) -> np.ndarray:
    """Pre-softmax score matrix of one head for layer input ``x`` (L, d).

    The layer's input normalization is applied first, exactly as inside the
    block, so this is the same matrix captured during :func:`forward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.weights["attn.wq"].shape[0]:
        raise ShapeError(f"attention_logits: x of shape {x.shape} for d_model={layer.weights['attn.wq'].shape[0]}")
    h = ad.layer_norm(x, layer.weights["ln1.g"], layer.weights["ln1.b"]).value
    a = (h @ layer.query(head)) @ (h @ layer.key(head)).T
    if scaled:
        a = a / np.sqrt(layer.head_dim)
    return a


def response_targets(batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(row, position, target id) triples for every position whose next token is a response token."""
    nxt = batch.segments[:, 1:] == Segment.RESPONSE
    rows, pos = np.nonzero(nxt)
    return rows, pos, batch.token_ids[rows, pos + 1]


def autoregressive_loss(logits, seqs) -> Var:
    """Mean next-token cross-entropy over response-segment targets."""
    batch = Batch.of(seqs)
    logits = logits if isinstance(logits, Var) else ad.constant(logits)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
    if logits.shape[:2] != batch.token_ids.shape:
        raise ShapeError(f"logits {logits.shape} do not match batch {batch.token_ids.shape}")
    rows, pos, targets = response_targets(batch)
    if rows.size == 0:
        raise InputError("no response-segment targets in batch")
    return ad.cross_entropy(logits[rows, pos], targets)


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    return tape.backward(loss)


# --- checkpoints -------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: Model, extra: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None, digest: str = "") -> None:
    """Write a deterministic zip: ``meta.json`` plus one ``.npy`` member per array."""
    from . import __version__
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tool_version": __version__,
        "config_digest": digest,
        "config": model.config.to_dict(),
        "layer_kinds": model.layer_kinds,
        "mod_config": model.mod_config.to_dict() if model.mod_config is not None else None,
        "params": sorted(model.params),
        "extra_arrays": sorted(extra_arrays or {}),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        def put(name, data):
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), data)
        put("meta.json", json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(model.params):
            put(f"params/{name}.npy", _npy_bytes(model.params[name]))
        for name in sorted(extra_arrays or {}):
            put(f"extra/{name}.npy", _npy_bytes(extra_arrays[name]))
    atomic_write_bytes(path, buf.getvalue())


@dataclass
class Checkpoint:
    model: Model
    extra: dict
    extra_arrays: dict
    digest: str
    tool_version: str


def load_checkpoint(path) -> Checkpoint:
    from .modlayer import MoDConfig, attach_mod_layers
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise ArtifactError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError as exc:
            raise ArtifactError(f"{path}: missing meta.json") from exc
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ArtifactError(f"{path}: not a modlab checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ArtifactError(f"{path}: unsupported checkpoint version {meta.get('version')}")

        def read(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        params = {n: read(f"params/{n}.npy") for n in meta["params"]}
        extra_arrays = {n: read(f"extra/{n}.npy") for n in meta["extra_arrays"]}
    config = ModelConfig.from_dict(meta["config"])
    model = Model(config, params)
    kinds = meta["layer_kinds"]
    if "mod" in kinds:
        mod_config = MoDConfig.from_dict(meta["mod_config"])
        attach_mod_layers(model, [i for i, k in enumerate(kinds) if k == "mod"], mod_config)
    return Checkpoint(model, meta["extra"], extra_arrays, meta["config_digest"], meta["tool_version"])


def require_dense(model: Model) -> None:
    if model.mod_layers:
        raise StateError(f"model already has mixture-of-depths layers {model.mod_layers}")
