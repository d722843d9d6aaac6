"""Optimization of task loss plus shared-router loss, evaluation and gradient checks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .errors import InputError, NumericError, StateError
from .model import (Batch, Model, Segment, autoregressive_loss, forward, load_checkpoint,
                    require_dense, response_targets, save_checkpoint)
from .modlayer import MoDConfig, masked_routing_loss
from .numerics import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 1500
    mod_steps: int = 500
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_coefficient: float = 0.01
    seed: int = 0
    eval_every: int = 100
    lr_warmup: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InputError("learning_rate must be >= 0")
        for name in ("warmup_steps", "mod_steps", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}


@dataclass
class StepRecord:
    step: int
    task_loss: float
    routing_loss: float
    total_loss: float
    layer_skip: dict = field(default_factory=dict)
    segment_skip: dict = field(default_factory=dict)
    capacity_exact: bool = True
    question_skipped: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_skip"] = {str(k): v for k, v in self.layer_skip.items()}
        return d


@dataclass
class TrainReport:
    phase: str
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def task_losses(self) -> list[float]:
        return [s.task_loss for s in self.steps]

    @property
    def question_skipped(self) -> int:
        return sum(s.question_skipped for s in self.steps)

    def to_dict(self) -> dict:
        # wall time is left out so identical runs serialize identically
        return {"phase": self.phase, "steps": [s.to_dict() for s in self.steps],
                "evals": self.evals, "final": self.final}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


class TrainingDiverged(NumericError):
    def __init__(self, step: int, last_good: Model):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.last_good = last_good


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Examples drawn at ``step``; depends only on (seed, step) so runs can resume anywhere."""
    rng = Rng(seed).split("batches").split(step)
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


@dataclass
class LossParts:
    total: object
    task: object
    routing: object
    routing_layers: dict
    routing_decisions: dict


def compute_loss(model: Model, batch: Batch, tape: Tape | None = None,
                 mod_config: MoDConfig | None = None) -> LossParts:
    """Task loss plus ``coefficient * sum over MoD layers`` of the masked routing loss."""
    result = forward(model, batch, tape=tape, mod_config=mod_config)
    task = autoregressive_loss(result.logits, batch)
    cfg = mod_config if mod_config is not None else model.mod_config
    per_layer = {i: masked_routing_loss(d, batch.question_mask) for i, d in sorted(result.routing.items())}
    if per_layer:
        routing = per_layer[min(per_layer)]
        for i in sorted(per_layer)[1:]:
            routing = routing + per_layer[i]
        total = task + routing * cfg.loss_coefficient
    else:
        routing = None
        total = task
    return LossParts(total, task, routing, per_layer, result.routing)


def _step_record(step: int, parts: LossParts) -> StepRecord:
    layer_skip, seg_skipped, seg_total = {}, {}, {}
    exact = True
    q_skipped = 0
    for i, d in parts.routing_decisions.items():
        layer_skip[i] = d.skip_ratio
        for seg, (sk, tot) in d.segment_counts().items():
            seg_skipped[seg] = seg_skipped.get(seg, 0) + sk
            seg_total[seg] = seg_total.get(seg, 0) + tot
        q_skipped += d.segment_counts()["question"][0]
        if d.eligible is not None and d.capacity is not None:
            n_el = d.eligible.sum(axis=-1)
            skipped = d.selected.shape[-1] - d.selected.sum(axis=-1)
            exact &= bool(np.all(skipped == n_el - d.capacity))
    seg_skip = {s: seg_skipped[s] / seg_total[s] for s in seg_total if seg_total[s]}
    routing = float(parts.routing.value) if parts.routing is not None else 0.0
    return StepRecord(step, float(parts.task.value), routing, float(parts.total.value),
                      layer_skip, seg_skip, exact, q_skipped)


def _train(model: Model, dataset, config: TrainConfig, steps: int, phase: str,
           eval_data=None, start_step: int = 0, optimizer: Adam | None = None,
           log_stream=None, checkpoint_at: dict | None = None) -> tuple[Model, TrainReport, Adam]:
    if not dataset:
        raise InputError("empty training dataset")
    model = model.copy()
    opt = optimizer or Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    report = TrainReport(phase)
    t0 = time.perf_counter()
    last_good = model.copy()
    for step in range(start_step, steps):
        batch = Batch.of([dataset[i] for i in batch_indices(len(dataset), config.batch_size, config.seed, step)])
        tape = Tape()
        parts = compute_loss(model, batch, tape)
        if not np.isfinite(parts.total.value):
            raise TrainingDiverged(step, last_good)
        grads = tape.backward(parts.total)
        rec = _step_record(step, parts)
        report.steps.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps({"phase": phase, **rec.to_dict()}, sort_keys=True) + "\n")
        lr = config.learning_rate
        if config.lr_warmup:
            lr *= min(1.0, (step + 1) / config.lr_warmup)
        opt.step(model.params, grads, lr)
        if eval_data is not None and (step + 1) % config.eval_every == 0:
            ev = evaluate(model, eval_data)
            report.evals.append({"step": step + 1, "accuracy": ev.accuracy})
        if checkpoint_at and step + 1 in checkpoint_at:
            save_checkpoint(checkpoint_at[step + 1], model, extra={"step": step + 1, "adam_t": opt.t, "phase": phase},
                            extra_arrays=opt.state_arrays())
        if (step + 1) % 200 == 0:
            last_good = model.copy()
            log.debug("%s step %d task loss %.4f", phase, step + 1, rec.task_loss)
    report.wall_time = time.perf_counter() - t0
    if report.steps:
        report.final = {"task_loss": report.steps[-1].task_loss,
                        "routing_loss": report.steps[-1].routing_loss}
    return model, report, opt


def train_dense(model: Model, dataset, config: TrainConfig, eval_data=None, steps: int | None = None,
                **kw) -> tuple[Model, TrainReport]:
    """Warm-up phase: plain autoregressive training of a model without MoD layers."""
    require_dense(model)
    trained, report, _ = _train(model, dataset, config, steps or config.warmup_steps, "dense",
                                eval_data, **kw)
    return trained, report


def train_mod(model: Model, dataset, config: TrainConfig, eval_data=None, steps: int | None = None,
              **kw) -> tuple[Model, TrainReport]:
    """Joint tuning of a converted model: task loss + coefficient * summed routing losses."""
    if not model.mod_layers:
        raise StateError("train_mod needs a model converted with convert_model")
    model = model.copy()
    model.mod_config = replace(model.mod_config, loss_coefficient=config.loss_coefficient)
    trained, report, _ = _train(model, dataset, config, steps or config.mod_steps, "mod",
                                eval_data, **kw)
    return trained, report


def resume(checkpoint_path, dataset, config: TrainConfig, steps: int, eval_data=None, **kw):
    """Continue a run from a mid-training checkpoint written by ``checkpoint_at``."""
    ck = load_checkpoint(checkpoint_path)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    opt.load_state(ck.extra["adam_t"], ck.extra_arrays)
    return _train(ck.model, dataset, config, steps, ck.extra["phase"], eval_data,
                  start_step=ck.extra["step"], optimizer=opt, **kw)


@dataclass
class EvalResult:
    accuracy: float
    n: int
    layer_skip: dict = field(default_factory=dict)
    segment_skip: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "n": self.n,
                "layer_skip": {str(k): v for k, v in self.layer_skip.items()},
                "segment_skip": self.segment_skip}


def evaluate(model: Model, dataset, mode: str = "inference", batch_size: int = 256,
             traces: list | None = None) -> EvalResult:
    """Exact-match accuracy over response targets, with skip statistics.

    ``mode="inference"`` routes with the threshold and no forced question
    tokens; ``mode="training"`` reproduces training-time capacity routing.
    """
    if mode not in ("inference", "training"):
        raise InputError(f"mode must be 'inference' or 'training', got {mode!r}")
    mod_cfg = None
    if model.mod_config is not None:
        mod_cfg = model.mod_config.for_inference() if mode == "inference" else model.mod_config
    by_len: dict[int, list] = {}
    for s in dataset:
        by_len.setdefault(s.length, []).append(s)
    correct = total = 0
    layer_sk: dict[int, list] = {}
    seg_sk: dict[str, list] = {}
    for length in sorted(by_len):
        group = by_len[length]
        for lo in range(0, len(group), batch_size):
            chunk = group[lo:lo + batch_size]
            batch = Batch.of(chunk)
            res = forward(model, batch, mod_config=mod_cfg)
            rows, pos, targets = response_targets(batch)
            pred = res.logits.value[rows, pos].argmax(axis=-1)
            ok = np.ones(batch.size, bool)
            np.logical_and.at(ok, rows, pred == targets)
            correct += int(ok.sum())
            total += batch.size
            for i, d in res.routing.items():
                acc = layer_sk.setdefault(i, [0, 0])
                acc[0] += d.skipped_count
                acc[1] += d.selected.size
                for seg, (sk, tot) in d.segment_counts().items():
                    a = seg_sk.setdefault(seg, [0, 0])
                    a[0] += sk
                    a[1] += tot
            if traces is not None and res.routing:
                from .modlayer import routing_trace_lines
                traces.extend(routing_trace_lines(res.routing, [s.source for s in chunk]))
    layer_skip = {i: layer_sk.get(i, [0, 1])[0] / layer_sk.get(i, [0, 1])[1]
                  for i in range(model.config.n_layers)}
    segment_skip = {s: (a[0] / a[1] if a[1] else 0.0) for s, a in seg_sk.items()}
    if not seg_sk:
        segment_skip = {seg.name.lower(): 0.0 for seg in Segment}
    return EvalResult(correct / total if total else 0.0, total, layer_skip, segment_skip)


@dataclass
class GradcheckResult:
    passed: bool
    worst_rel_error: float
    probes: list = field(default_factory=list)
    redrawn: int = 0


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _selection_signature(parts: LossParts) -> tuple:
    return tuple((i, d.selected.tobytes()) for i, d in sorted(parts.routing_decisions.items()))


def probe_gradients(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], n_probes: int,
                    seed: int = 0, step: float = 1e-5, tol: float = 1e-4, priority=(),
                    signature_fn=None) -> GradcheckResult:
    """Compare ``grads`` with central differences of ``loss_fn()`` at random entries of ``params``.

    ``priority`` names are probed first, two rounds each.  When
    ``signature_fn`` is given, a probe that changes its value (a discrete
    decision flipped) is re-drawn and logged.
    """
    signature = signature_fn() if signature_fn is not None else None
    rng = Rng(seed).split("gradcheck")
    names = sorted(params)
    priority = list(priority)
    result = GradcheckResult(True, 0.0)
    attempts = 0
    while len(result.probes) < n_probes:
        attempts += 1
        if attempts > 20 * n_probes:
            raise NumericError("gradcheck: too many probes landed on non-differentiable points")
        k = len(result.probes)
        name = priority[k % len(priority)] if k < 2 * len(priority) else names[int(rng.integers(0, len(names)))]
        arr = params[name]
        idx = tuple(int(rng.integers(0, n)) for n in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        plus, sig_plus = loss_fn(), signature_fn() if signature_fn else None
        arr[idx] = orig - step
        minus, sig_minus = loss_fn(), signature_fn() if signature_fn else None
        arr[idx] = orig
        if signature_fn is not None and (sig_plus != signature or sig_minus != signature):
            result.redrawn += 1
            log.info("gradcheck: probe %s%s flips token selection; re-drawn", name, idx)
            continue
        numeric = (plus - minus) / (2 * step)
        analytic = float(grads[name][idx])
        err = relative_error(analytic, numeric)
        result.probes.append({"param": name, "index": list(idx), "analytic": analytic,
                              "numeric": numeric, "rel_error": err})
        result.worst_rel_error = max(result.worst_rel_error, err)
    result.passed = result.worst_rel_error <= tol
    return result


def gradcheck(model: Model, dataset, n_probes: int = 50, seed: int = 0, step: float = 1e-5,
              tol: float = 1e-4, batch_size: int = 4, grad_hook=None) -> GradcheckResult:
    """Central-difference check of taped gradients at random parameter entries.

    Router weights are probed first when present.  A probe whose perturbation
    changes any token selection sits on a non-differentiable point and is
    re-drawn.  ``grad_hook(grads)`` may alter the analytic gradients (used to
    confirm the check can fail).
    """
    batch = Batch.of(list(dataset)[:batch_size])
    for name, arr in model.params.items():
        if arr.dtype != np.float64:
            raise StateError(f"gradcheck needs float64 parameters; {name} is {arr.dtype}")
    model = model.copy()
    tape = Tape()
    base = compute_loss(model, batch, tape)
    grads = tape.backward(base.total)
    if grad_hook is not None:
        grads = grad_hook(grads)
    last = {}

    def loss_fn():
        last["parts"] = compute_loss(model, batch)
        return float(last["parts"].total.value)

    def signature_fn():
        return _selection_signature(last.get("parts", base))

    priority = [n for n in sorted(model.params) if n.startswith("router")]
    return probe_gradients(loss_fn, model.params, grads, n_probes, seed, step, tol, priority, signature_fn)
