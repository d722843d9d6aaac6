"""End-to-end orchestration: warm-up, profiling, conversion, tuning, evaluation, FLOPs, report.

Every stage reads and writes fixed filenames under one output directory, so
stages can run one at a time (as the CLI does) or back to back through
:func:`run_experiment`.  Each artifact carries the config digest and tool
version; :func:`report` refuses a directory whose artifacts disagree.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .arank import ARankReport, LayerPlan, heatmap_csv, profile_arank, select_mod_layers
from .errors import ArtifactError, InputError, ModlabError, SpecError
from .flops import count_flops, flops_csv, savings
from .model import Model, ModelConfig, atomic_write_bytes, load_checkpoint, save_checkpoint
from .modlayer import MoDConfig, convert_model
from .tasks import Splits, ToyTaskSpec, make_splits
from .training import TrainConfig, evaluate, train_dense, train_mod

log = logging.getLogger(__name__)

CONFIG_SCHEMA = "modlab.experiment/1"
STAGES = ("warmup", "profile", "convert", "tune", "eval", "flops", "report")

FILES = {
    "dense_ckpt": "dense.ckpt",
    "dense_train": "train_dense.json",
    "dense_log": "train_dense.jsonl",
    "arank": "arank.json",
    "arank_csv": "arank.csv",
    "plan": "plan.json",
    "converted_ckpt": "converted.ckpt",
    "mod_ckpt": "mod.ckpt",
    "mod_train": "train_mod.json",
    "mod_log": "train_mod.jsonl",
    "eval": "eval.json",
    "traces": "routing_traces.jsonl",
    "flops": "flops.json",
    "flops_csv": "flops.csv",
    "summary": "summary.txt",
    "summary_json": "summary.json",
    "manifest": "manifest.json",
}


class StageError(ModlabError, RuntimeError):
    """A pipeline stage failed; artifacts of earlier stages are left in place."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _build(cls, d: dict, what: str):
    if not isinstance(d, dict):
        raise SpecError(f"{what}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise SpecError(f"{what}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, InputError) as exc:
        raise SpecError(f"{what}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    mod: MoDConfig = field(default_factory=MoDConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: ToyTaskSpec = field(default_factory=ToyTaskSpec)
    n_train: int = 2000
    n_heldout: int = 1000
    keep_top_k: int = 1
    arank_samples: int = 50
    arank_masked: bool = False
    n_traces: int = 16
    layer_plan: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.layer_plan is not None:
            object.__setattr__(self, "layer_plan", tuple(self.layer_plan))
            if len(self.layer_plan) != self.model.n_layers or set(self.layer_plan) - {"dense", "mod"}:
                raise SpecError(f"layer_plan must give 'dense' or 'mod' for each of {self.model.n_layers} layers")
        if self.model.vocab_size < len(self.task.vocab):
            raise SpecError(f"vocab_size {self.model.vocab_size} < task vocabulary {len(self.task.vocab)}")
        if self.model.max_seq_len < self.task.seq_len:
            raise SpecError(f"max_seq_len {self.model.max_seq_len} < task sequence length {self.task.seq_len}")
        for name in ("n_train", "n_heldout", "arank_samples"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.arank_samples > self.n_train:
            raise SpecError("arank_samples exceeds n_train")
        if self.n_traces < 0:
            raise SpecError("n_traces must be >= 0")

    @classmethod
    def for_task(cls, task: ToyTaskSpec | None = None, model: dict | None = None, **kw) -> "ExperimentConfig":
        """Config whose model vocabulary and length budget are sized to ``task``."""
        task = task or ToyTaskSpec()
        m = {"vocab_size": len(task.vocab), "max_seq_len": task.seq_len, **(model or {})}
        return cls(model=ModelConfig(**m), task=task, **kw)

    @classmethod
    def preset(cls, routing_ratio: float = 0.34, seed: int = 0) -> "ExperimentConfig":
        """The lookup run used for the retention check and the demos.

        3x3 grid, four queries per question, 2-layer model; warm-up reaches
        100% held-out accuracy by step 500.  Both layers profile at full
        numerical rank, so the ARank rule converts nothing and layer 0 is
        converted through ``layer_plan``.
        """
        task = ToyTaskSpec(grid_rows=3, grid_cols=3, n_colors=4, n_queries=4)
        return cls.for_task(
            task, model={"d_model": 32, "n_heads": 2, "d_ff": 128, "seed": seed, "init_gain": 0.1},
            train=TrainConfig(learning_rate=3e-3, warmup_steps=1000, mod_steps=600, batch_size=32,
                              eval_every=250, seed=seed),
            mod=MoDConfig(routing_ratio=routing_ratio), n_train=2000, n_heldout=1000,
            layer_plan=("mod", "dense"))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {
            "schema": CONFIG_SCHEMA,
            "model": self.model.to_dict(),
            "mod": self.mod.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "experiment": {"n_train": self.n_train, "n_heldout": self.n_heldout,
                           "keep_top_k": self.keep_top_k, "arank_samples": self.arank_samples,
                           "arank_masked": self.arank_masked, "n_traces": self.n_traces,
                           "layer_plan": list(self.layer_plan) if self.layer_plan is not None else None},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise SpecError("config must be a JSON object")
        if d.get("schema") != CONFIG_SCHEMA:
            raise SpecError(f"config schema must be {CONFIG_SCHEMA!r}, got {d.get('schema')!r}")
        unknown = set(d) - {"schema", "model", "mod", "train", "task", "experiment"}
        if unknown:
            raise SpecError(f"config: unknown sections {sorted(unknown)}")
        task_d = dict(d.get("task", {}))
        if "templates" in task_d:
            task_d["templates"] = tuple(task_d["templates"])
        task = _build(ToyTaskSpec, task_d, "task")
        model_d = {"vocab_size": len(task.vocab), "max_seq_len": task.seq_len, **d.get("model", {})}
        exp = d.get("experiment", {})
        allowed = {"n_train", "n_heldout", "keep_top_k", "arank_samples", "arank_masked", "n_traces",
                   "layer_plan"}
        if set(exp) - allowed:
            raise SpecError(f"experiment: unknown keys {sorted(set(exp) - allowed)}")
        return cls(model=_build(ModelConfig, model_d, "model"), mod=_build(MoDConfig, d.get("mod", {}), "mod"),
                   train=_build(TrainConfig, d.get("train", {}), "train"), task=task, **exp)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise SpecError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise SpecError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    @property
    def digest(self) -> str:
        return config_digest(self)


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- artifact io

def _stamp(config: ExperimentConfig, kind: str, payload: dict) -> dict:
    return {"artifact": kind, "config_digest": config.digest, "tool_version": __version__, **payload}


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode())


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _csv_header(config: ExperimentConfig) -> str:
    return f"# config_digest={config.digest} tool_version={__version__}\n"


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ArtifactError(f"missing artifact {path.name} in {path.parent}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupt artifact {path}: {exc}") from exc


def _check_stamp(obj: dict, digest: str, name: str) -> None:
    if obj.get("config_digest") != digest:
        raise ArtifactError(f"{name}: config digest {obj.get('config_digest')!r} does not match {digest!r}")
    if obj.get("tool_version") != __version__:
        raise ArtifactError(f"{name}: written by tool version {obj.get('tool_version')!r}, "
                            f"this is {__version__}")


def _load_ckpt(path: Path, digest: str):
    if not path.exists():
        raise ArtifactError(f"missing artifact {path.name} in {path.parent}")
    ck = load_checkpoint(path)
    if ck.digest != digest:
        raise ArtifactError(f"{path.name}: config digest {ck.digest!r} does not match {digest!r}")
    return ck


def write_config(config: ExperimentConfig, out) -> None:
    _write_json(Path(out) / "config.json", config.to_dict())


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(config: ExperimentConfig, out) -> dict:
    """Digest of every artifact present; rewritten after each stage."""
    out = Path(out)
    files = {FILES[k]: _sha256(out / FILES[k]) for k in FILES
             if k != "manifest" and (out / FILES[k]).exists()}
    manifest = _stamp(config, "manifest", {"config": config.to_dict(), "files": files})
    _write_json(out / FILES["manifest"], manifest)
    return manifest


# ---------------------------------------------------------------- stages

def _splits(config: ExperimentConfig) -> Splits:
    return make_splits(config.task, config.n_train, config.n_heldout)


def stage_warmup(config: ExperimentConfig, out, splits: Splits | None = None) -> Model:
    out = Path(out)
    splits = splits or _splits(config)
    with open(out / FILES["dense_log"], "w") as fh:
        model, rep = train_dense(Model(config.model), splits.train, config.train,
                                 eval_data=splits.heldout, log_stream=fh)
    save_checkpoint(out / FILES["dense_ckpt"], model, extra={"phase": "dense"}, digest=config.digest)
    _write_json(out / FILES["dense_train"], _stamp(config, "train_report", rep.to_dict()))
    return model


def stage_profile(config: ExperimentConfig, out, splits: Splits | None = None) -> ARankReport:
    out = Path(out)
    splits = splits or _splits(config)
    dense = _load_ckpt(out / FILES["dense_ckpt"], config.digest).model
    rep = profile_arank(dense, splits.train, config.arank_samples, config.arank_masked, seed=config.train.seed)
    rep.config_digest = config.digest
    _write_json(out / FILES["arank"], _stamp(config, "arank_report", rep.to_dict()))
    _write_text(out / FILES["arank_csv"], _csv_header(config) + heatmap_csv({"train": rep}))
    return rep


def stage_convert(config: ExperimentConfig, out) -> tuple[LayerPlan, Model]:
    out = Path(out)
    obj = _read_json(out / FILES["arank"])
    _check_stamp(obj, config.digest, FILES["arank"])
    rep = ARankReport.from_dict({k: v for k, v in obj.items()
                                 if k not in ("artifact", "config_digest", "tool_version")} | {"config_digest": config.digest})
    plan = select_mod_layers(rep, config.keep_top_k)
    if config.layer_plan is not None:
        # ARank and threshold are still recorded next to the hand-set kinds
        plan = replace(plan, kinds=list(config.layer_plan), source="override")
    dense = _load_ckpt(out / FILES["dense_ckpt"], config.digest).model
    converted = convert_model(dense, plan, config.mod)
    _write_json(out / FILES["plan"], _stamp(config, "layer_plan", plan.to_dict()))
    save_checkpoint(out / FILES["converted_ckpt"], converted, extra={"phase": "converted"}, digest=config.digest)
    return plan, converted


def stage_tune(config: ExperimentConfig, out, splits: Splits | None = None) -> Model:
    out = Path(out)
    splits = splits or _splits(config)
    converted = _load_ckpt(out / FILES["converted_ckpt"], config.digest).model
    with open(out / FILES["mod_log"], "w") as fh:
        if converted.mod_layers:
            model, rep = train_mod(converted, splits.train, config.train, eval_data=splits.heldout,
                                   log_stream=fh)
        else:
            # nothing to convert: tune the dense model for the same number of steps
            model, rep = train_dense(converted, splits.train, config.train, eval_data=splits.heldout,
                                     steps=config.train.mod_steps, log_stream=fh)
    save_checkpoint(out / FILES["mod_ckpt"], model, extra={"phase": "mod"}, digest=config.digest)
    _write_json(out / FILES["mod_train"], _stamp(config, "train_report", rep.to_dict()))
    return model


def stage_eval(config: ExperimentConfig, out, splits: Splits | None = None) -> dict:
    out = Path(out)
    splits = splits or _splits(config)
    dense = _load_ckpt(out / FILES["dense_ckpt"], config.digest).model
    tuned = _load_ckpt(out / FILES["mod_ckpt"], config.digest).model
    traces: list[str] = []
    if config.n_traces:
        evaluate(tuned, splits.heldout[:config.n_traces], traces=traces)
    result = {
        "dense": evaluate(dense, splits.heldout).to_dict(),
        "mod_inference": evaluate(tuned, splits.heldout, mode="inference").to_dict(),
        "mod_training": evaluate(tuned, splits.heldout, mode="training").to_dict(),
    }
    dense_acc = result["dense"]["accuracy"]
    result["retention"] = {m: (result[m]["accuracy"] / dense_acc if dense_acc else 0.0)
                           for m in ("mod_inference", "mod_training")}
    _write_json(out / FILES["eval"], _stamp(config, "eval", result))
    header = json.dumps({"config_digest": config.digest, "tool_version": __version__}, sort_keys=True)
    _write_text(out / FILES["traces"], "\n".join([header] + traces) + "\n")
    return result


def stage_flops(config: ExperimentConfig, out) -> dict:
    out = Path(out)
    plan_obj = _read_json(out / FILES["plan"])
    _check_stamp(plan_obj, config.digest, FILES["plan"])
    ev = _read_json(out / FILES["eval"])
    _check_stamp(ev, config.digest, FILES["eval"])
    kinds = plan_obj["kinds"]
    seq_len = config.task.seq_len
    counts = {"dense": count_flops(config.model, ["dense"] * len(kinds), None, seq_len)}
    for mode in ("training", "inference"):
        skip = [ev[f"mod_{mode}"]["layer_skip"][str(i)] if k == "mod" else 0.0 for i, k in enumerate(kinds)]
        counts[f"mod_{mode}"] = count_flops(config.model, kinds, skip, seq_len)
    result = {name: {**c.to_dict(), "savings": savings(c, config.model)} for name, c in counts.items()}
    _write_json(out / FILES["flops"], _stamp(config, "flops", result))
    _write_text(out / FILES["flops_csv"], _csv_header(config) + flops_csv(counts))
    return result


# ---------------------------------------------------------------- report

def report(out) -> tuple[str, dict]:
    """Summary text plus a JSON-ready dict, built only from stage artifacts.

    Reads the manifest for the config, checks every artifact's digest and
    version against it, then writes ``summary.txt`` and ``summary.json``.
    Re-running on the same directory reproduces both files byte for byte.
    """
    out = Path(out)
    manifest = _read_json(out / FILES["manifest"])
    try:
        config = ExperimentConfig.from_dict(manifest["config"])
    except (KeyError, SpecError) as exc:
        raise ArtifactError(f"manifest has no usable config: {exc}") from exc
    digest = config.digest
    _check_stamp(manifest, digest, FILES["manifest"])
    for name, sha in manifest.get("files", {}).items():
        if name in (FILES["summary"], FILES["summary_json"]):
            continue
        p = out / name
        if not p.exists():
            raise ArtifactError(f"missing artifact {name} listed in manifest")
        if _sha256(p) != sha:
            raise ArtifactError(f"{name} changed since the manifest was written")
    arank = _read_json(out / FILES["arank"])
    plan = _read_json(out / FILES["plan"])
    ev = _read_json(out / FILES["eval"])
    fl = _read_json(out / FILES["flops"])
    for name, obj in ((FILES["arank"], arank), (FILES["plan"], plan), (FILES["eval"], ev), (FILES["flops"], fl)):
        _check_stamp(obj, digest, name)

    summary = {
        "config_digest": digest,
        "tool_version": __version__,
        "arank": arank["arank"],
        "plan": plan["kinds"],
        "plan_source": plan["source"],
        "threshold": plan["threshold"],
        "accuracy": {k: ev[k]["accuracy"] for k in ("dense", "mod_inference", "mod_training")},
        "retention": ev["retention"],
        "layer_skip": {k: ev[k]["layer_skip"] for k in ("mod_inference", "mod_training")},
        "segment_skip": {k: ev[k]["segment_skip"] for k in ("mod_inference", "mod_training")},
        "flops": {k: fl[k]["total"] for k in fl if k not in ("artifact", "config_digest", "tool_version")},
        "savings": {k: fl[k]["savings"] for k in ("mod_training", "mod_inference")},
    }
    lines = [f"modlab report  config {digest}  tool {__version__}", "", "layer  arank     plan"]
    for i, (a, k) in enumerate(zip(arank["arank"], plan["kinds"])):
        lines.append(f"{i:5d}  {a:7.3f}  {k}")
    lines += ["", f"threshold (keep_top_k={plan['keep_top_k']}): {plan['threshold']:.3f}"
                  + ("" if plan["source"] == "arank" else "  [plan set by layer_plan]"), ""]
    lines.append("accuracy   dense {dense:.4f}   mod/inference {mod_inference:.4f}   "
                 "mod/capacity {mod_training:.4f}".format(**summary["accuracy"]))
    for mode in ("mod_training", "mod_inference"):
        seg = ", ".join(f"{s} {v:.3f}" for s, v in sorted(summary["segment_skip"][mode].items()))
        lines.append(f"skip ({mode[4:]}): {seg}")
    lines += ["", f"FLOPs per sequence: dense {summary['flops']['dense']:.0f}, "
                  f"mod/capacity {summary['flops']['mod_training']:.0f} "
                  f"({100 * summary['savings']['mod_training']:+.1f}% saved), "
                  f"mod/inference {summary['flops']['mod_inference']:.0f} "
                  f"({100 * summary['savings']['mod_inference']:+.1f}% saved)"]
    text = "\n".join(lines) + "\n"
    _write_text(out / FILES["summary"], text)
    _write_json(out / FILES["summary_json"], summary)
    return text, summary


# ---------------------------------------------------------------- pipeline

@dataclass
class ExperimentResult:
    out: Path
    digest: str
    arank: ARankReport
    plan: LayerPlan
    evaluation: dict
    flops: dict
    summary: dict


def run_stage(stage: str, config: ExperimentConfig, out, splits: Splits | None = None):
    """Run one named stage, wrapping failures in :class:`StageError` and refreshing the manifest."""
    if stage not in STAGES:
        raise InputError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out = Path(out)
    try:
        if stage == "warmup":
            res = stage_warmup(config, out, splits)
        elif stage == "profile":
            res = stage_profile(config, out, splits)
        elif stage == "convert":
            res = stage_convert(config, out)
        elif stage == "tune":
            res = stage_tune(config, out, splits)
        elif stage == "eval":
            res = stage_eval(config, out, splits)
        elif stage == "flops":
            res = stage_flops(config, out)
        else:
            return report(out)
    except Exception as exc:
        write_manifest(config, out)
        raise StageError(stage, exc) from exc
    write_manifest(config, out)
    return res


def run_experiment(config: ExperimentConfig, out) -> ExperimentResult:
    """Warm-up, profile, convert, tune, evaluate, count FLOPs and report into ``out``."""
    out = Path(out)
    os.makedirs(out, exist_ok=True)
    write_config(config, out)
    splits = _splits(config)
    run_stage("warmup", config, out, splits)
    rep = run_stage("profile", config, out, splits)
    plan, _ = run_stage("convert", config, out)
    run_stage("tune", config, out, splits)
    ev = run_stage("eval", config, out, splits)
    fl = run_stage("flops", config, out)
    _, summary = run_stage("report", config, out)
    log.info("experiment %s done: %s", config.digest, summary["accuracy"])
    return ExperimentResult(out, config.digest, rep, plan, ev, fl, summary)


def artifact_digests(out) -> dict[str, str]:
    """sha256 of every file under ``out`` (for reproducibility checks)."""
    out = Path(out)
    return {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file()}


def sweep_csv(rows: list[dict]) -> str:
    """One line per routing ratio: accuracy, skip and FLOPs columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["routing_ratio", "dense_accuracy", "mod_accuracy_capacity", "mod_accuracy_inference",
            "flops_dense", "flops_mod", "savings"]
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()


def sweep_row(result: ExperimentResult, routing_ratio: float) -> dict:
    return {"routing_ratio": routing_ratio,
            "dense_accuracy": result.summary["accuracy"]["dense"],
            "mod_accuracy_capacity": result.summary["accuracy"]["mod_training"],
            "mod_accuracy_inference": result.summary["accuracy"]["mod_inference"],
            "flops_dense": result.summary["flops"]["dense"],
            "flops_mod": result.summary["flops"]["mod_training"],
            "savings": result.summary["savings"]["mod_training"]}
