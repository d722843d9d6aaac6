import json

import pytest

from modlab.errors import ArtifactError, SpecError
from modlab.experiment import (FILES, ExperimentConfig, StageError, artifact_digests, report, run_experiment,
                               run_stage, sweep_csv, sweep_row, write_config)
from modlab.modlayer import MoDConfig
from modlab.tasks import ToyTaskSpec
from modlab.training import TrainConfig


def tiny(**kw):
    task = ToyTaskSpec(grid_rows=2, grid_cols=2, n_colors=3)
    # long enough a warm-up that the two layers' ARank separate
    base = dict(model={"d_model": 16, "n_heads": 2, "d_ff": 32, "seed": 1, "init_gain": 0.1},
                train=TrainConfig(learning_rate=1e-2, warmup_steps=200, mod_steps=10, batch_size=8, eval_every=50),
                mod=MoDConfig(routing_ratio=0.34), n_train=40, n_heldout=20, arank_samples=8, n_traces=3)
    base.update(kw)
    return ExperimentConfig.for_task(task, **base)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_experiment(tiny(), out)


def test_config_round_trip():
    cfg = tiny()
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.digest == cfg.digest
    assert cfg.with_seed(9).digest != cfg.digest


@pytest.mark.parametrize("text", [
    "not json",
    "[]",
    '{"schema": "other"}',
    '{"schema": "modlab.experiment/1", "extra": {}}',
    '{"schema": "modlab.experiment/1", "model": {"d_model": 15, "n_heads": 2}}',
    '{"schema": "modlab.experiment/1", "experiment": {"bogus": 1}}',
    '{"schema": "modlab.experiment/1", "model": {"max_seq_len": 3}}',
])
def test_bad_configs_rejected(text):
    with pytest.raises(SpecError):
        ExperimentConfig.from_json(text)


def test_pipeline_artifacts(finished):
    out = finished.out
    for name in FILES.values():
        assert (out / name).exists(), name
    assert (out / "config.json").exists()
    stamped = json.loads((out / FILES["eval"]).read_text())
    assert stamped["config_digest"] == finished.digest
    assert (out / FILES["arank_csv"]).read_text().startswith(f"# config_digest={finished.digest}")
    assert len(finished.arank.arank) == 2
    assert finished.plan.kinds.count("mod") == 1
    assert finished.summary["accuracy"]["dense"] == finished.evaluation["dense"]["accuracy"]
    header, *traces = (out / FILES["traces"]).read_text().splitlines()
    assert json.loads(header)["config_digest"] == finished.digest
    assert len(traces) > 0


def test_training_skip_matches_capacity(finished):
    ev = finished.evaluation["mod_training"]
    mod = finished.plan.kinds.index("mod")
    assert ev["layer_skip"][str(mod)] > 0
    assert ev["segment_skip"]["question"] == 0.0


def test_report_is_idempotent(finished):
    before = artifact_digests(finished.out)
    text, summary = report(finished.out)
    assert artifact_digests(finished.out) == before
    assert text == (finished.out / FILES["summary"]).read_text()
    assert summary == finished.summary


def test_report_rejects_tampering(finished, tmp_path):
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(finished.out, copy)
    ev = json.loads((copy / FILES["eval"]).read_text())
    ev["dense"]["accuracy"] = 1.0
    (copy / FILES["eval"]).write_text(json.dumps(ev))
    with pytest.raises(ArtifactError):
        report(copy)


def test_foreign_checkpoint_rejected(finished, tmp_path):
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(finished.out, copy)
    other = tiny(n_traces=2)
    with pytest.raises(StageError) as info:
        run_stage("profile", other, copy)
    assert isinstance(info.value.__cause__, ArtifactError)


def test_missing_input_is_stage_error(tmp_path):
    cfg = tiny()
    write_config(cfg, tmp_path)
    with pytest.raises(StageError) as info:
        run_stage("convert", cfg, tmp_path)
    assert info.value.stage == "convert"


def test_byte_identical_rerun(finished, tmp_path):
    again = run_experiment(tiny(), tmp_path / "again")
    assert artifact_digests(again.out) == artifact_digests(finished.out)


def test_dense_only_plan_saves_nothing(tmp_path):
    res = run_experiment(tiny(keep_top_k=2), tmp_path)
    assert res.plan.kinds == ["dense", "dense"]
    assert res.summary["savings"] == {"mod_training": 0.0, "mod_inference": 0.0}
    assert res.summary["accuracy"]["mod_training"] == res.summary["accuracy"]["mod_inference"]


def test_sweep_csv(finished):
    text = sweep_csv([sweep_row(finished, 0.34)])
    head, row = text.splitlines()
    assert head.startswith("routing_ratio,")
    assert row.startswith("0.34,")


def test_layer_plan_override(tmp_path):
    res = run_experiment(tiny(layer_plan=("mod", "dense")), tmp_path)
    assert res.plan.kinds == ["mod", "dense"]
    assert res.plan.source == "override"
    assert res.summary["plan_source"] == "override"
    assert "set by layer_plan" in (tmp_path / FILES["summary"]).read_text()
    with pytest.raises(SpecError):
        tiny(layer_plan=("mod",))
    with pytest.raises(SpecError):
        tiny(layer_plan=("mod", "sparse"))


def test_preset_is_valid_and_round_trips():
    cfg = ExperimentConfig.preset(routing_ratio=0.68, seed=3)
    assert cfg.mod.routing_ratio == 0.68 and cfg.model.seed == 3 and cfg.train.seed == 3
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


def test_alpha_zero_pipeline_matches_dense_pipeline(tmp_path):
    pinned = run_experiment(tiny(mod=MoDConfig(routing_ratio=0.0, pin_scores=True), layer_plan=("mod", "mod"),
                                 train=TrainConfig(learning_rate=1e-2, warmup_steps=200, mod_steps=10, batch_size=8,
                                                   eval_every=50, loss_coefficient=0.0)), tmp_path / "a")
    dense = run_experiment(tiny(keep_top_k=2), tmp_path / "b")
    assert dense.plan.kinds == ["dense", "dense"]
    for mode in ("mod_training", "mod_inference"):
        assert pinned.summary["accuracy"][mode] == dense.summary["accuracy"][mode]
    assert pinned.summary["savings"]["mod_training"] <= 0.0  # router overhead only
