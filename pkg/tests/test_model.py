import zipfile

import numpy as np
import pytest

from modlab import autodiff as ad
from modlab.autodiff import Tape
from modlab.errors import ArtifactError, InputError, ShapeError, StateError
from modlab.model import (Batch, Model, ModelConfig, Segment, TokenSequence, attention_logits,
                          autoregressive_loss, causal_mask, forward, load_checkpoint, require_dense,
                          response_targets, save_checkpoint)
from modlab.modlayer import MoDConfig, convert_model
from modlab.training import gradcheck

from oracles import manual_layer_norm


def seq(ids, segs):
    return TokenSequence(np.array(ids), np.array(segs))


def test_config_validation():
    with pytest.raises(InputError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(InputError):
        ModelConfig(n_layers=-1)
    assert ModelConfig(n_layers=0).n_layers == 0
    cfg = ModelConfig(d_model=8, n_heads=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_token_sequence_validation():
    with pytest.raises(InputError):
        seq([1, 2], [0])
    with pytest.raises(InputError):
        seq([1], [5])
    with pytest.raises(InputError):
        Batch.of([seq([1, 2], [1, 2]), seq([1], [2])])
    s = seq([1, 2, 3], [1, 0, 2])
    assert list(s.question_mask) == [1.0, 0.0, 1.0]


def test_logits_shape_and_determinism(small_model, small_data):
    a = forward(small_model, small_data[:3]).logits.value
    b = forward(Model(small_model.config), small_data[:3]).logits.value
    assert a.shape == (3, small_data[0].length, small_model.config.vocab_size)
    assert np.array_equal(a, b)


def test_causality(small_model, small_data):
    s = small_data[0]
    base = forward(small_model, s).logits.value[0]
    ids = s.token_ids.copy()
    ids[-1] = (ids[-1] + 1) % small_model.config.vocab_size
    changed = forward(small_model, TokenSequence(ids, s.segments)).logits.value[0]
    assert np.array_equal(base[:-1], changed[:-1])
    assert not np.array_equal(base[-1], changed[-1])


def test_zero_layer_model_is_embedding_plus_head():
    cfg = ModelConfig(n_layers=0, d_model=4, n_heads=1, d_ff=4, vocab_size=6, max_seq_len=4, seed=1)
    m = Model(cfg)
    s = seq([1, 5, 2], [1, 0, 2])
    got = forward(m, s).logits.value[0]
    p = m.params
    for t in range(3):
        x = p["tok_emb"][s.token_ids[t]] + p["pos_emb"][t] + p["seg_emb"][s.segments[t]]
        h = np.array(manual_layer_norm(list(x), p["ln_f.g"], p["ln_f.b"]))
        assert np.allclose(got[t], h @ p["head.w"], atol=1e-13)


def test_single_token_attends_only_to_itself(small_model):
    # one-token sequence: attention weight is exactly 1 on itself, so the
    # attention output equals the value projection of that token
    w = {k: ad.Var(v) for k, v in small_model.layer_params(0).weights.items()}
    x = np.random.default_rng(0).normal(size=(1, 1, 16))
    h = ad.layer_norm(ad.Var(x), w["ln1.g"], w["ln1.b"]).value
    from modlab.model import block_delta
    delta, logits = block_delta(w, ad.Var(x), 2)
    a = h @ w["attn.wv"].value @ w["attn.wo"].value
    h2 = ad.layer_norm(ad.Var(x + a), w["ln2.g"], w["ln2.b"])
    f = (ad.gelu(h2 @ w["ffn.w1"] + w["ffn.b1"]) @ w["ffn.w2"] + w["ffn.b2"]).value
    assert np.allclose(delta.value, a + f, atol=1e-14)
    assert logits.shape == (1, 2, 1, 1)


def test_causal_mask():
    m = causal_mask(3)
    assert m[0, 1] < -1e29 and m[1, 0] == 0 and m[2, 2] == 0


def test_response_targets_and_loss_by_hand(small_model):
    s = seq([1, 2, 3, 4], [1, 0, 2, 2])
    rows, pos, tgt = response_targets(Batch.of(s))
    assert list(pos) == [1, 2] and list(tgt) == [3, 4]
    logits = np.zeros((1, 4, 6))
    logits[0, 1, 3] = 2.0
    want = (-np.log(np.exp(2) / (np.exp(2) + 5)) + np.log(6)) / 2
    assert float(autoregressive_loss(logits, s).value) == pytest.approx(want, rel=1e-14)
    with pytest.raises(InputError):
        autoregressive_loss(np.zeros((1, 2, 6)), seq([1, 2], [1, 0]))
    with pytest.raises(ShapeError):
        autoregressive_loss(np.zeros((1, 3, 6)), s)


def test_forward_input_errors(small_model):
    with pytest.raises(InputError):
        forward(small_model, seq([0] * 40, [1] * 40))
    with pytest.raises(InputError):
        forward(small_model, seq([999, 1], [1, 2]))


def test_attention_logits_match_capture(small_model, small_data):
    res = forward(small_model, small_data[0], capture=True)
    x0 = (small_model.params["tok_emb"][small_data[0].token_ids]
          + small_model.params["pos_emb"][:small_data[0].length]
          + small_model.params["seg_emb"][small_data[0].segments])
    for h in range(2):
        assert np.allclose(attention_logits(x0, small_model.layer_params(0), h), res.attention[0][0][h],
                           atol=1e-13)
    scaled = attention_logits(x0, small_model.layer_params(0), 0, scaled=True)
    assert np.allclose(scaled * np.sqrt(8), res.attention[0][0][0])
    with pytest.raises(ShapeError):
        attention_logits(np.ones((3, 5)), small_model.layer_params(0), 0)


def test_dense_gradcheck(small_model, small_data):
    res = gradcheck(small_model, small_data, n_probes=30, seed=1)
    assert res.passed, res.worst_rel_error


def test_checkpoint_round_trip(tmp_path, small_model, small_data):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, small_model, extra={"step": 3}, digest="abc")
    ck = load_checkpoint(p)
    assert ck.extra == {"step": 3} and ck.digest == "abc"
    for k, v in small_model.params.items():
        assert np.array_equal(ck.model.params[k], v)
    assert np.array_equal(forward(ck.model, small_data[:2]).logits.value,
                          forward(small_model, small_data[:2]).logits.value)


def test_checkpoint_bytes_deterministic(tmp_path, small_model):
    save_checkpoint(tmp_path / "a", small_model)
    save_checkpoint(tmp_path / "b", small_model)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_keeps_mod_layers(tmp_path, small_model, small_data):
    conv = convert_model(small_model, ["dense", "mod"], MoDConfig(routing_ratio=0.5))
    save_checkpoint(tmp_path / "c", conv)
    back = load_checkpoint(tmp_path / "c").model
    assert back.layer_kinds == ["dense", "mod"]
    assert back.mod_config == conv.mod_config
    assert np.array_equal(forward(back, small_data[:4]).logits.value, forward(conv, small_data[:4]).logits.value)


def test_corrupt_checkpoint(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"not a zip")
    with pytest.raises(ArtifactError):
        load_checkpoint(p)
    with zipfile.ZipFile(tmp_path / "empty.zip", "w"):
        pass
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "empty.zip")


def test_require_dense(small_model):
    require_dense(small_model)
    with pytest.raises(StateError):
        require_dense(convert_model(small_model, ["mod", "dense"], MoDConfig()))


def test_segment_enum_values():
    assert [s.value for s in Segment] == [0, 1, 2]


def test_tape_records_every_parameter(small_model, small_data):
    tape = Tape()
    res = forward(small_model, small_data[:2], tape=tape)
    grads = tape.backward(autoregressive_loss(res.logits, small_data[:2]))
    assert set(grads) == set(small_model.params)
