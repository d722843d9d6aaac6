import numpy as np
import pytest

from modlab.errors import InputError
from modlab.flops import count_flops, dense_flops, flops_csv, instrumented_flops, layer_flops, savings
from modlab.model import Model, ModelConfig
from modlab.modlayer import MoDConfig, convert_model
from modlab.tasks import ToyTaskSpec, generate_dataset

from oracles import dense_transformer_flops

CFG = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=64, vocab_size=30, max_seq_len=32)


def test_dense_matches_textbook_formula():
    c = count_flops(CFG, ["dense"] * 4, None, 20)
    assert c.total == 4 * dense_transformer_flops(20, 16, 64)
    assert dense_flops(CFG, 20) == c.total
    assert savings(c, CFG) == 0.0


def test_full_skip_leaves_router_only():
    c = count_flops(CFG, ["dense", "mod", "dense", "dense"], [0, 1.0, 0, 0], 20)
    assert c.attention[1] == 0 and c.ffn[1] == 0
    assert c.per_layer[1] == c.router[1] == 4 * 20 * 16


def test_monotone_in_skip_ratio():
    totals = [count_flops(CFG, ["mod"] * 4, [s] * 4, 24).total for s in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(totals, totals[1:]))


def test_ffn_linear_and_attention_quadratic_in_kept_tokens():
    d, f = CFG.d_model, CFG.d_ff
    pts = [4.0, 10.0, 16.0]
    att = [layer_flops(l, d, f)[0] for l in pts]
    ffn = [layer_flops(l, d, f)[1] for l in pts]
    # linear: second difference zero; quadratic: third point predicted by a parabola through the first two
    assert (ffn[2] - ffn[1]) / 6 == pytest.approx((ffn[1] - ffn[0]) / 6, rel=1e-15)
    quad = np.polyfit(pts, att, 2)
    assert quad[0] == pytest.approx(4 * d, rel=1e-12)
    assert quad[1] == pytest.approx(8 * d * d, rel=1e-12)


def test_errors():
    with pytest.raises(InputError):
        count_flops(CFG, ["dense"] * 3, None, 10)
    with pytest.raises(InputError):
        count_flops(CFG, ["mod"] * 4, [0.1] * 3, 10)
    with pytest.raises(InputError):
        count_flops(CFG, ["mod"] * 4, [1.5] * 4, 10)
    with pytest.raises(InputError):
        count_flops(CFG, ["dense"] * 4, [0.5] * 4, 10)


def test_instrumented_close_to_analytic_for_wide_model():
    spec = ToyTaskSpec()
    cfg = ModelConfig(n_layers=2, d_model=128, n_heads=2, d_ff=512, vocab_size=len(spec.vocab),
                      max_seq_len=spec.seq_len)
    data = generate_dataset(spec, 4)
    m = Model(cfg)
    ins = instrumented_flops(m, data)
    an = count_flops(cfg, ["dense", "dense"], None, spec.seq_len)
    assert abs(ins.total / an.total - 1) < 0.02
    assert ins.total > an.total  # instrumentation also counts normalization and softmax
    conv = convert_model(m, ["dense", "mod"], MoDConfig(routing_ratio=0.51))
    ins2 = instrumented_flops(conv, data)
    an2 = count_flops(cfg, conv.layer_kinds, ins2.skip_ratios, spec.seq_len)
    assert abs(ins2.total / an2.total - 1) < 0.02


def test_flops_csv_layout():
    c = count_flops(CFG, ["dense", "mod", "mod", "dense"], [0, 0.5, 0.25, 0], 8)
    lines = flops_csv({"x": c}).strip().split("\n")
    assert lines[0].startswith("model,layer,kind")
    assert len(lines) == 1 + 4 + 1
    assert lines[-1].startswith("x,all")
