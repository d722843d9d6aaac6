import numpy as np
import pytest
from scipy import stats

from modlab.errors import SpecError
from modlab.model import Segment
from modlab.tasks import ToyTaskSpec, generate_dataset, grid_seed, make_example, make_splits


def test_smallest_case_layout():
    spec = ToyTaskSpec(grid_rows=2, grid_cols=2)
    (s,) = generate_dataset(spec, 1)
    v = spec.vocab
    seg = list(s.segments)
    assert seg == [Segment.IMAGE] * 4 + [Segment.QUESTION] * 2 + [Segment.RESPONSE] * 2
    words = v.decode(s.token_ids)
    assert words[4] == "AT" and words[6] == "ANS"
    cell = int(words[5][1:])
    assert words[7] == words[cell]  # the answer is the color of the queried cell


def test_every_answer_follows_from_image():
    spec = ToyTaskSpec(templates=("color_at", "count_color"))
    for s in generate_dataset(spec, 200):
        w = spec.vocab.decode(s.token_ids)
        grid = w[:spec.n_cells]
        q = w[spec.n_cells:spec.n_cells + spec.question_len]
        ans = w[spec.n_cells + spec.question_len + 1:]
        if q[0] == "AT":
            assert ans == [grid[int(t[1:])] for t in q[1:]]
        else:
            assert ans == [f"n{grid.count(q[1])}"]


def test_multi_query_answers_distinct_cells():
    spec = ToyTaskSpec(grid_rows=2, grid_cols=2, n_queries=4)
    for s in generate_dataset(spec, 50):
        w = spec.vocab.decode(s.token_ids)
        cells = [int(t[1:]) for t in w[5:9]]
        assert sorted(cells) == [0, 1, 2, 3]
        assert w[10:] == [w[c] for c in cells]
    assert spec.seq_len == 4 + 5 + 5


def test_deterministic_and_offset():
    spec = ToyTaskSpec()
    a = generate_dataset(spec, 10)
    assert a == generate_dataset(spec, 10)
    assert generate_dataset(spec, 5, offset=5) == a[5:]


def test_splits_disjoint():
    spec = ToyTaskSpec()
    sp = make_splits(spec, 100, 50)
    assert not set(sp.seeds["train"]) & set(sp.seeds["heldout"])
    assert grid_seed(spec, "train", 0) != grid_seed(spec, "heldout", 0)


def test_answer_colors_uniform_chi_square():
    spec = ToyTaskSpec()
    data = generate_dataset(spec, 10_000)
    answers = [spec.vocab.decode(s.token_ids[-1:])[0] for s in data]
    counts = np.array([answers.count(f"c{i}") for i in range(spec.n_colors)])
    assert counts.sum() == 10_000
    assert stats.chisquare(counts).pvalue > 1e-3


def test_spec_errors():
    with pytest.raises(SpecError):
        generate_dataset(ToyTaskSpec(max_seq_len=5), 1)
    with pytest.raises(SpecError):
        generate_dataset(ToyTaskSpec(), 0)
    with pytest.raises(SpecError):
        ToyTaskSpec(templates=("nope",))
    with pytest.raises(SpecError):
        ToyTaskSpec(train_seed=3, heldout_seed=3)
    with pytest.raises(SpecError):
        ToyTaskSpec(n_queries=10)
    with pytest.raises(SpecError):
        ToyTaskSpec(templates=("count_color",), n_queries=2)
    with pytest.raises(SpecError):
        ToyTaskSpec().split_seed("test")


def test_spec_round_trip():
    spec = ToyTaskSpec(templates=("color_at", "count_color"))
    assert ToyTaskSpec.from_dict(spec.to_dict()) == spec


def test_make_example_source_is_seed():
    spec = ToyTaskSpec()
    assert make_example(spec, 42).source == "42"
