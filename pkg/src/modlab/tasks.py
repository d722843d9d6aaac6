"""Synthetic grid-question-answer data standing in for image/instruction pairs.

Every sequence is ``[image cells][question][answer]``: the image is a
row-major grid of color tokens.

* ``color_at``: question ``(AT, cell_i1 .. cell_iQ)``, answer the colors of
  the Q queried cells (row-major indices, distinct); ``n_queries=1`` is a
  single-cell lookup
* ``count_color``: question ``(COUNT, color_k)``, answer the number of cells
  of color k

The response segment opens with an ``ANS`` marker followed by the answer
tokens, so every answer token is predicted from a response position.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import SpecError
from .model import Segment, TokenSequence
from .numerics import Rng

TEMPLATES = ("color_at", "count_color")
_SPLIT_STRIDE = 10**9


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass(frozen=True)
class ToyTaskSpec:
    grid_rows: int = 3
    grid_cols: int = 3
    n_colors: int = 4
    templates: tuple[str, ...] = ("color_at",)
    n_queries: int = 1
    max_seq_len: int = 32
    train_seed: int = 1
    heldout_seed: int = 2

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if self.grid_rows < 1 or self.grid_cols < 1 or self.n_colors < 1:
            raise SpecError("grid dimensions and n_colors must be >= 1")
        unknown = set(self.templates) - set(TEMPLATES)
        if unknown or not self.templates:
            raise SpecError(f"templates must be a non-empty subset of {TEMPLATES}, got {self.templates}")
        if not 1 <= self.n_queries <= self.grid_rows * self.grid_cols:
            raise SpecError("n_queries must lie in [1, n_cells]")
        if "count_color" in self.templates and self.n_queries != 1:
            raise SpecError("count_color supports n_queries=1 only")
        if self.train_seed == self.heldout_seed:
            raise SpecError("train and held-out split seeds must differ")

    @property
    def n_cells(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def question_len(self) -> int:
        return self.n_queries + 1

    @property
    def seq_len(self) -> int:
        return self.n_cells + self.question_len + 1 + self.n_queries

    @property
    def vocab(self) -> Vocab:
        toks = [f"c{i}" for i in range(self.n_colors)]
        toks += [f"n{i}" for i in range(self.n_cells + 1)]
        toks += [f"p{i}" for i in range(self.n_cells)]
        toks += ["AT", "COUNT", "ANS"]
        return Vocab(tuple(toks))

    def split_seed(self, split: str) -> int:
        try:
            return {"train": self.train_seed, "heldout": self.heldout_seed}[split]
        except KeyError:
            raise SpecError(f"unknown split {split!r}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["templates"] = list(self.templates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyTaskSpec":
        return cls(**d)


def grid_seed(spec: ToyTaskSpec, split: str, i: int) -> int:
    """Seed of the i-th grid in a split; distinct split seeds give disjoint seed sets."""
    return spec.split_seed(split) * _SPLIT_STRIDE + i


def make_example(spec: ToyTaskSpec, gseed: int) -> TokenSequence:
    vocab = spec.vocab
    rng = Rng(gseed)
    grid = rng.split("grid").integers(0, spec.n_colors, size=spec.n_cells)
    q = rng.split("question")
    template = spec.templates[int(q.integers(0, len(spec.templates)))]
    if template == "color_at":
        cells = q.choice(spec.n_cells, size=spec.n_queries, replace=False)
        question = [vocab.id("AT")] + [vocab.id(f"p{c}") for c in cells]
        answer = [vocab.id(f"c{grid[c]}") for c in cells]
    else:
        k = int(q.integers(0, spec.n_colors))
        question = [vocab.id("COUNT"), vocab.id(f"c{k}")]
        answer = [vocab.id(f"n{int(np.sum(grid == k))}")]
    ids = [vocab.id(f"c{v}") for v in grid] + question + [vocab.id("ANS")] + answer
    segs = ([Segment.IMAGE] * spec.n_cells + [Segment.QUESTION] * spec.question_len
            + [Segment.RESPONSE] * (1 + spec.n_queries))
    return TokenSequence(np.array(ids), np.array(segs, dtype=np.int64), source=str(gseed))


def generate_dataset(spec: ToyTaskSpec, n: int, split: str = "train", offset: int = 0) -> list[TokenSequence]:
    """``n`` sequences of ``split``; deterministic in (spec, split, offset)."""
    if n < 1:
        raise SpecError("n must be >= 1")
    if spec.seq_len > spec.max_seq_len:
        raise SpecError(f"sequence needs {spec.seq_len} tokens, budget is {spec.max_seq_len}")
    return [make_example(spec, grid_seed(spec, split, offset + i)) for i in range(n)]


@dataclass
class Splits:
    train: list[TokenSequence]
    heldout: list[TokenSequence]
    seeds: dict = field(default_factory=dict)


def make_splits(spec: ToyTaskSpec, n_train: int, n_heldout: int) -> Splits:
    train = generate_dataset(spec, n_train, "train")
    heldout = generate_dataset(spec, n_heldout, "heldout")
    tr = {int(s.source) for s in train}
    ho = {int(s.source) for s in heldout}
    assert not tr & ho, "train and held-out grid seeds overlap"
    return Splits(train, heldout, {"train": sorted(tr), "heldout": sorted(ho)})
