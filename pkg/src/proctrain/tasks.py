"""Registry of pretraining and diagnostic tasks as batch samplers.

A :class:`Batch` holds padded token rows and a loss mask aligned with them
(``mask[b, t]`` means token ``t`` of row ``b`` is predicted from tokens
``< t``). The ECA task instead carries binary rows ``[B, T, W]`` where every
row after the first is predicted from the rows before it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diagnostics as dg
from . import procgen as pg
from .model import ModelConfig
from .procgen import Episode

PRETRAIN_TASKS = ("dyck", "dyck_shuffle", "stack", "identity", "set", "eca")
DIAGNOSTIC_TASKS = (
    "haystack", "addition", "reversed_addition", "multiplication", "sorting", "language_modelling",
)


class UnknownTaskError(KeyError):
    pass


@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def model_io(self):
        """``(inputs, targets, select)`` under the shift-by-one convention."""
        return self.tokens[:, :-1], self.tokens[:, 1:], self.mask[:, 1:]


def collate(episodes: list[Episode], pad: int) -> Batch:
    width = max(len(ep.loss_mask) for ep in episodes)
    tokens = np.full((len(episodes), width), pad, dtype=np.int64)
    mask = np.zeros((len(episodes), width), dtype=bool)
    for i, ep in enumerate(episodes):
        seq = ep.tokens
        tokens[i, : len(seq)] = seq
        mask[i, : len(seq)] = ep.loss_mask
    return Batch(tokens, mask)


@dataclass
class Task:
    name: str
    kind: str  # "token" or "binary"
    vocab_size: int
    max_len: int
    pad: int | None
    sampler: Callable[[int, np.random.Generator, int | None], Batch]
    curriculum: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def sample(self, n: int, rng: np.random.Generator, length: int | None = None) -> Batch:
        return self.sampler(n, rng, length)

    def model_config(self, n_layers: int = 2, n_heads: int = 4, d_model: int = 16) -> ModelConfig:
        if self.kind == "binary":
            return ModelConfig(n_layers, n_heads, d_model, context_length=self.max_len,
                               vocab_size=2, input_mode="binary_vector",
                               binary_width=self.meta["width"])
        return ModelConfig(n_layers, n_heads, d_model, context_length=self.max_len,
                           vocab_size=self.vocab_size)


def _episodes_sampler(make: Callable[[np.random.Generator, int | None], Episode], pad: int):
    def sample(n, rng, length):
        # ``length`` may also be a per-episode sequence of lengths
        lengths = [length] * n if length is None or np.ndim(length) == 0 else list(length)
        return collate([make(rng, None if m is None else int(m)) for m in lengths], pad)

    return sample


def _dyck_task(k: int, shuffle: bool) -> Task:
    params = pg.DyckParams(k=k, seq_len=128, p_open=0.5 if shuffle else 0.49)

    def sample(n, rng, length):
        seqs = (pg.gen_dyck_shuffle_batch(params, n, rng) if shuffle
                else pg.gen_dyck_batch(params, n, rng))
        mask = np.ones_like(seqs, dtype=bool)
        mask[:, 0] = False
        return Batch(seqs, mask)

    name = f"{'dyck_shuffle' if shuffle else 'dyck'}-{k}"
    return Task(name, "token", 2 * k, params.seq_len, None, sample, meta={"k": k})


def _eca_task(rule: int = 110, width: int = 100, steps: int = 60) -> Task:
    params = pg.EcaParams(rule=rule, width=width, steps=steps)

    def sample(n, rng, length):
        rows = pg.gen_eca_trace(params, rng, n=n)
        mask = np.ones(rows.shape[:2], dtype=bool)
        mask[:, 0] = False
        return Batch(rows, mask)

    return Task("eca", "binary", 2, steps, None, sample, meta={"width": width, "rule": rule})


def _lm_task(corpus_text: str, vocab_size: int = 2000, seq_len: int = 64) -> Task:
    episodes, vocab = dg.build_lm_dataset(corpus_text, vocab_size, seq_len)
    data = collate(episodes, vocab.pad)

    def sample(n, rng, length):
        idx = rng.integers(0, len(episodes), size=n)
        return Batch(data.tokens[idx], data.mask[idx])

    return Task("language_modelling", "token", vocab.size, seq_len, vocab.pad, sample,
                meta={"vocab": vocab, "n_episodes": len(episodes), "episodes": data})


def get_task(name: str, corpus_text: str | None = None, **params) -> Task:
    """Look up a task by id, e.g. ``identity``, ``dyck-4``, ``dyck_shuffle-16``, ``sorting``."""
    base, _, arg = name.partition("-")
    if base in ("dyck", "dyck_shuffle"):
        return _dyck_task(int(arg or params.get("k", 4)), shuffle=base == "dyck_shuffle")
    if base == "stack":
        return Task(name, "token", pg.STACK_VOCAB, 2 * 20 + 1, pg.STACK_PAD,
                    _episodes_sampler(lambda r, n: pg.gen_stack_episode(n or 20, r), pg.STACK_PAD),
                    curriculum=(4, 20))
    if base == "identity":
        return Task(name, "token", pg.SEQ_VOCAB, 2 * 20 + 1, pg.SEQ_PAD,
                    _episodes_sampler(lambda r, n: pg.gen_identity_episode(n or 20, r), pg.SEQ_PAD),
                    curriculum=(4, 20))
    if base == "set":
        return Task(name, "token", pg.SEQ_VOCAB, 2 * 20 + 1, pg.SEQ_PAD,
                    _episodes_sampler(lambda r, n: pg.gen_set_episode(n or 20, r), pg.SEQ_PAD),
                    curriculum=(2, 20))
    if base == "eca":
        return _eca_task(**params)
    if base == "haystack":
        k = params.get("k_pairs", 30)
        return Task(name, "token", dg.HAYSTACK_VOCAB, 2 * k + 2, None,
                    _episodes_sampler(lambda r, n: dg.gen_haystack(k, r), 0))
    if base in ("addition", "reversed_addition"):
        rev = base == "reversed_addition"
        nd = params.get("n_digits", 10 if rev else 5)
        return Task(name, "token", dg.ARITH_VOCAB, 3 * nd + 3, dg.ARITH_PAD,
                    _episodes_sampler(lambda r, n: dg.gen_addition(nd, rev, r), dg.ARITH_PAD))
    if base == "multiplication":
        nd = params.get("n_digits", 5)
        return Task(name, "token", dg.ARITH_VOCAB, 4 * nd + 2, dg.ARITH_PAD,
                    _episodes_sampler(lambda r, n: dg.gen_multiplication(nd, r), dg.ARITH_PAD))
    if base == "sorting":
        n_items, P = params.get("n", 10), params.get("P", 100)
        return Task(name, "token", P + 2, 2 * n_items + 1, P + 1,
                    _episodes_sampler(lambda r, n: dg.gen_sorting(n_items, P, r), P + 1))
    if base == "language_modelling":
        if corpus_text is None:
            raise ValueError("language_modelling needs a corpus (--corpus)")
        return _lm_task(corpus_text, params.get("vocab_size", 2000), params.get("seq_len", 64))
    raise UnknownTaskError(name)
