"""Downstream diagnostic tasks and token-level accuracy.

Vocabulary layouts are fixed:

* arithmetic: digits 0-9 are ids 0-9, ``+`` = 10, ``x`` = 11, ``=`` = 12, pad = 13
* sorting: values ``0..P-1``, separator = ``P``, pad = ``P + 1``
* haystack: values ``0..49``, markers ``50..99``
* language modelling: words by frequency rank, UNK and PAD appended
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .procgen import Episode

PLUS, TIMES, EQUALS, ARITH_PAD = 10, 11, 12, 13
ARITH_VOCAB = 14

HAYSTACK_VALUES = 50
HAYSTACK_MARKERS = 50
HAYSTACK_VOCAB = HAYSTACK_VALUES + HAYSTACK_MARKERS

TASK_DEFAULTS = {
    "haystack": {"k_pairs": 30},
    "addition": {"n_digits": 5},
    "reversed_addition": {"n_digits": 10},
    "multiplication": {"n_digits": 5},
    "sorting": {"n": 10, "P": 100},
    "language_modelling": {"seq_len": 64, "vocab_size": 2000},
}


@dataclass
class VocabMap:
    """Token id assignment for one task."""

    size: int
    pad: int
    separator: int | None = None
    symbols: dict[str, int] = field(default_factory=dict)
    words: list[str] = field(default_factory=list)
    unk: int | None = None

    def encode_words(self, words: list[str]) -> np.ndarray:
        index = {w: i for i, w in enumerate(self.words)}
        return np.array([index.get(w, self.unk) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        inv = {v: k for k, v in self.symbols.items()}
        out = []
        for i in map(int, ids):
            if i < len(self.words):
                out.append(self.words[i])
            else:
                out.append(inv.get(i, str(i)))
        return out


ARITH_VOCAB_MAP = VocabMap(
    size=ARITH_VOCAB, pad=ARITH_PAD, separator=EQUALS,
    symbols={"+": PLUS, "x": TIMES, "=": EQUALS, "<pad>": ARITH_PAD},
)


def sorting_vocab(P: int = 100) -> VocabMap:
    return VocabMap(size=P + 2, pad=P + 1, separator=P, symbols={"|": P, "<pad>": P + 1})


def gen_haystack(k_pairs: int, rng: np.random.Generator) -> Episode:
    """``m1 c1 ... mk ck mu`` -> ``cu`` with distinct markers."""
    if k_pairs < 1:
        raise ValueError("k_pairs must be >= 1")
    if k_pairs > HAYSTACK_MARKERS:
        raise ValueError(f"only {HAYSTACK_MARKERS} markers available for {k_pairs} pairs")
    markers = HAYSTACK_VALUES + rng.choice(HAYSTACK_MARKERS, size=k_pairs, replace=False)
    values = rng.integers(0, HAYSTACK_VALUES, size=k_pairs)
    u = int(rng.integers(k_pairs))
    seq = np.empty(2 * k_pairs + 1, dtype=np.int64)
    seq[0:-1:2] = markers
    seq[1::2] = values
    seq[-1] = markers[u]
    return Episode.seq2seq(seq, [values[u]])


def _digits(x: int, width: int) -> list[int]:
    return [int(c) for c in str(x).zfill(width)]


def gen_addition(n_digits: int, reversed: bool, rng: np.random.Generator,
                 operands: tuple[int, int] | None = None) -> Episode:
    """``a + b =`` followed by the ``n+1``-digit zero-padded sum.

    In reversed mode every number is written least-significant digit first.
    """
    if n_digits < 1:
        raise ValueError("n_digits must be >= 1")
    if operands is None:
        a, b = (int(v) for v in rng.integers(0, 10 ** n_digits, size=2))
    else:
        a, b = operands
    da, db, dc = _digits(a, n_digits), _digits(b, n_digits), _digits(a + b, n_digits + 1)
    if reversed:
        da, db, dc = da[::-1], db[::-1], dc[::-1]
    return Episode.seq2seq(da + [PLUS] + db + [EQUALS], dc)


def gen_multiplication(n_digits: int, rng: np.random.Generator,
                       operands: tuple[int, int] | None = None) -> Episode:
    """``a x b =`` followed by the ``2n``-digit zero-padded product."""
    if n_digits < 1:
        raise ValueError("n_digits must be >= 1")
    if operands is None:
        a, b = (int(v) for v in rng.integers(0, 10 ** n_digits, size=2))
    else:
        a, b = operands
    inp = _digits(a, n_digits) + [TIMES] + _digits(b, n_digits) + [EQUALS]
    return Episode.seq2seq(inp, _digits(a * b, 2 * n_digits))


def gen_sorting(n: int, P: int, rng: np.random.Generator) -> Episode:
    if n < 1 or P < 2:
        raise ValueError("need n >= 1 and P >= 2")
    x = rng.integers(0, P, size=n)
    return Episode.seq2seq(np.append(x, P), np.sort(x, kind="stable"))


_WORD_RE = re.compile(r"\w+|[^\w\s]")


def tokenize_words(text: str) -> list[str]:
    """Lower-cased words and individual punctuation marks."""
    return _WORD_RE.findall(text.lower())


def build_lm_dataset(corpus_text: str, vocab_size: int = 2000, seq_len: int = 64):
    """Non-overlapping ``seq_len`` windows; only the last token is supervised.

    Returns ``(episodes, vocab)``; words outside the ``vocab_size`` most frequent
    map to UNK.
    """
    words = tokenize_words(corpus_text)
    if len(words) < seq_len:
        raise ValueError(f"corpus has {len(words)} tokens, fewer than one {seq_len}-token window")
    ranked = [w for w, _ in Counter(words).most_common(vocab_size)]
    n = len(ranked)
    vocab = VocabMap(size=n + 2, pad=n + 1, unk=n, words=ranked,
                     symbols={"<unk>": n, "<pad>": n + 1})
    ids = vocab.encode_words(words)
    n_windows = len(ids) // seq_len
    episodes = [
        Episode.seq2seq(w[:-1], w[-1:])
        for w in ids[: n_windows * seq_len].reshape(n_windows, seq_len)
    ]
    return episodes, vocab


def token_accuracy(logits, targets, mask=None) -> float:
    """Fraction of masked positions whose argmax (lowest id on ties) is the target."""
    z = np.asarray(getattr(logits, "data", logits))
    z = z.reshape(-1, z.shape[-1])
    t = np.asarray(targets).reshape(-1)
    m = np.ones(len(t), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if not m.any():
        raise ValueError("accuracy mask selects no positions")
    return float((z[m].argmax(axis=1) == t[m]).mean())
