"""Procedural pretraining data: k-Dyck, k-Dyck shuffle, Stack, Identity, Set, ECA.

Token layouts
-------------
* Dyck variants: open bracket of type ``i`` is id ``i``, its closer is ``k + i``.
* Stack: values 0-99, ``pop`` = 100, separator = 101, pad = 102 (103 ids).
* Identity / Set: values 0-99, separator = 100, pad = 101 (102 ids).

Every generator is a pure function of its parameters and a
``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import IO, Iterable, Sequence

import numpy as np

N_VALUES = 100

STACK_POP = 100
STACK_SEP = 101
STACK_PAD = 102
STACK_VOCAB = 103

SEQ_SEP = 100
SEQ_PAD = 101
SEQ_VOCAB = 102


def stream_rng(seed: int, stream: int | str = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``."""
    if isinstance(stream, str):
        stream = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


@dataclass(frozen=True)
class Episode:
    """Input tokens followed by target tokens.

    ``loss_mask`` is aligned with :attr:`tokens` (input + target) and marks
    the positions whose token the model is trained to predict.
    """

    input_tokens: np.ndarray
    target_tokens: np.ndarray
    loss_mask: np.ndarray

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([self.input_tokens, self.target_tokens])

    @classmethod
    def seq2seq(cls, inp: Sequence[int], target: Sequence[int]) -> "Episode":
        inp = np.asarray(inp, dtype=np.int64)
        target = np.asarray(target, dtype=np.int64)
        mask = np.zeros(len(inp) + len(target), dtype=bool)
        mask[len(inp):] = True
        return cls(inp, target, mask)

    @classmethod
    def next_token(cls, seq: Sequence[int]) -> "Episode":
        """Full-sequence language modelling: every token but the first is predicted."""
        seq = np.asarray(seq, dtype=np.int64)
        mask = np.ones(len(seq), dtype=bool)
        mask[0] = False
        return cls(seq, np.zeros(0, dtype=np.int64), mask)


# ---------------------------------------------------------------------------
# Dyck languages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DyckParams:
    k: int = 4
    seq_len: int = 128
    p_open: float = 0.49

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.seq_len < 2 or self.seq_len % 2:
            raise ValueError("seq_len must be even and >= 2")
        if not 0.0 < self.p_open < 1.0:
            raise ValueError("p_open must lie in (0, 1)")

    @property
    def vocab_size(self) -> int:
        return 2 * self.k


def gen_dyck_batch(params: DyckParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` balanced k-Dyck words of length ``params.seq_len`` as ``[n, L]`` ids."""
    L, k = params.seq_len, params.k
    out = np.empty((n, L), dtype=np.int64)
    stack = np.zeros((n, L), dtype=np.int64)
    depth = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    for t in range(L):
        remaining = L - t
        coin = rng.random(n) < params.p_open
        kinds = rng.integers(0, k, size=n)
        # forced open on an empty stack, forced close once the tail is needed to balance
        is_open = np.where(depth == 0, True, np.where(depth >= remaining, False, coin))
        top = stack[rows, np.maximum(depth - 1, 0)]
        out[:, t] = np.where(is_open, kinds, k + top)
        stack[rows[is_open], depth[is_open]] = kinds[is_open]
        depth += np.where(is_open, 1, -1)
    return out


def gen_dyck(params: DyckParams, rng: np.random.Generator) -> np.ndarray:
    return gen_dyck_batch(params, 1, rng)[0]


def gen_dyck_shuffle_batch(
    params: DyckParams, n: int, rng: np.random.Generator, truncate: bool = True
) -> list[np.ndarray] | np.ndarray:
    """k-Dyck shuffle words: closers may cross.

    A close picks uniformly among the currently open bracket instances. With
    ``truncate`` the words are cut at ``seq_len`` and may leave brackets open;
    otherwise the remaining open brackets are closed in random order, giving
    variable-length balanced words (returned as a list).
    """
    L, k = params.seq_len, params.k
    out = np.empty((n, L), dtype=np.int64)
    counts = np.zeros((n, k), dtype=np.int64)
    for t in range(L):
        total = counts.sum(axis=1)
        is_open = (rng.random(n) < params.p_open) | (total == 0)
        kinds = rng.integers(0, k, size=n)
        # choose a uniformly random open instance: inverse-CDF over type counts
        u = (rng.random(n) * np.maximum(total, 1)).astype(np.int64)
        close_kind = (np.cumsum(counts, axis=1) <= u[:, None]).sum(axis=1)
        close_kind = np.minimum(close_kind, k - 1)
        tok = np.where(is_open, kinds, k + close_kind)
        out[:, t] = tok
        counts[np.arange(n), np.where(is_open, kinds, close_kind)] += np.where(is_open, 1, -1)
    if truncate:
        return out
    words = []
    for row, c in zip(out, counts):
        pending = np.repeat(np.arange(k), c)
        rng.shuffle(pending)
        words.append(np.concatenate([row, k + pending]))
    return words


def gen_dyck_shuffle(params: DyckParams, rng: np.random.Generator, truncate: bool = True) -> np.ndarray:
    res = gen_dyck_shuffle_batch(params, 1, rng, truncate=truncate)
    return res[0]


def _check_brackets(seq: Sequence[int], k: int) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size and (seq.min() < 0 or seq.max() >= 2 * k):
        raise ValueError(f"token outside the {2 * k}-bracket vocabulary")
    return seq


def is_valid_dyck(seq: Sequence[int], k: int) -> bool:
    stack: list[int] = []
    for tok in _check_brackets(seq, k).tolist():
        if tok < k:
            stack.append(tok)
        elif not stack or stack.pop() != tok - k:
            return False
    return not stack


def is_valid_shuffle(seq: Sequence[int], k: int) -> bool:
    balance = [0] * k
    for tok in _check_brackets(seq, k).tolist():
        if tok < k:
            balance[tok] += 1
        else:
            balance[tok - k] -= 1
            if balance[tok - k] < 0:
                return False
    return not any(balance)


# ---------------------------------------------------------------------------
# Stack / Identity / Set
# ---------------------------------------------------------------------------


def gen_stack_episode(op_len: int, rng: np.random.Generator) -> Episode:
    """Push/pop program followed by the final stack contents, top first.

    Pushes dominate (75%) in the first ``floor(2*op_len/3)`` operations and pops
    dominate afterwards. A pop on an empty stack becomes a push; pushed values
    are never already on the stack.
    """
    if op_len < 2:
        raise ValueError("op_len must be >= 2")
    if op_len > N_VALUES:
        raise ValueError(f"op_len {op_len} exceeds the {N_VALUES} unique pushable tokens")
    boundary = (2 * op_len) // 3
    coins = rng.random(op_len)
    stack: list[int] = []
    ops: list[int] = []
    for i in range(op_len):
        p_push = 0.75 if i < boundary else 0.25
        if coins[i] < p_push or not stack:
            while True:
                v = int(rng.integers(N_VALUES))
                if v not in stack:
                    break
            stack.append(v)
            ops.append(v)
        else:
            stack.pop()
            ops.append(STACK_POP)
    return Episode.seq2seq(ops + [STACK_SEP], stack[::-1])


def gen_identity_episode(length: int, rng: np.random.Generator) -> Episode:
    if length < 1:
        raise ValueError("length must be >= 1")
    x = rng.integers(0, N_VALUES, size=length)
    return Episode.seq2seq(np.append(x, SEQ_SEP), x)


def dedup_first_occurrence(xs: Iterable[int]) -> list[int]:
    return list(dict.fromkeys(int(x) for x in xs))


def gen_set_episode(length: int, rng: np.random.Generator) -> Episode:
    if length < 1:
        raise ValueError("length must be >= 1")
    x = rng.integers(0, N_VALUES, size=length)
    return Episode.seq2seq(np.append(x, SEQ_SEP), dedup_first_occurrence(x))


# ---------------------------------------------------------------------------
# Curriculum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurriculumState:
    current_len: int
    min_len: int
    max_len: int
    step: int = 2
    advance_threshold: float = 0.99
    checks_without_improvement: int = 0
    patience: int = 100
    completed: bool = False

    def __post_init__(self):
        if not self.min_len <= self.current_len <= self.max_len:
            raise ValueError("need min_len <= current_len <= max_len")

    @classmethod
    def start(cls, min_len: int, max_len: int, **kw) -> "CurriculumState":
        return cls(current_len=min_len, min_len=min_len, max_len=max_len, **kw)

    @property
    def should_stop(self) -> bool:
        return self.completed or self.checks_without_improvement >= self.patience


def curriculum_advance(state: CurriculumState, val_accuracy: float) -> CurriculumState:
    """Lengthen episodes by ``step`` once validation accuracy reaches the threshold.

    Reaching the threshold at ``max_len`` marks the curriculum completed.
    Every check that does not advance counts towards the patience limit.
    """
    if not 0.0 <= val_accuracy <= 1.0:
        raise ValueError("accuracy must be within [0, 1]")
    if val_accuracy >= state.advance_threshold:
        if state.current_len < state.max_len:
            return replace(
                state,
                current_len=min(state.current_len + state.step, state.max_len),
                checks_without_improvement=0,
            )
        return replace(state, completed=True,
                       checks_without_improvement=state.checks_without_improvement + 1)
    return replace(state, checks_without_improvement=state.checks_without_improvement + 1)


# ---------------------------------------------------------------------------
# Elementary cellular automata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EcaParams:
    rule: int = 110
    width: int = 100
    steps: int = 60
    boundary: str = "periodic"

    def __post_init__(self):
        if not 0 <= self.rule < 256:
            raise ValueError("rule must lie in [0, 256)")
        if self.width < 3:
            raise ValueError("width must be >= 3")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.boundary != "periodic":
            raise ValueError("only periodic boundaries are supported")


def eca_step(state: np.ndarray, rule: int = 110, boundary: str = "periodic") -> np.ndarray:
    """One synchronous update of an elementary CA (works on ``[..., W]``)."""
    if not 0 <= rule < 256:
        raise ValueError("rule must lie in [0, 256)")
    if boundary != "periodic":
        raise ValueError("only periodic boundaries are supported")
    s = np.asarray(state, dtype=np.int8)
    if s.shape[-1] < 3:
        raise ValueError("width must be >= 3")
    idx = 4 * np.roll(s, 1, axis=-1) + 2 * s + np.roll(s, -1, axis=-1)
    table = np.array([(rule >> n) & 1 for n in range(8)], dtype=np.int8)
    return table[idx]


def gen_eca_trace(params: EcaParams, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """``[steps, width]`` trace from a Bernoulli(0.5) start (``[n, steps, width]`` if ``n``)."""
    shape = (1 if n is None else n, params.width)
    rows = np.empty((shape[0], params.steps, params.width), dtype=np.int8)
    rows[:, 0] = rng.integers(0, 2, size=shape, dtype=np.int8)
    for t in range(1, params.steps):
        rows[:, t] = eca_step(rows[:, t - 1], params.rule, params.boundary)
    return rows[0] if n is None else rows


# ---------------------------------------------------------------------------
# corpus dumps
# ---------------------------------------------------------------------------


def dump_episodes(episodes: Iterable[Episode], fh: IO[str]) -> None:
    """One episode per line as space-separated ids (separator included)."""
    for ep in episodes:
        fh.write(" ".join(str(int(t)) for t in ep.tokens) + "\n")


def load_episodes(fh: IO[str], separator: int) -> list[Episode]:
    """Inverse of :func:`dump_episodes` for separator-style tasks."""
    episodes = []
    for line in fh:
        ids = [int(t) for t in line.split()]
        if not ids:
            continue
        cut = ids.index(separator) + 1
        episodes.append(Episode.seq2seq(ids[:cut], ids[cut:]))
    return episodes


def dump_eca(rows: np.ndarray, fh: IO[str]) -> None:
    for row in np.asarray(rows):
        fh.write("".join("1" if b else "0" for b in row) + "\n")


def load_eca(fh: IO[str]) -> np.ndarray:
    lines = [ln.strip() for ln in fh if ln.strip()]
    if any(set(ln) - {"0", "1"} for ln in lines):
        raise ValueError("ECA dump rows may contain only '0' and '1'")
    return np.array([[c == "1" for c in ln] for ln in lines], dtype=np.int8)
