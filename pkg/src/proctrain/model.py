"""GPT-2 style decoder with canonically named, partitionable parameters.

Parameters live in a flat ``name -> float32 array`` map so that checkpoint
surgery can address them by name. Names belong to one of three groups:

* ``E``: token/positional embeddings, unembedding, final layer norm
  (or the binary input/output projections in ``binary_vector`` mode)
* ``A``: per layer ``ln1`` and the attention projections
* ``F``: per layer ``ln2`` and the MLP
"""
from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field
from typing import Literal, Mapping

import numpy as np

from . import tensor as tc
from .tensor import Tensor

INIT_STD = 0.02
LN_EPS = 1e-5
GROUPS = ("E", "A", "F")


class ContextOverflowError(ValueError):
    pass


class UnknownTensorError(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 16
    context_length: int = 64
    vocab_size: int = 102
    input_mode: Literal["token", "binary_vector"] = "token"
    binary_width: int = 0
    d_ff: int | None = None

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.n_layers < 0 or self.n_heads < 1 or self.d_model < 1 or self.context_length < 1:
            raise ValueError(f"invalid model dimensions: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.input_mode == "token" and self.vocab_size < 2:
            raise ValueError("token mode needs vocab_size >= 2")
        if self.input_mode == "binary_vector" and self.binary_width < 1:
            raise ValueError("binary_vector mode needs binary_width >= 1")
        if self.input_mode not in ("token", "binary_vector"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def out_width(self) -> int:
        return self.binary_width if self.input_mode == "binary_vector" else self.vocab_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **changes})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names in a fixed order, with shapes."""
    d, c = cfg.d_model, cfg.context_length
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.input_mode == "token":
        shapes["embed.tok"] = (cfg.vocab_size, d)
    else:
        shapes["proj.in.w"] = (cfg.binary_width, d)
        shapes["proj.in.b"] = (d,)
    shapes["embed.pos"] = (c, d)
    for i in range(cfg.n_layers):
        p = f"layer.{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        for w in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{w}"] = (d, d)
            shapes[f"{p}.attn.b{w}"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, cfg.d_ff)
        shapes[f"{p}.mlp.b1"] = (cfg.d_ff,)
        shapes[f"{p}.mlp.w2"] = (cfg.d_ff, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    if cfg.input_mode == "token":
        shapes["unembed.w"] = (d, cfg.vocab_size)
        shapes["unembed.b"] = (cfg.vocab_size,)
    else:
        shapes["proj.out.w"] = (d, cfg.binary_width)
        shapes["proj.out.b"] = (cfg.binary_width,)
    return shapes


_LAYER_RE = re.compile(r"^layer\.\d+\.(ln1\.[gb]|attn\.[wb][qkvo]|ln2\.[gb]|mlp\.[wb][12])$")
_E_NAMES = {
    "embed.tok", "embed.pos", "unembed.w", "unembed.b", "final_ln.g", "final_ln.b",
    "proj.in.w", "proj.in.b", "proj.out.w", "proj.out.b",
}


def group_of(name: str) -> str:
    """Component group (``"E"``, ``"A"`` or ``"F"``) of a canonical tensor name."""
    if name in _E_NAMES:
        return "E"
    m = _LAYER_RE.match(name)
    if not m:
        raise UnknownTensorError(name)
    part = m.group(1)
    return "A" if part.startswith(("ln1", "attn")) else "F"


def _is_gain(name: str) -> bool:
    return name.endswith((".g",)) and ("ln" in name)


def _is_bias(name: str) -> bool:
    return name.endswith((".b", ".b1", ".b2")) or bool(re.search(r"\.b[qkvo]$", name))


@dataclass
class Checkpoint:
    """Model config plus named float32 tensors.

    ``provenance`` is free-form metadata (task, seed, step, transfer plan);
    it never affects the checkpoint's identity digest.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"tensor names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
            if arr.dtype != np.float32:
                self.tensors[name] = arr.astype(np.float32)
        # keep canonical order
        self.tensors = {name: self.tensors[name] for name in expected}

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            copy.deepcopy(self.provenance),
        )

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.tensors if group is None or group_of(n) == group]

    def params(self) -> dict[str, Tensor]:
        """Fresh trainable tensors holding copies of the weights."""
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.tensors.items()}

    @classmethod
    def from_params(cls, config: ModelConfig, params: Mapping[str, Tensor], provenance=None):
        return cls(config, {k: p.data.copy() for k, p in params.items()}, dict(provenance or {}))


def init_random(config: ModelConfig, seed: int) -> Checkpoint:
    """GPT-2 init: N(0, 0.02^2) weights, unit LN gains, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if _is_gain(name):
            tensors[name] = np.ones(shape, np.float32)
        elif _is_bias(name):
            tensors[name] = np.zeros(shape, np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
    return Checkpoint(config, tensors, {"init": "random", "seed": int(seed)})


def count_params(config: ModelConfig) -> int:
    return int(sum(np.prod(s, dtype=np.int64) for s in param_shapes(config).values()))


def _as_tensors(weights) -> Mapping[str, Tensor]:
    if isinstance(weights, Checkpoint):
        return {k: Tensor(v) for k, v in weights.tensors.items()}
    return weights


def forward(
    config: ModelConfig,
    weights,
    inputs: np.ndarray,
    select: np.ndarray | None = None,
) -> Tensor:
    """Causal decoder forward pass.

    ``inputs`` is ``[T]`` / ``[B, T]`` token ids, or ``[T, W]`` / ``[B, T, W]``
    binary rows in ``binary_vector`` mode. ``weights`` is a :class:`Checkpoint`
    or a ``name -> Tensor`` map (for training).

    Returns logits ``[B, T, V]`` (batch axis dropped for unbatched input).
    With a boolean ``select`` mask over ``[B, T]``, only the chosen positions
    are unembedded and the result is ``[N, V]``; this keeps sparse-loss tasks
    cheap.
    """
    p = _as_tensors(weights)
    binary = config.input_mode == "binary_vector"
    x = np.asarray(inputs)
    unbatched = x.ndim == (2 if binary else 1)
    if unbatched:
        x = x[None]
    B, T = x.shape[:2]
    if T > config.context_length:
        raise ContextOverflowError(f"sequence length {T} exceeds context length {config.context_length}")

    if binary:
        h = tc.linear(Tensor(x.astype(np.float32)), p["proj.in.w"], p["proj.in.b"])
    else:
        if x.min() < 0 or x.max() >= config.vocab_size:
            raise IndexError(f"token id out of range [0, {config.vocab_size})")
        h = tc.take_rows(p["embed.tok"], x)
    h = h + tc.take_rows(p["embed.pos"], np.arange(T))

    if select is not None:
        select = np.asarray(select, dtype=bool)
        if unbatched and select.ndim == 1:
            select = select[None]
        if select.shape != (B, T):
            raise ValueError(f"select mask shape {select.shape} != {(B, T)}")
        # queries before the first selected position cannot reach the output
        cols = np.flatnonzero(select.any(axis=0))
        start = int(cols[0]) if cols.size else T
    else:
        start = 0

    H, dh = config.n_heads, config.d_head
    scale = Tensor(np.float32(1.0 / np.sqrt(dh)))
    for i in range(config.n_layers):
        pre = f"layer.{i}"
        last = i == config.n_layers - 1
        a = tc.layer_norm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], LN_EPS)
        k = tc.linear(a, p[f"{pre}.attn.wk"], p[f"{pre}.attn.bk"])
        v = tc.linear(a, p[f"{pre}.attn.wv"], p[f"{pre}.attn.bv"])
        if last and start > 0:
            h = tc.slice_from(h, start)
            a = tc.slice_from(a, start)
        tq = h.shape[1]
        q = tc.linear(a, p[f"{pre}.attn.wq"], p[f"{pre}.attn.bq"])
        q = tc.transpose(tc.reshape(q * scale, (B, tq, H, dh)), (0, 2, 1, 3))
        k = tc.transpose(tc.reshape(k, (B, T, H, dh)), (0, 2, 3, 1))
        v = tc.transpose(tc.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
        att = tc.softmax_rows(tc.matmul(q, k), causal=True)
        o = tc.reshape(tc.transpose(tc.matmul(att, v), (0, 2, 1, 3)), (B, tq, config.d_model))
        h = h + tc.linear(o, p[f"{pre}.attn.wo"], p[f"{pre}.attn.bo"])
        m = tc.layer_norm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], LN_EPS)
        m = tc.gelu(tc.linear(m, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"]))
        h = h + tc.linear(m, p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"])
    if config.n_layers == 0 and start > 0:
        h = tc.slice_from(h, start)
    h = tc.layer_norm(h, p["final_ln.g"], p["final_ln.b"], LN_EPS)

    if select is not None:
        h = tc.select_positions(h, select[:, start:])
    out_w, out_b = ("proj.out.w", "proj.out.b") if binary else ("unembed.w", "unembed.b")
    logits = tc.linear(h, p[out_w], p[out_b])
    if unbatched and select is None:
        logits = tc.reshape(logits, logits.shape[1:])
    return logits


def predict_binary(logits) -> np.ndarray:
    """Threshold sigmoid(logit) at 0.5; a logit of exactly 0 maps to 1."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z >= 0).astype(np.int8)
