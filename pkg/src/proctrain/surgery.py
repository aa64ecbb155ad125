"""Checkpoint surgery: selective transfer, composition, resets and perturbations.

A :class:`TransferPlan` says, for each component group (E, A, F), whether its
weights come from a named donor checkpoint or from a fresh initialisation.
:func:`build_init` assembles the resulting checkpoint for a target
architecture and records the full plan in its provenance.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .model import GROUPS, Checkpoint, ModelConfig, group_of, init_random
from .procgen import EcaParams, gen_eca_trace, stream_rng
from .store import digest as ckpt_digest

__all__ = [
    "group_of", "TransferPlan", "PerturbationSpec", "TransferError", "build_init",
    "average_embedding_reset", "transfer_positional", "perturb_noise", "perturb_shuffle",
    "relative_improvement", "UndefinedScoreError",
]


class TransferError(ValueError):
    pass


class UndefinedScoreError(ZeroDivisionError):
    pass


FRESH = "fresh"
EMBEDDING_POLICIES = ("copy", "average_reset", "fresh")
POSITIONAL_POLICIES = ("copy_if_context_sufficient", "fresh")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str  # "gaussian_noise" | "per_tensor_shuffle" | "per_layer_shuffle"
    sigma: float = 0.0
    seed: int = 0
    scope: tuple[str, ...] | None = None  # None: the plan's transferred groups

    def __post_init__(self):
        if self.kind not in ("gaussian_noise", "per_tensor_shuffle", "per_layer_shuffle"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.scope is not None:
            object.__setattr__(self, "scope", tuple(self.scope))
            if set(self.scope) - set(GROUPS):
                raise ValueError(f"scope must be a subset of {GROUPS}")


@dataclass(frozen=True)
class TransferPlan:
    """Per-group weight sources; ``"fresh"`` or a donor name."""

    E: str = FRESH
    A: str = FRESH
    F: str = FRESH
    embedding_policy: str = "average_reset"
    positional_policy: str = "copy_if_context_sufficient"
    perturbation: PerturbationSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.embedding_policy not in EMBEDDING_POLICIES:
            raise ValueError(f"unknown embedding policy {self.embedding_policy!r}")
        if self.positional_policy not in POSITIONAL_POLICIES:
            raise ValueError(f"unknown positional policy {self.positional_policy!r}")
        if self.E == FRESH and self.embedding_policy == "average_reset":
            # nothing to average; treat as fresh
            object.__setattr__(self, "embedding_policy", "fresh")

    def source(self, group: str) -> str:
        return getattr(self, group)

    @property
    def transferred_groups(self) -> tuple[str, ...]:
        return tuple(g for g in GROUPS if self.source(g) != FRESH)

    @property
    def donors(self) -> set[str]:
        return {self.source(g) for g in self.transferred_groups}

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.perturbation is not None and self.perturbation.scope is not None:
            d["perturbation"]["scope"] = list(self.perturbation.scope)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransferPlan":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown transfer plan keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("perturbation") is not None:
            p = dict(d["perturbation"])
            bad = set(p) - set(PerturbationSpec.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown perturbation keys: {sorted(bad)}")
            d["perturbation"] = PerturbationSpec(**p)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def digest(self) -> str:
        import hashlib

        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def full(cls, donor: str, **kw) -> "TransferPlan":
        return cls(E=donor, A=donor, F=donor, **kw)

    @classmethod
    def attention_only(cls, donor: str, **kw) -> "TransferPlan":
        return cls(A=donor, **kw)

    @classmethod
    def mlp_only(cls, donor: str, **kw) -> "TransferPlan":
        return cls(F=donor, **kw)


# ---------------------------------------------------------------------------
# embedding handling
# ---------------------------------------------------------------------------


def mean_input_embedding(donor: Checkpoint, n_traces: int = 64, seed: int = 0) -> np.ndarray:
    """Average token-level input vector of a donor.

    Token donors: mean row of ``embed.tok``. Binary donors: mean of the input
    projection applied to rows of freshly generated ECA traces.
    """
    if donor.config.input_mode == "token":
        return donor.tensors["embed.tok"].mean(axis=0, dtype=np.float64).astype(np.float32)
    params = EcaParams(width=donor.config.binary_width)
    rows = gen_eca_trace(params, stream_rng(seed, "eca-average"), n=n_traces)
    proj = rows.reshape(-1, params.width).astype(np.float64) @ donor.tensors["proj.in.w"]
    return (proj.mean(axis=0) + donor.tensors["proj.in.b"]).astype(np.float32)


def _unembed_of(donor: Checkpoint) -> tuple[np.ndarray, np.ndarray]:
    if donor.config.input_mode == "token":
        return donor.tensors["unembed.w"], donor.tensors["unembed.b"]
    return donor.tensors["proj.out.w"], donor.tensors["proj.out.b"]


def average_embedding_reset(donor: Checkpoint, target: ModelConfig) -> dict[str, np.ndarray]:
    """Token embedding / unembedding for ``target`` built from donor averages.

    Every row of ``embed.tok`` is the donor's mean input vector; every column of
    ``unembed.w`` is the donor's mean output column and every ``unembed.b``
    entry the donor's mean output bias. Positional embeddings are untouched.
    """
    if target.input_mode != "token":
        raise TransferError("average embedding reset targets token-mode models")
    if donor.config.d_model != target.d_model:
        raise TransferError(f"embedding width {donor.config.d_model} != {target.d_model}")
    row = mean_input_embedding(donor)
    w_out, b_out = _unembed_of(donor)
    col = w_out.mean(axis=1, dtype=np.float64).astype(np.float32)
    V = target.vocab_size
    return {
        "embed.tok": np.tile(row, (V, 1)),
        "unembed.w": np.tile(col[:, None], (1, V)),
        "unembed.b": np.full(V, b_out.mean(dtype=np.float64), dtype=np.float32),
    }


def transfer_positional(donor_pos: np.ndarray, target_context: int, fresh: np.ndarray) -> np.ndarray:
    """Copy the first ``target_context`` rows if the donor has enough, else ``fresh``."""
    if donor_pos.shape[1] != fresh.shape[1]:
        raise TransferError(f"embed.pos width {donor_pos.shape[1]} != {fresh.shape[1]}")
    if fresh.shape[0] != target_context:
        raise TransferError("fresh positional table does not match target context")
    if donor_pos.shape[0] >= target_context:
        return donor_pos[:target_context].copy()
    return fresh.copy()


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def _copy_group(out: dict, donor: Checkpoint, names: list[str], donor_name: str) -> None:
    for name in names:
        if name not in donor.tensors:
            raise TransferError(f"donor {donor_name!r} has no tensor {name}")
        src = donor.tensors[name]
        if src.shape != out[name].shape:
            raise TransferError(
                f"shape mismatch for {name}: donor {donor_name!r} {src.shape} vs target {out[name].shape}")
        out[name] = src.copy()


def _assemble_embeddings(out: dict, donor: Checkpoint, donor_name: str, plan: TransferPlan,
                         target: ModelConfig) -> None:
    fresh_pos = out["embed.pos"]
    if plan.positional_policy == "copy_if_context_sufficient":
        out["embed.pos"] = transfer_positional(donor.tensors["embed.pos"], target.context_length, fresh_pos)
    _copy_group(out, donor, ["final_ln.g", "final_ln.b"], donor_name)

    if target.input_mode == "binary_vector":
        if plan.embedding_policy == "copy":
            _copy_group(out, donor, ["proj.in.w", "proj.in.b", "proj.out.w", "proj.out.b"], donor_name)
        elif plan.embedding_policy == "average_reset":
            raise TransferError("average reset is not defined for binary-input targets")
        return
    if plan.embedding_policy == "copy":
        if donor.config.input_mode != "token":
            raise TransferError(f"donor {donor_name!r} has no token embedding to copy")
        _copy_group(out, donor, ["embed.tok", "unembed.w", "unembed.b"], donor_name)
    elif plan.embedding_policy == "average_reset":
        out.update(average_embedding_reset(donor, target))


def build_init(plan: TransferPlan, donors: dict[str, Checkpoint], target: ModelConfig) -> Checkpoint:
    """Assemble an initial checkpoint for ``target`` following ``plan``.

    Fresh groups are taken from ``init_random(target, plan.seed)``. The
    perturbation, if any, is applied last and only to its scope (default: the
    groups the plan transfers).
    """
    missing = plan.donors - set(donors)
    if missing:
        raise TransferError(f"missing donor checkpoint(s): {sorted(missing)}")
    fresh = init_random(target, plan.seed)
    out = {k: v.copy() for k, v in fresh.tensors.items()}
    for group in ("A", "F"):
        src = plan.source(group)
        if src != FRESH:
            _copy_group(out, donors[src], fresh.names(group), src)
    if plan.E != FRESH:
        _assemble_embeddings(out, donors[plan.E], plan.E, plan, target)

    ckpt = Checkpoint(target, out, {})
    if plan.perturbation is not None:
        ckpt = apply_perturbation(ckpt, plan.perturbation, plan.transferred_groups)
    ckpt.provenance = {
        "init": "transfer",
        "plan": plan.to_dict(),
        "plan_digest": plan.digest(),
        "donors": {name: ckpt_digest(donors[name]) for name in sorted(plan.donors)},
    }
    return ckpt


def apply_perturbation(ckpt: Checkpoint, spec: PerturbationSpec, default_scope=GROUPS) -> Checkpoint:
    scope = spec.scope if spec.scope is not None else tuple(default_scope)
    if spec.kind == "gaussian_noise":
        return perturb_noise(ckpt, spec.sigma, spec.seed, scope)
    mode = "tensor" if spec.kind == "per_tensor_shuffle" else "layer"
    return perturb_shuffle(ckpt, spec.seed, scope, mode=mode)


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------


def perturb_noise(ckpt: Checkpoint, sigma: float, seed: int, scope=GROUPS) -> Checkpoint:
    """Add iid N(0, sigma^2) noise to every tensor whose group is in ``scope``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = ckpt.copy()
    if sigma == 0:
        return out
    rng = np.random.default_rng(seed)
    for name, arr in out.tensors.items():
        if group_of(name) in scope:
            out.tensors[name] = (arr + rng.normal(0.0, sigma, size=arr.shape)).astype(np.float32)
    return out


def _layer_key(name: str) -> tuple[str, str]:
    parts = name.split(".")
    layer = parts[1] if parts[0] == "layer" else "-"
    return layer, group_of(name)


def perturb_shuffle(ckpt: Checkpoint, seed: int, scope=GROUPS, mode: str = "tensor") -> Checkpoint:
    """Randomly permute weight values, preserving their multiset.

    ``mode="tensor"`` permutes each in-scope tensor on its own. ``mode="layer"``
    pools all in-scope tensors of one (layer, group) block and permutes the
    pool before splitting it back into the original shapes.
    """
    if mode not in ("tensor", "layer"):
        raise ValueError(f"unknown shuffle mode {mode!r}")
    out = ckpt.copy()
    rng = np.random.default_rng(seed)
    names = [n for n in out.tensors if group_of(n) in scope]
    if mode == "tensor":
        for name in names:
            arr = out.tensors[name]
            out.tensors[name] = rng.permutation(arr.reshape(-1)).reshape(arr.shape)
        return out
    blocks: dict[tuple[str, str], list[str]] = {}
    for name in names:
        blocks.setdefault(_layer_key(name), []).append(name)
    for members in blocks.values():
        pool = rng.permutation(np.concatenate([out.tensors[n].reshape(-1) for n in members]))
        cursor = 0
        for n in members:
            shape = out.tensors[n].shape
            size = out.tensors[n].size
            out.tensors[n] = pool[cursor: cursor + size].reshape(shape)
            cursor += size
    return out


def relative_improvement(acc_x: float, acc_rand: float, acc_pre: float) -> float:
    """0 at random-init accuracy, 1 at unperturbed pretrained accuracy."""
    denom = acc_pre - acc_rand
    if denom == 0:
        raise UndefinedScoreError("pretrained and random-init accuracies are equal")
    return (acc_x - acc_rand) / denom
