"""Pretraining / fine-tuning loops, evaluation and result aggregation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .diagnostics import token_accuracy
from .model import Checkpoint, ModelConfig, forward, init_random, predict_binary
from .procgen import CurriculumState, curriculum_advance, stream_rng
from .tasks import Batch, Task, get_task

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite; ``record`` holds the partial run."""

    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


class IncompatibleInitError(ValueError):
    pass


def stable_digest(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    learning_rate: float
    max_steps: int
    weight_decay: float = 0.0
    warmup_steps: int = 0
    warmup_fraction: float = 0.0
    lr_schedule: str = "constant_after_warmup"
    grad_clip: float | None = None
    eval_interval: int = 500
    eval_episodes: int = 512
    early_stop_patience: int | None = None
    curriculum_cap: int | None = None
    # draw each training episode's length from the curriculum lengths reached so far
    curriculum_mix: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid training config: {self}")
        if self.lr_schedule not in ("constant_after_warmup", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def warmup(self) -> int:
        return max(self.warmup_steps, int(round(self.warmup_fraction * self.max_steps)))

    def lr_at(self, step: int) -> float:
        """Linear warmup, then constant or cosine decay to zero."""
        w = self.warmup
        if step < w:
            return self.learning_rate * (step + 1) / w
        if self.lr_schedule == "cosine":
            span = max(self.max_steps - w, 1)
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * min(step - w, span) / span))
        return self.learning_rate

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def digest(self) -> str:
        return stable_digest(self.to_dict())


PRESETS: dict[str, TrainConfig] = {
    # procedural pretraining
    "pretrain-dyck": TrainConfig(256, 1e-4, 1_000_000, weight_decay=0.01, warmup_steps=100_000),
    "pretrain-stack": TrainConfig(256, 5e-4, 1_000_000, weight_decay=0.01, warmup_steps=1_000,
                                  early_stop_patience=100),
    "pretrain-eca": TrainConfig(64, 2e-6, 10_000, weight_decay=0.01, warmup_fraction=0.1,
                                lr_schedule="cosine", grad_clip=1.0),
    # downstream
    "ft-algorithmic": TrainConfig(1000, 1e-3, 10_000, weight_decay=1e-3),
    "ft-multiplication": TrainConfig(64, 1e-3, 156_250, weight_decay=1e-3, warmup_steps=500),
    "ft-lm": TrainConfig(64, 2e-3, 18_750, warmup_fraction=0.1, lr_schedule="cosine"),
    # desk scale: same recipes with budgets a single CPU finishes in minutes
    "desk-pretrain-dyck": TrainConfig(32, 1e-3, 6_000, weight_decay=0.01, warmup_steps=300,
                                      eval_interval=500, eval_episodes=64),
    "desk-pretrain-stack": TrainConfig(64, 2e-3, 20_000, weight_decay=0.01, warmup_steps=300,
                                       eval_interval=100, eval_episodes=256,
                                       early_stop_patience=100, curriculum_cap=12,
                                       curriculum_mix=True),
    "desk-pretrain-eca": TrainConfig(16, 1e-3, 2_000, weight_decay=0.01, warmup_fraction=0.1,
                                     lr_schedule="cosine", grad_clip=1.0,
                                     eval_interval=500, eval_episodes=32),
    "desk-ft-algorithmic": TrainConfig(128, 1e-3, 2_000, weight_decay=1e-3,
                                       eval_interval=500, eval_episodes=1000),
    "desk-ft-lm": TrainConfig(64, 2e-3, 200, warmup_fraction=0.1, lr_schedule="cosine",
                              eval_interval=100, eval_episodes=256),
}

# pretraining task -> preset family
PRETRAIN_PRESET = {
    "dyck": "pretrain-dyck", "dyck_shuffle": "pretrain-dyck", "stack": "pretrain-stack",
    "identity": "pretrain-stack", "set": "pretrain-stack", "eca": "pretrain-eca",
}


def get_preset(name: str, scale: str = "paper") -> TrainConfig:
    key = name if scale == "paper" or name.startswith("desk-") else f"desk-{name}"
    try:
        return PRESETS[key]
    except KeyError:
        raise KeyError(f"unknown preset {key!r}; known: {sorted(PRESETS)}") from None


@dataclass
class RunRecord:
    run_id: str
    label: str
    task: str
    seed: int
    model_digest: str
    init_digest: str = ""
    plan_digest: str = ""
    train_digest: str = ""
    evals: list[tuple[int, float, float]] = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_time: float = 0.0
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["evals"] = [list(e) for e in self.evals]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        d = json.loads(line)
        d["evals"] = [tuple(e) for e in d.get("evals", [])]
        return cls(**d)

    @property
    def config_key(self) -> tuple[str, str]:
        return (self.label, self.task)


def _batch_loss(cfg: ModelConfig, params, batch: Batch, task: Task):
    if task.kind == "binary":
        rows = batch.tokens.astype(np.float32)
        logits = forward(cfg, params, rows[:, :-1])
        return tc.bce_with_logits(logits, rows[:, 1:]), logits
    x, y, sel = batch.model_io()
    logits = forward(cfg, params, x, select=sel)
    return tc.cross_entropy_masked(logits, y[sel]), logits


def batch_accuracy(cfg: ModelConfig, weights, batch: Batch, task: Task, chunk: int = 256) -> float:
    """Teacher-forced accuracy on one batch (cell accuracy for binary tasks)."""
    hits = total = 0
    with tc.no_grad():
        for s in range(0, batch.size, chunk):
            sub = Batch(batch.tokens[s:s + chunk], batch.mask[s:s + chunk])
            if task.kind == "binary":
                rows = sub.tokens
                pred = predict_binary(forward(cfg, weights, rows[:, :-1].astype(np.float32)))
                hits += int((pred == rows[:, 1:]).sum())
                total += pred.size
                continue
            x, y, sel = sub.model_io()
            if not sel.any():
                continue
            logits = forward(cfg, weights, x, select=sel)
            n = int(sel.sum())
            hits += int(round(token_accuracy(logits, y[sel]) * n))
            total += n
    if total == 0:
        raise ValueError("evaluation batch has no supervised positions")
    return hits / total


def greedy_accuracy(cfg: ModelConfig, weights, batch: Batch) -> float:
    """Token accuracy when answer tokens are decoded autoregressively.

    Each supervised position is filled with the model's own argmax before
    later positions are predicted.
    """
    tokens = batch.tokens.copy()
    mask = batch.mask
    with tc.no_grad():
        for t in np.flatnonzero(mask.any(axis=0)):
            rows = np.flatnonzero(mask[:, t])
            logits = forward(cfg, weights, tokens[rows, :t])
            tokens[rows, t] = logits.data[:, -1].argmax(axis=-1)
    return float((tokens[mask] == batch.tokens[mask]).mean())


def evaluate(ckpt: Checkpoint, task: Task | str, n_episodes: int, seed: int,
             length: int | None = None, greedy: bool = False) -> float:
    """Accuracy on ``n_episodes`` freshly generated episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    task = get_task(task) if isinstance(task, str) else task
    if length is None and task.curriculum:
        length = task.curriculum[1]
    batch = task.sample(n_episodes, stream_rng(seed, "eval"), length)
    if greedy and task.kind == "token":
        return greedy_accuracy(ckpt.config, ckpt, batch)
    return batch_accuracy(ckpt.config, ckpt, batch, task)


def check_compatible(ckpt: Checkpoint, task: Task) -> None:
    cfg = ckpt.config
    if task.kind == "binary":
        ok = cfg.input_mode == "binary_vector" and cfg.binary_width == task.meta["width"]
    else:
        ok = cfg.input_mode == "token" and cfg.vocab_size == task.vocab_size
    if not ok:
        raise IncompatibleInitError(
            f"checkpoint ({cfg.input_mode}, vocab={cfg.vocab_size}, width={cfg.binary_width}) "
            f"does not fit task {task.name!r} (vocab={task.vocab_size})")
    if cfg.context_length < task.max_len - 1:
        raise IncompatibleInitError(
            f"context length {cfg.context_length} too short for task {task.name!r} ({task.max_len - 1})")


def train(
    init: Checkpoint,
    task: Task,
    cfg: TrainConfig,
    seed: int,
    label: str = "",
    plan_digest: str = "",
    log_every: int = 0,
) -> tuple[Checkpoint, RunRecord]:
    """Train a copy of ``init`` on ``task``; the input checkpoint is not modified."""
    from .store import digest as ckpt_digest

    check_compatible(init, task)
    mcfg = init.config
    params = init.params()
    plist = list(params.values())
    opt = tc.AdamWState()
    data_rng = stream_rng(seed, "train")
    eval_rng = stream_rng(seed, "eval")

    curriculum = None
    if task.curriculum:
        lo, hi = task.curriculum
        hi = min(hi, cfg.curriculum_cap or hi)
        curriculum = CurriculumState.start(lo, hi, patience=cfg.early_stop_patience or 10**9)

    record = RunRecord(
        run_id="", label=label or task.name, task=task.name, seed=int(seed),
        model_digest=stable_digest(mcfg.to_dict()), init_digest=ckpt_digest(init),
        plan_digest=plan_digest, train_digest=cfg.digest(),
    )
    record.run_id = stable_digest([record.label, record.task, seed, record.init_digest,
                                   record.train_digest, plan_digest])
    start = time.perf_counter()
    best, stale = -1.0, 0
    running = []
    step = 0
    for step in range(cfg.max_steps):
        length = curriculum.current_len if curriculum else None
        if curriculum and cfg.curriculum_mix:
            length = data_rng.choice(np.arange(curriculum.min_len, length + 1, curriculum.step),
                                     size=cfg.batch_size)
        batch = task.sample(cfg.batch_size, data_rng, length)
        if task.kind == "token" and not batch.mask[:, 1:].any():
            continue
        for p in plist:
            p.grad = None
        loss, _ = _batch_loss(mcfg, params, batch, task)
        lv = loss.item()
        if not math.isfinite(lv):
            record.status = "diverged"
            record.wall_time = time.perf_counter() - start
            raise DivergenceError(f"non-finite loss at step {step}", record)
        loss.backward()
        if cfg.grad_clip:
            tc.clip_grad_norm(plist, cfg.grad_clip)
        tc.adamw_step(plist, opt, cfg.lr_at(step), weight_decay=cfg.weight_decay)
        running.append(lv)
        if log_every and step % log_every == 0:
            log.info("%s step %d loss %.4f", record.label, step, lv)

        last = step == cfg.max_steps - 1
        if (step + 1) % cfg.eval_interval == 0 or last:
            length = curriculum.current_len if curriculum else None
            val = task.sample(cfg.eval_episodes, eval_rng, length)
            acc = batch_accuracy(mcfg, params, val, task)
            record.evals.append((step + 1, float(np.mean(running)), acc))
            running = []
            if curriculum:
                curriculum = curriculum_advance(curriculum, acc)
                if curriculum.should_stop:
                    break
            elif cfg.early_stop_patience:
                if acc > best:
                    best, stale = acc, 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        break

    record.final_accuracy = record.evals[-1][2] if record.evals else float("nan")
    record.wall_time = time.perf_counter() - start
    record.extra["steps"] = step + 1
    if curriculum:
        record.extra["curriculum_len"] = curriculum.current_len
        record.extra["curriculum_completed"] = curriculum.completed
    provenance = {"task": task.name, "seed": int(seed), "step": step + 1, "label": record.label,
                  "parent": record.init_digest}
    return Checkpoint.from_params(mcfg, params, provenance), record


def pretrain(task: str | Task, model_cfg: ModelConfig | None, train_cfg: TrainConfig, seed: int,
             label: str | None = None) -> tuple[Checkpoint, RunRecord]:
    """Pretrain a freshly initialised model on a procedural task."""
    task = get_task(task) if isinstance(task, str) else task
    model_cfg = model_cfg or task.model_config()
    init = init_random(model_cfg, seed)
    return train(init, task, train_cfg, seed, label=label or f"pretrain/{task.name}")


def finetune(init: Checkpoint, task: str | Task, train_cfg: TrainConfig, seed: int,
             label: str = "", plan_digest: str = "", return_checkpoint: bool = False):
    """Fine-tune every parameter of (a copy of) ``init`` on a diagnostic task."""
    task = get_task(task) if isinstance(task, str) else task
    ckpt, record = train(init, task, train_cfg, seed, label=label, plan_digest=plan_digest)
    return (ckpt, record) if return_checkpoint else record


def aggregate(records: list[RunRecord]) -> tuple[float, float]:
    """Mean and sample standard deviation of final accuracy for one configuration."""
    if not records:
        raise ValueError("aggregate needs at least one record")
    keys = {r.config_key for r in records}
    if len(keys) > 1:
        raise ValueError(f"records mix configurations: {sorted(keys)}")
    accs = np.array([r.final_accuracy for r in records], dtype=np.float64)
    std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
    return float(accs.mean()), std
