"""Experiment jobs, the cached runner, and the named replication plans.

A replication is a small DAG: pretraining jobs produce donor checkpoints,
fine-tuning jobs consume them through a :class:`TransferPlan`. Every job has
a content key built from its full description, so re-running a plan only
executes jobs whose outputs are not already in the store.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import store as st
from .model import Checkpoint, ModelConfig, init_random
from .surgery import PerturbationSpec, TransferPlan, build_init
from .tasks import get_task
from .training import (PRETRAIN_PRESET, RunRecord, TrainConfig, finetune, get_preset,
                       pretrain, stable_digest)

log = logging.getLogger(__name__)

ALGORITHMIC_TASKS = ("haystack", "addition", "reversed_addition", "sorting")
SEEDS = {"desk": (0, 1, 2), "paper": tuple(range(10))}
FT_PRESET = "ft-algorithmic"


class ConfigError(ValueError):
    pass


def _family(task: str) -> str:
    return task.partition("-")[0]


@dataclass(frozen=True)
class PretrainJob:
    task: str
    seed: int = 0
    scale: str = "desk"
    overrides: tuple = ()

    @property
    def name(self) -> str:
        return self.task

    def train_config(self) -> TrainConfig:
        cfg = get_preset(PRETRAIN_PRESET[_family(self.task)], self.scale)
        return cfg.replace(**dict(self.overrides)) if self.overrides else cfg

    def key(self) -> str:
        return stable_digest(["pretrain", self.task, self.seed, self.train_config().to_dict()])


@dataclass(frozen=True)
class FinetuneJob:
    """Fine-tune ``task`` from ``plan`` (``None`` means a random init)."""

    label: str
    task: str
    seed: int
    plan: TransferPlan | None = None
    donors: tuple[PretrainJob, ...] = ()
    scale: str = "desk"
    overrides: tuple = ()

    def train_config(self) -> TrainConfig:
        cfg = get_preset(FT_PRESET, self.scale)
        return cfg.replace(**dict(self.overrides)) if self.overrides else cfg

    def key(self) -> str:
        plan = self.plan.to_dict() if self.plan else None
        return stable_digest(["finetune", self.label, self.task, self.seed, plan,
                              [d.key() for d in self.donors], self.train_config().to_dict()])


@dataclass
class Plan:
    """An ordered set of jobs; pretraining jobs come first."""

    name: str
    pretrain: list[PretrainJob] = field(default_factory=list)
    finetune: list[FinetuneJob] = field(default_factory=list)

    def describe(self) -> str:
        lines = [f"plan {self.name}: {len(self.pretrain)} pretraining, {len(self.finetune)} fine-tuning jobs"]
        for j in self.pretrain:
            lines.append(f"  pretrain {j.task} seed={j.seed} [{j.key()}]")
        for j in self.finetune:
            deps = ",".join(d.task for d in j.donors) or "-"
            lines.append(f"  finetune {j.task} {j.label} seed={j.seed} <- {deps} [{j.key()}]")
        return "\n".join(lines)


def embedding_policy(donor_task: str, target_task: str) -> str:
    """Copy embeddings only when the two vocabularies line up token for token."""
    aligned = {frozenset({"identity", "sorting"}), frozenset({"set", "sorting"})}
    fam = {_family(donor_task), _family(target_task)}
    return "copy" if fam in aligned else "average_reset"


def transfer_plan(kind: str, donor: str, target: str, seed: int,
                  perturbation: PerturbationSpec | None = None) -> TransferPlan:
    make = {"full": TransferPlan.full, "attn": TransferPlan.attention_only,
            "mlp": TransferPlan.mlp_only}[kind]
    return make(donor, seed=seed, embedding_policy=embedding_policy(donor, target),
                perturbation=perturbation)


class Runner:
    """Executes jobs against a :class:`~proctrain.store.Store`, skipping cached work."""

    def __init__(self, store: st.Store, threads: int | None = None,
                 on_record: Callable[[RunRecord], None] | None = None):
        self.store = store
        self.threads = threads or int(os.environ.get("PROCTRAIN_THREADS", "1"))
        self.on_record = on_record
        self._records = self._load_records()

    def _load_records(self) -> dict[str, RunRecord]:
        path = self.store.root / "records.ndjson"
        out = {}
        if path.exists():
            for line in path.read_text().splitlines():
                if line.strip():
                    rec = RunRecord.from_json(line)
                    out[rec.extra.get("job_key", rec.run_id)] = rec
        return out

    def records(self) -> list[RunRecord]:
        return list(self._records.values())

    def donor(self, job: PretrainJob) -> Checkpoint:
        ref = f"pretrain/{job.key()}"
        key = self.store.ref(ref)
        if key is not None:
            return self.store.get(key)
        log.info("pretraining %s (seed %d)", job.task, job.seed)
        ckpt, rec = pretrain(job.task, None, job.train_config(), job.seed)
        rec.extra["job_key"] = job.key()
        self.store.set_ref(ref, self.store.put(ckpt))
        self._record(rec)
        return ckpt

    def init_for(self, job: FinetuneJob) -> Checkpoint:
        target = get_task(job.task).model_config()
        if job.plan is None:
            return init_random(target, job.seed)
        donors = {d.name: self.donor(d) for d in job.donors}
        return build_init(job.plan, donors, target)

    def finetune(self, job: FinetuneJob) -> RunRecord:
        key = job.key()
        if key in self._records:
            return self._records[key]
        init = self.init_for(job)
        rec = finetune(init, job.task, job.train_config(), job.seed, label=job.label,
                       plan_digest=job.plan.digest() if job.plan else "")
        rec.extra["job_key"] = key
        self._record(rec)
        return rec

    def _record(self, rec: RunRecord) -> None:
        self.store.append_record(rec.to_json())
        if rec.extra.get("job_key"):
            self._records[rec.extra["job_key"]] = rec
        if self.on_record:
            self.on_record(rec)

    def run(self, plan: Plan) -> list[RunRecord]:
        for job in plan.pretrain:
            self.donor(job)
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(self.finetune, plan.finetune))
        return [self.finetune(j) for j in plan.finetune]


# ---------------------------------------------------------------- named plans

FIG2_DONORS = ("dyck-4", "dyck-16", "dyck_shuffle-8", "stack", "identity", "set", "eca")
COMPONENT_DONORS = {
    "haystack": ("dyck-4", "dyck_shuffle-16", "stack", "identity", "set", "eca"),
    "addition": ("dyck-16", "dyck_shuffle-16", "stack", "identity", "set", "eca"),
    "reversed_addition": ("dyck-16", "dyck_shuffle-8", "stack", "identity", "set", "eca"),
    "sorting": ("dyck-8", "dyck_shuffle-8", "stack", "identity", "set", "eca"),
}
# best single configuration per task, used for the perturbation study
PERTURBATION_BASE = {
    "haystack": ("identity", "attn"),
    "addition": ("dyck-16", "full"),
    "reversed_addition": ("dyck_shuffle-8", "full"),
    "sorting": ("dyck-8", "full"),
}
NOISE_LEVELS = (0.01, 0.05, 0.10)


def _label(donor: str, kind: str, suffix: str = "") -> str:
    return f"{donor}/{kind}" + (f"/{suffix}" if suffix else "")


def _add_random(plan: Plan, tasks: Iterable[str], seeds, scale: str) -> None:
    for task in tasks:
        for s in seeds:
            plan.finetune.append(FinetuneJob("random", task, s, scale=scale))


def _donor_jobs(names: Iterable[str], scale: str) -> dict[str, PretrainJob]:
    return {n: PretrainJob(n, scale=scale) for n in dict.fromkeys(names)}


def plan_fig2(scale: str, seeds=None) -> Plan:
    seeds = seeds or SEEDS[scale]
    donors = _donor_jobs(FIG2_DONORS, scale)
    plan = Plan("fig2", pretrain=list(donors.values()))
    _add_random(plan, ALGORITHMIC_TASKS, seeds, scale)
    for task in ALGORITHMIC_TASKS:
        for name, job in donors.items():
            for s in seeds:
                plan.finetune.append(FinetuneJob(_label(name, "full"), task, s,
                                                 transfer_plan("full", name, task, s), (job,), scale))
    return plan


def plan_components(scale: str, seeds=None, tasks=ALGORITHMIC_TASKS) -> Plan:
    seeds = seeds or SEEDS[scale]
    donors = _donor_jobs([d for t in tasks for d in COMPONENT_DONORS[t]], scale)
    plan = Plan("tables3-6", pretrain=list(donors.values()))
    _add_random(plan, tasks, seeds, scale)
    for task in tasks:
        for name in COMPONENT_DONORS[task]:
            for kind in ("full", "mlp", "attn"):
                for s in seeds:
                    plan.finetune.append(FinetuneJob(
                        _label(name, kind), task, s, transfer_plan(kind, name, task, s),
                        (donors[name],), scale))
    return plan


def perturbation_jobs(task: str, donor: PretrainJob, kind: str, seeds, scale: str,
                      sigmas=NOISE_LEVELS, shuffle: bool = True) -> list[FinetuneJob]:
    specs: list[tuple[str, PerturbationSpec | None]] = [("pretrained", None)]
    if shuffle:
        specs.append(("shuffled", PerturbationSpec("per_tensor_shuffle")))
    specs += [(f"noise{sg:g}", PerturbationSpec("gaussian_noise", sigma=sg)) for sg in sigmas]
    jobs = []
    for tag, spec in specs:
        for s in seeds:
            spec_s = None if spec is None else PerturbationSpec(spec.kind, spec.sigma, seed=s)
            plan = transfer_plan(kind, donor.task, task, s, perturbation=spec_s)
            jobs.append(FinetuneJob(_label(donor.task, kind, tag), task, s, plan, (donor,), scale))
    return jobs


def plan_table7(scale: str, seeds=None, tasks=ALGORITHMIC_TASKS) -> Plan:
    seeds = seeds or SEEDS[scale]
    donors = _donor_jobs([PERTURBATION_BASE[t][0] for t in tasks], scale)
    plan = Plan("table7", pretrain=list(donors.values()))
    _add_random(plan, tasks, seeds, scale)
    for task in tasks:
        name, kind = PERTURBATION_BASE[task]
        plan.finetune += perturbation_jobs(task, donors[name], kind, seeds, scale)
    return plan


def composed_plan(attn_donor: str, mlp_donor: str, seed: int) -> TransferPlan:
    return TransferPlan(E="fresh", A=attn_donor, F=mlp_donor, seed=seed)


def plan_table1(scale: str, seeds=None, tasks=ALGORITHMIC_TASKS) -> Plan:
    seeds = seeds or SEEDS[scale]
    donors = _donor_jobs(["set", "eca"], scale)
    plan = Plan("table1", pretrain=list(donors.values()))
    _add_random(plan, tasks, seeds, scale)
    arms = [("set", "full"), ("set", "attn"), ("eca", "full"), ("eca", "mlp")]
    for task in tasks:
        for s in seeds:
            for name, kind in arms:
                plan.finetune.append(FinetuneJob(_label(name, kind), task, s,
                                                 transfer_plan(kind, name, task, s),
                                                 (donors[name],), scale))
            plan.finetune.append(FinetuneJob("set/attn+eca/mlp", task, s,
                                             composed_plan("set", "eca", s),
                                             (donors["set"], donors["eca"]), scale))
    return plan


REPLICATIONS = {"fig2": plan_fig2, "tables3-6": plan_components,
                "table7": plan_table7, "table1": plan_table1}


def replication_plan(table_id: str, scale: str = "desk", seeds=None) -> Plan:
    if scale not in SEEDS:
        raise ConfigError(f"unknown scale {scale!r}; expected one of {sorted(SEEDS)}")
    try:
        make = REPLICATIONS[table_id]
    except KeyError:
        raise ConfigError(f"unknown result {table_id!r}; expected one of {sorted(REPLICATIONS)}") from None
    return make(scale, seeds)


# ---------------------------------------------------------- experiment files

_CONFIG_KEYS = {"model", "pretrain_task", "transfer_plan", "finetune_task", "train", "seeds", "out",
                "scale"}


@dataclass
class ExperimentConfig:
    """A single pretrain / transfer / fine-tune experiment read from JSON."""

    finetune_task: str | None = None
    pretrain_task: str | None = None
    transfer_plan: dict | None = None
    model: dict | None = None
    train: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    scale: str = "desk"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.model is not None:
            try:
                ModelConfig.from_dict(cfg.model)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid model section: {e}") from None
        if cfg.transfer_plan is not None:
            try:
                TransferPlan.from_dict(cfg.transfer_plan)
            except (TypeError, ValueError, KeyError) as e:
                raise ConfigError(f"invalid transfer_plan section: {e}") from None
        if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        try:
            TrainConfig(**{**get_preset(FT_PRESET, cfg.scale).to_dict(), **cfg.train})
        except TypeError as e:
            raise ConfigError(f"invalid train overrides: {e}") from None
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            data = json.loads(open(path).read())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        return cls.from_dict(data)

    def digest(self) -> str:
        return stable_digest(self.__dict__)
