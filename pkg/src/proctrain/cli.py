"""``proctrain`` command line: pretrain, surgery, fine-tune, evaluate, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import report as rp
from . import store as st
from .experiments import ConfigError, ExperimentConfig, Runner, replication_plan
from .model import Checkpoint, init_random
from .surgery import TransferError, TransferPlan, build_init
from .tasks import UnknownTaskError, get_task
from .training import (PRESETS, DivergenceError, IncompatibleInitError, evaluate, finetune,
                       get_preset, pretrain)

log = logging.getLogger("proctrain")


class UsageError(Exception):
    pass


def _parse_donors(items: list[str] | None) -> dict[str, Checkpoint]:
    donors = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--donor expects NAME=PATH, got {item!r}")
        if not Path(path).exists():
            raise UsageError(f"donor {name!r}: no such checkpoint {path}")
        donors[name] = st.load(path)
    return donors


def _load_plan(path: str) -> TransferPlan:
    try:
        return TransferPlan.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise UsageError(f"plan file not found: {path}") from None
    except (json.JSONDecodeError, TypeError, ValueError, KeyError) as e:
        raise UsageError(f"cannot parse plan {path}: {e}") from None


def _train_overrides(args) -> dict:
    if not getattr(args, "override", None):
        return {}
    try:
        out = json.loads(args.override)
    except json.JSONDecodeError as e:
        raise UsageError(f"--override is not valid JSON: {e}") from None
    if not isinstance(out, dict):
        raise UsageError("--override must be a JSON object")
    return out


def _preset(name: str, scale: str, overrides: dict):
    try:
        cfg = get_preset(name, scale)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    try:
        return cfg.replace(**overrides) if overrides else cfg
    except TypeError as e:
        raise UsageError(f"bad training override: {e}") from None


def _corpus(args) -> str | None:
    return Path(args.corpus).read_text() if getattr(args, "corpus", None) else None


def _task(name: str, args):
    if name == "language_modelling" and not getattr(args, "corpus", None):
        raise UsageError("language_modelling needs --corpus PATH")
    return get_task(name, corpus_text=_corpus(args))


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    store = st.Store(out)
    task = _task(args.task, args)
    cfg = _preset(args.preset, args.scale, _train_overrides(args))
    for seed in args.seeds:
        ckpt, rec = pretrain(task, None, cfg, seed)
        path = st.save(ckpt, out / f"{task.name}-s{seed}{st.SUFFIX}")
        store.append_record(rec.to_json())
        print(f"{path}  acc={rec.final_accuracy:.4f}  steps={rec.extra['steps']}")
    return 0


def cmd_surgery(args) -> int:
    plan = _load_plan(args.plan)
    donors = _parse_donors(args.donor)
    target = _task(args.task, args).model_config()
    init = build_init(plan, donors, target)
    path = st.save(init, args.out)
    print(f"{path}  digest={st.digest(init)}")
    return 0


def cmd_finetune(args) -> int:
    if args.config:
        exp = ExperimentConfig.load(args.config)
        task_name, seeds, out = exp.finetune_task, exp.seeds, Path(exp.out)
        overrides, scale = exp.train, exp.scale
        plan = TransferPlan.from_dict(exp.transfer_plan) if exp.transfer_plan else None
        if not task_name:
            raise UsageError(f"{args.config}: finetune_task is required")
    else:
        if not args.task:
            raise UsageError("finetune needs --task or --config")
        task_name, seeds, out = args.task, args.seeds, Path(args.out)
        overrides, scale = _train_overrides(args), args.scale
        plan = _load_plan(args.plan) if args.plan else None
    task = _task(task_name, args)
    cfg = _preset(args.preset, scale, overrides)
    donors = _parse_donors(args.donor)
    store = st.Store(out)
    for seed in seeds:
        if args.init:
            init, label = st.load(args.init), Path(args.init).stem
        elif plan is not None:
            seeded = TransferPlan.from_dict({**plan.to_dict(), "seed": seed})
            init, label = build_init(seeded, donors, task.model_config()), args.label or "transfer"
        else:
            init, label = init_random(task.model_config(), seed), "random"
        ckpt, rec = finetune(init, task, cfg, seed, label=args.label or label,
                             plan_digest=plan.digest() if plan else "", return_checkpoint=True)
        store.append_record(rec.to_json())
        if args.save:
            st.save(ckpt, out / f"{task.name}-{rec.run_id}{st.SUFFIX}")
        print(f"{rec.label} {task.name} seed={seed} acc={rec.final_accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = st.load(args.ckpt)
    acc = evaluate(ckpt, _task(args.task, args), args.n, args.seed, greedy=args.greedy)
    print(f"{acc:.6f}")
    return 0


def cmd_report(args) -> int:
    records = rp.load_records(args.records)
    csv_path, txt_path = rp.write_report(records, args.out)
    print(txt_path.read_text(), end="")
    print(f"wrote {csv_path} and {txt_path}")
    return 0


def cmd_replicate(args) -> int:
    plan = replication_plan(args.table, args.scale, tuple(args.seeds) if args.seeds else None)
    if args.dry_run:
        print(plan.describe())
        return 0
    runner = Runner(st.Store(args.out), threads=args.threads,
                    on_record=lambda r: print(f"{r.label} {r.task} seed={r.seed} "
                                              f"acc={r.final_accuracy:.4f}", flush=True))
    runner.run(plan)
    keys = {j.key() for j in plan.finetune}
    recs = [r for r in runner.records() if r.extra.get("job_key") in keys]
    csv_path, txt_path = rp.write_report(recs, args.out)
    print(txt_path.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proctrain", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, preset: str | None):
        sp.add_argument("--scale", choices=("desk", "paper"), default="desk")
        if preset:
            sp.add_argument("--preset", default=preset, help=f"one of {sorted(PRESETS)}")
            sp.add_argument("--override", help="JSON object of training-config overrides")
        sp.add_argument("--corpus", help="text file for the language_modelling task")

    sp = sub.add_parser("pretrain", help="pretrain a fresh model on a procedural task")
    sp.add_argument("--task", required=True)
    sp.add_argument("--seed", "--seeds", dest="seeds", type=int, nargs="+", default=[0])
    sp.add_argument("--out", default="runs")
    common(sp, "pretrain-stack")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("surgery", help="assemble an init checkpoint from donors")
    sp.add_argument("--plan", required=True, help="transfer plan JSON")
    sp.add_argument("--donor", action="append", metavar="NAME=PATH")
    sp.add_argument("--task", required=True, help="downstream task the init is for")
    sp.add_argument("--out", required=True)
    common(sp, None)
    sp.set_defaults(func=cmd_surgery)

    sp = sub.add_parser("finetune", help="fine-tune on a downstream task")
    sp.add_argument("--task")
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--plan", help="transfer plan JSON (omit for a random init)")
    sp.add_argument("--donor", action="append", metavar="NAME=PATH")
    sp.add_argument("--init", help="start from this checkpoint instead of a plan")
    sp.add_argument("--label")
    sp.add_argument("--seed", "--seeds", dest="seeds", type=int, nargs="+", default=[0])
    sp.add_argument("--out", default="runs")
    sp.add_argument("--save", action="store_true", help="also write fine-tuned checkpoints")
    common(sp, "ft-algorithmic")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="accuracy of a checkpoint on fresh episodes")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("-n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--greedy", action="store_true", help="score greedy decoding")
    sp.add_argument("--corpus")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="mean/std tables from run records")
    sp.add_argument("records", nargs="+", help="records.ndjson files or globs")
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("replicate", help="run a named result end to end")
    sp.add_argument("table", choices=("fig2", "tables3-6", "table7", "table1"))
    sp.add_argument("--scale", choices=("desk", "paper"), default="desk")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--out", default="runs")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--dry-run", action="store_true")
    sp.set_defaults(func=cmd_replicate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, UnknownTaskError, TransferError, IncompatibleInitError,
            st.CheckpointFormatError, rp.EmptyReportError, FileNotFoundError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: run aborted: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
