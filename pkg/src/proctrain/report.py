"""Summary tables over run records.

Rows are initialisation labels (``random``, ``identity/attn``, ...), columns
are downstream tasks, and each cell is the mean and sample standard
deviation of final accuracy across seeds. Output does not depend on record
order.
"""
from __future__ import annotations

import csv
import glob
import io
from collections import defaultdict
from pathlib import Path

from .surgery import UndefinedScoreError, relative_improvement
from .training import RunRecord, aggregate

CSV_FIELDS = ("label", "task", "n", "mean", "std")


class EmptyReportError(ValueError):
    pass


def load_records(patterns: list[str] | str) -> list[RunRecord]:
    patterns = [patterns] if isinstance(patterns, str) else patterns
    paths = sorted({p for pat in patterns for p in glob.glob(pat)})
    records = []
    for path in paths:
        for line in Path(path).read_text().splitlines():
            if line.strip():
                records.append(RunRecord.from_json(line))
    if not records:
        raise EmptyReportError(f"no run records found for {patterns}")
    return records


def summarize(records: list[RunRecord], include_pretraining: bool = False) -> dict:
    """``{(label, task): (n, mean, std)}`` over fine-tuning records.

    A configuration re-run with the same seed counts once (the last record
    wins), so appending a resumed run does not double-weight it.
    """
    by_cfg: dict[tuple, dict[int, RunRecord]] = defaultdict(dict)
    for r in sorted(records, key=lambda r: (r.label, r.task, r.seed, r.run_id)):
        if not include_pretraining and r.label.startswith("pretrain/"):
            continue
        by_cfg[r.config_key][r.seed] = r
    out = {}
    for key in sorted(by_cfg):
        recs = list(by_cfg[key].values())
        mean, std = aggregate(recs)
        out[key] = (len(recs), mean, std)
    return out


def relative_scores(summary: dict) -> dict:
    """Perturbation score for every ``<base>/<tag>`` label that has a
    matching ``<base>/pretrained`` row and a ``random`` row for its task."""
    out = {}
    for (label, task), (_, mean, _) in summary.items():
        base, _, tag = label.rpartition("/")
        if not base or tag == "pretrained":
            continue
        pre, rand = summary.get((f"{base}/pretrained", task)), summary.get(("random", task))
        if pre is None or rand is None:
            continue
        try:
            out[(label, task)] = relative_improvement(mean, rand[1], pre[1])
        except UndefinedScoreError:
            out[(label, task)] = float("nan")
    return out


def to_csv(summary: dict, scores: dict | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS + ("relative_improvement",))
    scores = scores or {}
    for (label, task), (n, mean, std) in summary.items():
        score = scores.get((label, task))
        w.writerow([label, task, n, f"{mean:.6f}", f"{std:.6f}",
                    "" if score is None else f"{score:.6f}"])
    return buf.getvalue()


def read_csv(text: str) -> dict:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out[(row["label"], row["task"])] = (int(row["n"]), float(row["mean"]), float(row["std"]))
    return out


def _grid(cells: dict, fmt) -> str:
    rows = sorted({k[0] for k in cells}, key=lambda r: (r != "random", r))
    cols = sorted({k[1] for k in cells})
    table = [[""] + cols]
    for r in rows:
        table.append([r] + [fmt(cells[(r, c)]) if (r, c) in cells else "-" for c in cols])
    widths = [max(len(row[i]) for row in table) for i in range(len(cols) + 1)]
    lines = ["  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                       for i, cell in enumerate(row)) for row in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def to_text(summary: dict, scores: dict | None = None) -> str:
    parts = ["Accuracy (%), mean +- std over seeds",
             _grid(summary, lambda v: f"{100 * v[1]:.1f} +- {100 * v[2]:.1f} (n={v[0]})")]
    if scores:
        parts += ["", "Relative improvement over random init (1 = matches unperturbed)",
                  _grid(scores, lambda v: f"{v:.3f}")]
    return "\n".join(parts) + "\n"


def write_report(records: list[RunRecord], out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(records)
    if not summary:
        raise EmptyReportError("no fine-tuning records to report")
    scores = relative_scores(summary)
    csv_path, txt_path = out_dir / "report.csv", out_dir / "report.txt"
    csv_path.write_text(to_csv(summary, scores))
    txt_path.write_text(to_text(summary, scores))
    return csv_path, txt_path
