"""Run records (JSON lines), accuracy aggregation and CSV/SVG reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IncompleteRecordError, InputError

SCHEMA_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


class RunRecord:
    """Append-only event log of one training run.

    Every event carries a strictly increasing ``seq``.  When ``path`` is given
    each event is flushed to disk as one JSON line as soon as it is appended.
    Wall-clock durations go to an optional sidecar so the record itself is a
    deterministic function of config and seed.
    """

    def __init__(self, run_id: str, config: dict | None = None, path=None, timings_path=None):
        self.run_id = run_id
        self.config = dict(config or {})
        self.config_hash = config_hash(self.config)
        self.events: list[dict] = []
        self.path = Path(path) if path else None
        self.timings_path = Path(timings_path) if timings_path else None

    def append(self, event: str, **fields) -> dict:
        entry = {"seq": len(self.events), "event": event, **_plain(fields)}
        self.events.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def start(self, **fields) -> dict:
        return self.append("run_start", schema=SCHEMA_VERSION, run_id=self.run_id,
                           config_hash=self.config_hash, config=self.config, **fields)

    def timing(self, label: str, seconds: float) -> None:
        if self.timings_path is not None:
            with open(self.timings_path, "a", encoding="utf-8") as f:
                f.write(json.dumps({"run_id": self.run_id, "label": label, "seconds": seconds}) + "\n")

    def of(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    def dumps(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    @property
    def finished(self) -> bool:
        return bool(self.events) and self.events[-1]["event"] == "run_end"

    @classmethod
    def load(cls, path) -> "RunRecord":
        path = Path(path)
        events = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        if not events or events[0]["event"] != "run_start":
            raise IncompleteRecordError(f"{path}: missing run_start event")
        rec = cls(events[0]["run_id"], events[0].get("config"))
        rec.config_hash = events[0]["config_hash"]
        rec.events = events
        return rec

    # -- accuracy views -------------------------------------------------------

    def accuracies_after(self, task: int) -> list[float]:
        for e in self.of("task_end"):
            if e["task"] == task:
                return e["accuracies"]
        raise IncompleteRecordError(f"run {self.run_id} has no evaluation after task {task}")

    @property
    def num_tasks(self) -> int:
        return len(self.of("task_end"))


def average_accuracy(record: RunRecord, after_task: int | None = None) -> float:
    """Unweighted mean of per-task test accuracies measured after ``after_task``."""
    if after_task is None:
        if record.num_tasks == 0:
            raise IncompleteRecordError(f"run {record.run_id} has no task evaluations")
        after_task = record.of("task_end")[-1]["task"]
    accs = record.accuracies_after(after_task)
    if len(accs) < after_task + 1 or any(a is None for a in accs):
        raise IncompleteRecordError(f"missing evaluations after task {after_task}")
    return float(np.mean(accs[:after_task + 1]))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (zero for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InputError("no values to aggregate")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


# -- reports -------------------------------------------------------------------

CSV_FIELDS = ["run_id", "method", "seed", "task", "accuracy", "average_accuracy", "sparsity", "config_hash"]


def summary_rows(records: Iterable[RunRecord]) -> list[dict]:
    rows = []
    for rec in records:
        method = f"{rec.config.get('experiment', '?')}/{rec.config.get('mode', '?')}"
        for e in rec.of("task_end"):
            rows.append({
                "run_id": rec.run_id,
                "method": method,
                "seed": rec.config.get("seed"),
                "task": e["task"],
                "accuracy": e["accuracies"][e["task"]],
                "average_accuracy": float(np.mean(e["accuracies"][:e["task"] + 1])),
                "sparsity": e.get("sparsity"),
                "config_hash": rec.config_hash,
            })
    return rows


def _svg_chart(path: Path, series: dict[str, list[tuple[int, float]]], ylabel: str, tag: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": tag, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, pts in sorted(series.items()):
            xs, ys = zip(*pts)
            ax.plot([x + 1 for x in xs], ys, marker="o", label=name)
        ax.set_xlabel("tasks learned")
        ax.set_ylabel(ylabel)
        ax.set_title(f"{ylabel} vs task  [config {tag}]", fontsize=9)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": f"config_hash={tag}"})
        plt.close(fig)


def emit_report(records: Sequence[RunRecord], out_dir) -> dict[str, Path]:
    """Write ``summary.csv`` plus accuracy and sparsity SVG charts into ``out_dir``."""
    records = list(records)
    rows = summary_rows(records)
    if not rows:
        raise InputError("no completed tasks in the given records; nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = config_hash({"runs": sorted(r.config_hash for r in records)})

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    paths = {"csv": out_dir / "summary.csv", "accuracy_svg": out_dir / "accuracy.svg",
             "sparsity_svg": out_dir / "sparsity.svg"}
    paths["csv"].write_text(buf.getvalue(), encoding="utf-8")

    acc, spa = {}, {}
    for r in rows:
        acc.setdefault(r["run_id"], []).append((r["task"], r["average_accuracy"]))
        if r["sparsity"] is not None:
            spa.setdefault(r["run_id"], []).append((r["task"], r["sparsity"]))
    _svg_chart(paths["accuracy_svg"], acc, "average accuracy", tag)
    _svg_chart(paths["sparsity_svg"], spa or {"none": [(0, math.nan)]}, "sparsity", tag)
    return paths


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["task"] = int(r["task"])
        for k in ("accuracy", "average_accuracy", "sparsity"):
            r[k] = float(r[k]) if r[k] not in ("", "None") else None
    return rows
