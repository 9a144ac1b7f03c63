"""Accuracy, compression and speedup metrics over paired inference runs."""

from __future__ import annotations

import json
import math
import platform
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from hcot.inference import InferenceTrace
from hcot.taskgen import ACTION_PATTERN, CHAIN_ARITHMETIC, KB_LOOKUP

MODES = ("hcot", "fullcot", "nocot")
METRIC_ROWS = ("S-CR", "S-S", "W-CR", "W-S")


def canonical_answer(answer: str | None, task: str) -> str | int | None:
    if answer is None:
        return None
    if task == CHAIN_ARITHMETIC:
        try:
            return int(answer.strip())
        except ValueError:
            return None
    if task == KB_LOOKUP:
        return answer.strip().casefold()
    raise ValueError(f"unknown task {task!r}")


def answers_match(predicted: str | None, gold: str, task: str) -> bool:
    p = canonical_answer(predicted, task)
    return p is not None and p == canonical_answer(gold, task)


@dataclass
class RunEntry:
    question_id: str
    trace: InferenceTrace
    correct: bool


@dataclass
class RunSet:
    mode: str
    task: str
    entries: list[RunEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        ids = [e.question_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate question id in run set")
        if any(e.trace.mode != self.mode for e in self.entries):
            raise ValueError("all traces in a run set must share its mode")

    @property
    def ids(self) -> list[str]:
        return [e.question_id for e in self.entries]

    @classmethod
    def build(cls, mode: str, task: str, traces: Mapping[str, InferenceTrace], gold: Mapping[str, str]) -> RunSet:
        missing = set(traces) - set(gold)
        if missing:
            raise KeyError(f"no gold answer for {sorted(missing)[:3]}")
        entries = [RunEntry(qid, t, answers_match(t.answer, gold[qid], task)) for qid, t in traces.items()]
        return cls(mode, task, entries)


def accuracy(runs: RunSet, gold: Mapping[str, str]) -> float:
    if not runs.entries:
        raise ValueError("empty run set")
    hits = 0
    for e in runs.entries:
        if e.question_id not in gold:
            raise KeyError(f"no gold answer for {e.question_id!r}")
        hits += answers_match(e.trace.answer, gold[e.question_id], runs.task)
    return hits / len(runs.entries)


@dataclass
class CompressionReport:
    S_CR: float
    S_S: float
    W_CR: float
    W_S: float
    mean_completion_tokens: dict[str, float]
    mean_wall_ms: dict[str, float]
    mean_aux_encode_ms: float
    n_samples: int
    hardware: str = ""
    fingerprints: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def hardware_note() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'}, python {platform.python_version()}; "
            "wall-clock ratios are relative to this machine")


def compression_report(hcot: RunSet, baseline: RunSet, fingerprints: dict | None = None) -> CompressionReport:
    """Ratio-of-means compression and speedup of ``hcot`` against a full-CoT baseline."""
    if baseline.mode != "fullcot":
        raise ValueError("baseline run set must be fullcot")
    if sorted(hcot.ids) != sorted(baseline.ids):
        raise ValueError("run sets cover different question ids")
    if not hcot.entries:
        raise ValueError("empty run set")
    n = len(hcot.entries)

    def mean(rs: RunSet, key) -> float:
        return math.fsum(key(e.trace) for e in rs.entries) / n

    tok_h = mean(hcot, lambda t: t.stats.completion_tokens)
    tok_b = mean(baseline, lambda t: t.stats.completion_tokens)
    # recovery is optional post-hoc work and is kept out of the W-CR timing boundary
    wall = lambda t: t.stats.wall_ms["total"] - t.stats.wall_ms.get("recovery", 0.0)  # noqa: E731
    ms_h, ms_b = mean(hcot, wall), mean(baseline, wall)
    if min(tok_h, tok_b, ms_h, ms_b) <= 0:
        raise ValueError("mean tokens and wall time must be positive")
    s_cr, w_cr = tok_h / tok_b, ms_h / ms_b
    return CompressionReport(
        S_CR=s_cr, S_S=1.0 / s_cr, W_CR=w_cr, W_S=1.0 / w_cr,
        mean_completion_tokens={hcot.mode: tok_h, baseline.mode: tok_b},
        mean_wall_ms={hcot.mode: ms_h, baseline.mode: ms_b},
        mean_aux_encode_ms=mean(hcot, lambda t: t.stats.wall_ms["aux_encode"]),
        n_samples=n, hardware=hardware_note(), fingerprints=dict(fingerprints or {}),
    )


def trace_actions(trace: InferenceTrace) -> list[str]:
    return ACTION_PATTERN.findall(trace.text)


def agent_counts(runs: RunSet, gold_paths: Mapping[str, Sequence[str]]) -> tuple[int, int]:
    """Matched actions and pooled denominator.

    Correct traces are scored against the actions they emitted, wrong ones
    against the gold path length.
    """
    if runs.task != KB_LOOKUP:
        raise ValueError("agent accuracy is only defined for kb_lookup")
    matched = denom = 0
    for e in runs.entries:
        gold = list(gold_paths[e.question_id])
        emitted = trace_actions(e.trace)
        matched += sum(a == g for a, g in zip(emitted, gold))
        denom += len(emitted) if e.correct else len(gold)
    return matched, denom


def agent_accuracy(runs: RunSet, gold_paths: Mapping[str, Sequence[str]]) -> float:
    matched, denom = agent_counts(runs, gold_paths)
    return matched / denom if denom else 0.0


def _pct(x: float) -> str:
    return f"{100 * x:.2f}%"


def emit_report(reports: Mapping[str, CompressionReport], fmt: str = "table",
                accuracy_grid: Mapping[str, Mapping[str, float]] | None = None) -> str:
    """Render compression metrics per task and an optional setting-by-task accuracy grid.

    ``accuracy_grid`` maps a setting name (nocot, fullcot, ...) to {task: accuracy}.
    """
    grid = {k: dict(v) for k, v in (accuracy_grid or {}).items()}
    if fmt == "json":
        return json.dumps({"compression": {t: r.to_dict() for t, r in reports.items()}, "accuracy": grid},
                          indent=2, sort_keys=True)
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    tasks = list(reports)
    width = max([12] + [len(t) + 2 for t in tasks])
    lines = ["metric".ljust(8) + "".join(t.rjust(width) for t in tasks)]
    cells = {
        "S-CR": lambda r: _pct(r.S_CR), "S-S": lambda r: f"{r.S_S:.2f}x",
        "W-CR": lambda r: _pct(r.W_CR), "W-S": lambda r: f"{r.W_S:.2f}x",
    }
    for row in METRIC_ROWS:
        lines.append(row.ljust(8) + "".join(cells[row](reports[t]).rjust(width) for t in tasks))
    if grid:
        gtasks = sorted({t for v in grid.values() for t in v})
        gw = max([12] + [len(t) + 2 for t in gtasks])
        sw = max(len(s) for s in grid) + 2
        lines += ["", "setting".ljust(sw) + "".join(t.rjust(gw) for t in gtasks)]
        for setting, row in grid.items():
            lines.append(setting.ljust(sw) + "".join(
                (_pct(row[t]) if t in row else "-").rjust(gw) for t in gtasks))
    if reports:
        lines += ["", f"hardware: {next(iter(reports.values())).hardware}"]
    return "\n".join(lines) + "\n"
