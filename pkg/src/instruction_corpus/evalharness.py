"""Experiment grids, accuracy tables with zero-shot deltas, sweeps, length profiles."""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backends import BackendConfig, ChatBackend, EmbeddingBackend, make_chat, make_embedder
from .core import HS_CONCISE, Condition, ConditionKind, EvalRecord, Question, Split, canonical_task
from .errors import ConfigError
from .infer import PromptBudget, run_inference
from .instructgen import InstructionStore
from .retrieve import DEFAULT_K, RetrievalIndex
from .tokens import count_tokens
from .workspace import ResultsStore, Workspace

log = logging.getLogger(__name__)


@dataclass
class ExperimentPlan:
    tasks: list[str]
    models: list[BackendConfig]
    conditions: list[Condition]
    threshold_ids: list[str] | dict[str, list[str]]
    embedding: BackendConfig = field(default_factory=lambda: BackendConfig("mock-embedding", provider="mock"))
    k: int = DEFAULT_K
    budget: PromptBudget = field(default_factory=PromptBudget)
    rng_seed: int = 0
    output: str | None = None

    def __post_init__(self):
        if not self.tasks or not self.models or not self.conditions:
            raise ConfigError("a plan needs at least one task, model, and condition")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        self.tasks = [canonical_task(t) for t in self.tasks]

    def thresholds_for(self, task: str) -> list[str]:
        if isinstance(self.threshold_ids, dict):
            return list(self.threshold_ids.get(task, []))
        return list(self.threshold_ids)

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "models": [m.to_dict() for m in self.models],
            "conditions": [str(c) for c in self.conditions],
            "threshold_ids": self.threshold_ids,
            "embedding": self.embedding.to_dict(),
            "k": self.k,
            "budget": self.budget.to_dict(),
            "rng_seed": self.rng_seed,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        try:
            return cls(
                tasks=list(d["tasks"]),
                models=[BackendConfig.from_dict(m) for m in d["models"]],
                conditions=[Condition.parse(c) for c in d["conditions"]],
                threshold_ids=d.get("threshold_ids", []),
                embedding=BackendConfig.from_dict(d["embedding"]) if "embedding" in d
                else BackendConfig("mock-embedding", provider="mock"),
                k=int(d.get("k", DEFAULT_K)),
                budget=PromptBudget(**d.get("budget", {})),
                rng_seed=int(d.get("rng_seed", 0)),
                output=d.get("output"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid plan: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


@dataclass(frozen=True)
class Cell:
    question: Question
    model_id: str
    condition: Condition
    threshold_id: str

    @property
    def key(self) -> tuple:
        return (self.question.task, self.question.id, self.model_id, str(self.condition), self.threshold_id)


def plan_cells(plan: ExperimentPlan, questions: Mapping[str, Sequence[Question]], model_id: str) -> list[Cell]:
    """Every (question, condition, threshold) cell for one model, in run order.

    Zero-shot does not depend on the cut, so it gets one cell with an empty
    threshold id.
    """
    cells = []
    for task in plan.tasks:
        for q in questions[task]:
            for cond in plan.conditions:
                tids = [""] if cond.is_zero_shot else plan.thresholds_for(task)
                for tid in tids:
                    cells.append(Cell(q, model_id, cond, tid))
    return cells


def _required_artifacts(plan: ExperimentPlan, ws: Workspace):
    for task in plan.tasks:
        for tid in plan.thresholds_for(task):
            variants = {c.variant for c in plan.conditions if not c.is_zero_shot}
            if variants:
                yield task, tid, None
            for v in sorted(variants, key=lambda v: v.slug):
                yield task, tid, v


def check_artifacts(plan: ExperimentPlan, ws: Workspace) -> None:
    """Raise MissingArtifact for the first absent corpus, index, or store."""
    for task in plan.tasks:
        ws.questions(task, Split.TEST)
        if any(not c.is_zero_shot for c in plan.conditions) and not plan.thresholds_for(task):
            raise ConfigError(f"plan has instructed conditions but no thresholds for {task}")
    for task, tid, variant in _required_artifacts(plan, ws):
        if variant is None:
            ws.index(task, tid)
        else:
            ws.store(task, tid, variant)


def run_plan(plan: ExperimentPlan, ws: Workspace, chat_backends: Mapping[str, ChatBackend] | None = None,
             embedder: EmbeddingBackend | None = None, dry_run: bool = False) -> Path:
    """Fill the results store with one record per plan cell; existing cells are skipped.

    ``chat_backends`` maps model names to ready clients (mocks in tests);
    models missing from it are built from their BackendConfig.
    """
    check_artifacts(plan, ws)
    results = ResultsStore(plan.output or ws.results_path)
    questions = {t: ws.questions(t, Split.TEST) for t in plan.tasks}
    indexes: dict[tuple, RetrievalIndex] = {}
    stores: dict[tuple, InstructionStore] = {}
    for task, tid, variant in _required_artifacts(plan, ws):
        if variant is None:
            indexes[(task, tid)] = ws.index(task, tid)
        else:
            stores[(task, tid, variant)] = ws.store(task, tid, variant)

    todo_by_model = {}
    for cfg in plan.models:
        cells = plan_cells(plan, questions, cfg.model_name)
        todo_by_model[cfg.model_name] = [c for c in cells if c.key not in results]
        log.info("model %s: %d cells, %d to run", cfg.model_name, len(cells), len(todo_by_model[cfg.model_name]))
    if dry_run:
        for cfg in plan.models:
            print(f"{cfg.model_name}: {len(todo_by_model[cfg.model_name])} cells to run")
        return results.path

    if embedder is None and any(todo_by_model.values()) and any(not c.is_zero_shot for c in plan.conditions):
        embedder = make_embedder(plan.embedding, ws.cache)

    for cfg in plan.models:
        todo = todo_by_model[cfg.model_name]
        if not todo:
            continue
        chat = (chat_backends or {}).get(cfg.model_name) or make_chat(cfg)

        def one(cell: Cell) -> EvalRecord:
            task = cell.question.task
            if cell.condition.is_zero_shot:
                return run_inference(cell.question, cell.condition, chat, plan.budget, model_id=cell.model_id)
            return run_inference(
                cell.question, cell.condition, chat, plan.budget,
                embedder=embedder,
                index=indexes[(task, cell.threshold_id)],
                store=stores[(task, cell.threshold_id, cell.condition.variant)],
                k=plan.k, model_id=cell.model_id,
            )

        chunk = 256
        with ThreadPoolExecutor(max_workers=max(1, chat.max_concurrency)) as pool:
            for start in range(0, len(todo), chunk):
                batch = todo[start : start + chunk]
                # map preserves order, so the results file is deterministic
                results.append(pool.map(one, batch))
                log.info("%s: %d/%d cells", cfg.model_name, min(start + chunk, len(todo)), len(todo))
    return results.path


def fmt_delta(d: float | None) -> str:
    if d is None:
        return ""
    s = f"{d:+.2f}"
    return "+0.00" if s == "-0.00" else s


@dataclass(frozen=True)
class AccuracyRow:
    task: str
    model_id: str
    condition: str
    threshold_id: str
    n: int
    correct: int
    accuracy: float
    delta_vs_zeroshot: float | None


@dataclass
class AccuracyTable:
    rows: list[AccuracyRow]

    COLUMNS = ("task", "model_id", "condition", "threshold_id", "n", "correct", "accuracy", "delta_vs_zeroshot")

    def __len__(self) -> int:
        return len(self.rows)

    def lookup(self, task: str, model_id: str, condition: str, threshold_id: str = "") -> AccuracyRow:
        for r in self.rows:
            if (r.task, r.model_id, r.condition, r.threshold_id) == (task, model_id, condition, threshold_id):
                return r
        raise KeyError((task, model_id, condition, threshold_id))

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.task, r.model_id, r.condition, r.threshold_id, r.n, r.correct,
                        repr(r.accuracy), "" if r.delta_vs_zeroshot is None else repr(r.delta_vs_zeroshot)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_text(self) -> str:
        header = ["Task", "Model", "Condition", "Threshold", "N", "Acc.", "Δ"]
        body = [[r.task, r.model_id, r.condition, r.threshold_id or "-", str(r.n),
                 f"{r.accuracy:.2f}", fmt_delta(r.delta_vs_zeroshot)] for r in self.rows]
        return _align([header] + body)


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def aggregate(records: Iterable[EvalRecord]) -> AccuracyTable:
    """Exact-count accuracy per (task, model, condition, threshold) cell.

    Deltas subtract the unrounded zero-shot accuracy of the same
    (task, model), so a displayed delta can differ from subtracting the
    two rounded columns.
    """
    counts: dict[tuple, list[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        c = counts[(r.task, r.model_id, str(r.condition), r.threshold_id)]
        c[0] += 1
        c[1] += int(r.correct)
    zs = {(t, m): k / n for (t, m, cond, _), (n, k) in counts.items()
          if cond == ConditionKind.ZERO_SHOT.value}
    rows = []
    for key in sorted(counts):
        task, model, cond, tid = key
        n, k = counts[key]
        acc = k / n
        base = zs.get((task, model))
        rows.append(AccuracyRow(task, model, cond, tid, n, k, acc, None if base is None else acc - base))
    return AccuracyTable(rows)


@dataclass
class SweepTable:
    task: str
    condition: str
    models: list[str]
    rows: list[tuple[str, float, dict[str, float]]]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold_id", "mean_cluster_size"] + self.models)
        for tid, size, accs in self.rows:
            w.writerow([tid, repr(size)] + [repr(accs.get(m, float("nan"))) for m in self.models])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_text(self) -> str:
        header = ["Threshold", "Mean size"] + self.models
        body = [[tid, f"{size:.2f}"] + [f"{100 * accs[m]:.1f}" if m in accs else "-" for m in self.models]
                for tid, size, accs in self.rows]
        return _align([header] + body)


def threshold_sweep(plan: ExperimentPlan, ws: Workspace, task: str, threshold_ids: Sequence[str],
                    condition: Condition | None = None, **run_kwargs) -> SweepTable:
    """Run one task across several cuts and tabulate accuracy per model and threshold."""
    task = canonical_task(task)
    condition = condition or Condition(ConditionKind.INSTRUCTED, HS_CONCISE)
    sub = replace(plan, tasks=[task], conditions=[condition], threshold_ids=list(threshold_ids))
    path = run_plan(sub, ws, **run_kwargs)
    records = [r for r in ResultsStore(path).records()
               if r.task == task and r.condition == condition and r.threshold_id in threshold_ids]
    models = [m.model_name for m in plan.models]
    rows = []
    for tid in threshold_ids:
        cut = ws.cut(task, tid)
        mean_size = cut.n_leaves / len(cut.clusters)
        accs = {}
        for m in models:
            hits = [r.correct for r in records if r.model_id == m and r.threshold_id == tid]
            if hits:
                accs[m] = sum(hits) / len(hits)
        rows.append((tid, mean_size, accs))
    return SweepTable(task, str(condition), models, rows)


@dataclass(frozen=True)
class LengthSummary:
    task: str
    variant: str
    n: int
    mean: float
    median: float
    p10: float
    p90: float


def length_profile(stores: Iterable[tuple[str, InstructionStore]], tokenizer_id: str = "bytes/4") -> list[LengthSummary]:
    """Token-length summary per (task, variant); percentiles use linear interpolation."""
    buckets: dict[tuple[str, str], list[int]] = defaultdict(list)
    for task, store in stores:
        for instr in store.instructions.values():
            buckets[(task, store.variant.slug)].append(count_tokens(instr.raw, tokenizer_id))
    out = []
    for (task, variant), lens in sorted(buckets.items()):
        if not lens:
            continue
        a = np.asarray(lens, dtype=float)
        out.append(LengthSummary(task, variant, a.size, float(a.mean()), float(np.median(a)),
                                 float(np.percentile(a, 10)), float(np.percentile(a, 90))))
    return out


def lengths_to_csv(rows: Sequence[LengthSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "variant", "n", "mean", "median", "p10", "p90"])
    for r in rows:
        w.writerow([r.task, r.variant, r.n, repr(r.mean), repr(r.median), repr(r.p10), repr(r.p90)])
    return buf.getvalue()


# Reference average instruction length (tokens) per variant, for context only.
REFERENCE_AVG_LENGTH = {"hs_concise": 453, "grad_concise": 631, "hs_verbose": 1408, "grad_verbose": 1765}
