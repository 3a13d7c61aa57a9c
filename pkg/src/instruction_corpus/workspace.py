"""On-disk layout of a pipeline run and the append-only results store.

::

    <root>/corpus/<task>.jsonl
    <root>/cache/embeddings/                      EmbeddingCache
    <root>/clusters/<task>/dendrogram.json
    <root>/clusters/<task>/<threshold_id>/cut.jsonl
    <root>/clusters/<task>/<threshold_id>/stats.json
    <root>/index/<task>/<threshold_id>/{vectors.npy,manifest.json}
    <root>/instructions/<task>/<threshold_id>/<variant>.json
    <root>/results/results.jsonl
"""
from __future__ import annotations

import json
import re
import threading
from pathlib import Path
from typing import Iterable

from .backends import EmbeddingCache
from .cluster import ClusterCut, ClusterStats, Dendrogram
from .core import EvalRecord, InstructionVariant, Question, Split, dumps_line, iter_jsonl, load_questions
from .errors import MissingArtifact
from .instructgen import InstructionStore
from .retrieve import RetrievalIndex


def task_dir(task: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", task).lower()


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: EmbeddingCache | None = None

    @property
    def cache(self) -> EmbeddingCache:
        if self._cache is None:
            self._cache = EmbeddingCache(self.root / "cache" / "embeddings")
        return self._cache

    def corpus_path(self, task: str) -> Path:
        return self.root / "corpus" / f"{task_dir(task)}.jsonl"

    def dendrogram_path(self, task: str) -> Path:
        return self.root / "clusters" / task_dir(task) / "dendrogram.json"

    def cut_path(self, task: str, tid: str) -> Path:
        return self.root / "clusters" / task_dir(task) / tid / "cut.jsonl"

    def stats_path(self, task: str, tid: str) -> Path:
        return self.root / "clusters" / task_dir(task) / tid / "stats.json"

    def index_dir(self, task: str, tid: str) -> Path:
        return self.root / "index" / task_dir(task) / tid

    def store_path(self, task: str, tid: str, variant: InstructionVariant) -> Path:
        return self.root / "instructions" / task_dir(task) / tid / f"{variant.slug}.json"

    @property
    def results_path(self) -> Path:
        return self.root / "results" / "results.jsonl"

    def _require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingArtifact(path, what)
        return path

    def questions(self, task: str, split: Split | None = None) -> list[Question]:
        qs = load_questions(self._require(self.corpus_path(task), "corpus"))
        return [q for q in qs if split is None or q.split == split]

    def dendrogram(self, task: str) -> Dendrogram:
        return Dendrogram.load(self._require(self.dendrogram_path(task), "dendrogram"))

    def cut(self, task: str, tid: str) -> ClusterCut:
        return ClusterCut.load(self._require(self.cut_path(task, tid), "cluster cut"))

    def stats(self, task: str, tid: str) -> ClusterStats:
        path = self._require(self.stats_path(task, tid), "cluster stats")
        return ClusterStats.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def save_stats(self, task: str, tid: str, stats: ClusterStats) -> None:
        path = self.stats_path(task, tid)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True), encoding="utf-8")

    def index(self, task: str, tid: str) -> RetrievalIndex:
        d = self.index_dir(task, tid)
        self._require(d / "manifest.json", "retrieval index")
        return RetrievalIndex.load(d)

    def store(self, task: str, tid: str, variant: InstructionVariant, must_exist: bool = True) -> InstructionStore:
        path = self.store_path(task, tid, variant)
        if must_exist:
            self._require(path, "instruction store")
        return InstructionStore.open(path, tid, variant)

    def threshold_ids(self, task: str) -> list[str]:
        base = self.root / "clusters" / task_dir(task)
        if not base.exists():
            return []
        return sorted(p.parent.name for p in base.glob("*/cut.jsonl"))

    def stores(self, task: str) -> list[InstructionStore]:
        base = self.root / "instructions" / task_dir(task)
        return [InstructionStore.load(p) for p in sorted(base.glob("*/*.json"))]


class ResultsStore:
    """Append-only JSONL of EvalRecords keyed by (task, question, model, condition, threshold)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.keys: set[tuple] = set()
        if self.path.exists():
            for d in iter_jsonl(self.path):
                self.keys.add(EvalRecord.from_dict(d).key)

    def __contains__(self, key: tuple) -> bool:
        return key in self.keys

    def append(self, records: Iterable[EvalRecord]) -> int:
        n = 0
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                for r in records:
                    if r.key in self.keys:
                        continue
                    fh.write(dumps_line(r.to_dict()) + "\n")
                    self.keys.add(r.key)
                    n += 1
        return n

    def records(self) -> list[EvalRecord]:
        if not self.path.exists():
            return []
        return [EvalRecord.from_dict(d) for d in iter_jsonl(self.path)]
