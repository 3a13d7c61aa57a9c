"""Exhaustive cosine top-k retrieval over cluster representatives."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .cluster import ClusterCut
from .core import EmbeddingVector
from .errors import DegenerateCentroid, DimensionMismatch, EmptyIndex, MissingEmbedding, ZeroVector

DEFAULT_K = 5
CENTROID = "centroid"
NEAREST_MEMBER = "nearest_member"


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    """Unit-norm representatives, one row per cluster (or per member in
    nearest-member mode, where ``owner`` maps rows to clusters)."""

    cluster_ids: tuple[str, ...]
    vectors: np.ndarray
    threshold_id: str
    mode: str = CENTROID
    owner: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.cluster_ids)

    def entries(self) -> list[tuple[str, EmbeddingVector]]:
        if self.mode != CENTROID:
            raise ValueError("entries() is defined for centroid indexes")
        return [(cid, EmbeddingVector.from_array(v)) for cid, v in zip(self.cluster_ids, self.vectors)]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "vectors.npy", self.vectors)
        manifest = {"threshold_id": self.threshold_id, "mode": self.mode, "dim": self.dim,
                    "cluster_ids": list(self.cluster_ids)}
        if self.owner is not None:
            manifest["owner"] = self.owner.tolist()
        (directory / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "RetrievalIndex":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        vectors = np.load(directory / "vectors.npy")
        owner = np.asarray(manifest["owner"], dtype=int) if "owner" in manifest else None
        return cls(tuple(manifest["cluster_ids"]), vectors, manifest["threshold_id"], manifest["mode"], owner)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ZeroVector("zero vector")
    return v / n


def build_index(cut: ClusterCut, embeddings_by_question: Mapping[str, EmbeddingVector | np.ndarray],
                mode: str = CENTROID) -> RetrievalIndex:
    """Index a cut; centroid mode stores normalize(mean of member vectors)."""
    rows, owner, ids = [], [], []
    dim = None
    for ci, cluster in enumerate(cut.clusters):
        member_vecs = []
        for qid in cluster.member_ids:
            if qid not in embeddings_by_question:
                raise MissingEmbedding(qid)
            v = embeddings_by_question[qid]
            v = v.array if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=float)
            if dim is None:
                dim = v.size
            elif v.size != dim:
                raise DimensionMismatch(f"question {qid} has dim {v.size}, expected {dim}")
            member_vecs.append(_unit(v))
        ids.append(cluster.cluster_id)
        if mode == CENTROID:
            mean = np.mean(member_vecs, axis=0)
            norm = np.linalg.norm(mean)
            if norm < 1e-12:
                raise DegenerateCentroid(f"cluster {cluster.cluster_id} has a zero mean vector")
            rows.append(mean / norm)
        elif mode == NEAREST_MEMBER:
            rows.extend(member_vecs)
            owner.extend([ci] * len(member_vecs))
        else:
            raise ValueError(f"unknown index mode {mode!r}")
    if not rows:
        raise EmptyIndex("cut has no clusters")
    return RetrievalIndex(tuple(ids), np.array(rows), cut.threshold_id, mode,
                          np.asarray(owner, dtype=int) if mode == NEAREST_MEMBER else None)


def top_k(index: RetrievalIndex, query, k: int = DEFAULT_K) -> list[tuple[str, float]]:
    """Highest-similarity clusters, descending; ties go to the smaller cluster id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    q = query.array if isinstance(query, EmbeddingVector) else np.asarray(query, dtype=float)
    if q.size != index.dim:
        raise DimensionMismatch(f"query dim {q.size} != index dim {index.dim}")
    sims = index.vectors @ _unit(q)
    if index.mode == NEAREST_MEMBER:
        best = np.full(len(index), -np.inf)
        np.maximum.at(best, index.owner, sims)
        sims = best
    sims = np.clip(sims, -1.0, 1.0)
    ids = np.array(index.cluster_ids)
    # lexsort: last key is primary
    order = np.lexsort((ids, -sims))[: min(k, len(index))]
    return [(index.cluster_ids[i], float(sims[i])) for i in order]
