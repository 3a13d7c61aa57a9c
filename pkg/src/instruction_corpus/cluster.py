"""Average-linkage agglomerative clustering under cosine distance.

The dendrogram is built with the nearest-neighbour chain algorithm and the
Lance-Williams update for average linkage, so it needs the full condensed
distance matrix (O(n^2) memory) but only O(n^2) time.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EmbeddingVector, stack
from .errors import DimensionMismatch, LeafLimitExceeded, MonotonicityViolation, ZeroVector

log = logging.getLogger(__name__)

DEFAULT_LEAF_LIMIT = 50_000
MONOTONE_TOL = 1e-12


def _as_array(v) -> np.ndarray:
    return v.array if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=float)


def cosine_distance(u, v) -> float:
    a, b = _as_array(u), _as_array(v)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dims {a.size} and {b.size} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine distance undefined for a zero vector")
    d = 1.0 - float(a @ b) / (na * nb)
    return min(max(d, 0.0), 2.0)


def unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector(f"zero vector at row {int(np.argmin(norms.ravel()))}")
    return x / norms


def cosine_distance_matrix(vectors) -> np.ndarray:
    x = stack(vectors) if isinstance(vectors, list) and vectors and isinstance(vectors[0], EmbeddingVector) \
        else np.asarray(vectors, dtype=float)
    u = unit_rows(x)
    d = 1.0 - u @ u.T
    np.clip(d, 0.0, 2.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    node: int


@dataclass(frozen=True)
class Dendrogram:
    n_leaves: int
    merges: tuple[Merge, ...]

    def __post_init__(self):
        object.__setattr__(self, "merges", tuple(self.merges))
        if len(self.merges) != self.n_leaves - 1:
            raise ValueError(f"{self.n_leaves} leaves need {self.n_leaves - 1} merges, got {len(self.merges)}")
        used: set[int] = set()
        for i, m in enumerate(self.merges):
            if m.node != self.n_leaves + i:
                raise ValueError(f"merge {i} creates node {m.node}, expected {self.n_leaves + i}")
            for child in (m.left, m.right):
                if child in used or child >= m.node or child < 0:
                    raise ValueError(f"merge {i}: invalid child {child}")
                used.add(child)

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])

    def check_monotone(self, tol: float = MONOTONE_TOL) -> None:
        h = self.heights
        if h.size > 1:
            drops = np.diff(h)
            worst = int(np.argmin(drops))
            if drops[worst] < -tol:
                raise MonotonicityViolation(
                    f"merge {worst + 1} at height {h[worst + 1]!r} is below merge {worst} at {h[worst]!r}"
                )

    def to_dict(self) -> dict:
        return {
            "n_leaves": self.n_leaves,
            "merges": [[m.left, m.right, m.height, m.node] for m in self.merges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dendrogram":
        return cls(d["n_leaves"], tuple(Merge(int(a), int(b), float(h), int(n)) for a, b, h, n in d["merges"]))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Dendrogram":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_dendrogram(vectors, leaf_limit: int = DEFAULT_LEAF_LIMIT) -> Dendrogram:
    """Average-linkage dendrogram over cosine distances of ``vectors``.

    ``vectors`` may be a list of EmbeddingVector or an (n, d) array.
    """
    x = stack(vectors) if isinstance(vectors, list) and vectors and isinstance(vectors[0], EmbeddingVector) \
        else np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two vectors")
    if x.shape[0] > leaf_limit:
        raise LeafLimitExceeded(f"{x.shape[0]} leaves exceeds the limit of {leaf_limit}")
    return linkage_from_distances(cosine_distance_matrix(x))


def linkage_from_distances(dist: np.ndarray) -> Dendrogram:
    """Nearest-neighbour-chain average linkage on a square distance matrix."""
    n = dist.shape[0]
    D = np.array(dist, dtype=float, copy=True)
    np.fill_diagonal(D, np.inf)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    # cluster in slot i always contains leaf i; node_of maps slot -> current node id
    node_of = np.arange(n)
    raw: list[tuple[int, int, float]] = []
    chain: list[int] = []
    next_node = n

    for _ in range(n - 1):
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        while True:
            a = chain[-1]
            row = D[a]
            m = row.min()
            cands = np.flatnonzero(row == m)
            prev = chain[-2] if len(chain) > 1 else -1
            if prev in cands:
                b = prev
            else:
                b = int(cands[np.argmin(node_of[cands])])
            if b == prev:
                break
            chain.append(b)
        chain.pop()
        chain.pop()
        lo, hi = min(a, b), max(a, b)
        raw.append((lo, hi, float(m)))
        sa, sb = size[lo], size[hi]
        merged = (sa * D[lo] + sb * D[hi]) / (sa + sb)
        D[lo, :] = merged
        D[:, lo] = merged
        D[hi, :] = np.inf
        D[:, hi] = np.inf
        D[lo, lo] = np.inf
        size[lo] = sa + sb
        active[hi] = False
        node_of[lo] = next_node
        next_node += 1

    return _relabel(n, raw)


def _relabel(n: int, raw: list[tuple[int, int, float]]) -> Dendrogram:
    """Order chain merges by height and assign node ids n, n+1, ...

    Sort keys are lifted to the maximum of the children's keys so round-off
    can never place a parent before its children; stored heights are untouched.
    """
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    key_of_rep: dict[int, float] = {}
    keyed = []
    for idx, (a, b, h) in enumerate(raw):
        ra, rb = find(a), find(b)
        k = max(h, key_of_rep.get(ra, -math.inf), key_of_rep.get(rb, -math.inf))
        parent[rb] = ra
        key_of_rep[ra] = k
        keyed.append((k, idx))
    keyed.sort()

    parent = list(range(n))
    node_of_root = {i: i for i in range(n)}
    merges = []
    for pos, (_, idx) in enumerate(keyed):
        a, b, h = raw[idx]
        ra, rb = find(a), find(b)
        left, right = sorted((node_of_root[ra], node_of_root[rb]))
        node = n + pos
        merges.append(Merge(left, right, h, node))
        parent[rb] = ra
        node_of_root[ra] = node
    d = Dendrogram(n, tuple(merges))
    d.check_monotone()
    return d


def threshold_id(threshold: float) -> str:
    return f"t{threshold:g}"


def cluster_id_for(labels: Sequence[str]) -> str:
    h = hashlib.sha1("\n".join(sorted(labels)).encode("utf-8")).hexdigest()
    return f"c{h[:12]}"


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    members: tuple[int, ...]
    member_ids: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ClusterCut:
    threshold: float
    threshold_id: str
    clusters: tuple[Cluster, ...]

    @property
    def n_leaves(self) -> int:
        return sum(c.size for c in self.clusters)

    def labels(self) -> np.ndarray:
        """Cluster index per leaf, in cluster order."""
        out = np.full(self.n_leaves, -1, dtype=int)
        for i, c in enumerate(self.clusters):
            out[list(c.members)] = i
        return out

    def by_id(self) -> dict[str, Cluster]:
        return {c.cluster_id: c for c in self.clusters}

    def partition(self) -> set[frozenset[int]]:
        return {frozenset(c.members) for c in self.clusters}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"threshold": self.threshold, "threshold_id": self.threshold_id})]
        for c in self.clusters:
            lines.append(json.dumps({"cluster_id": c.cluster_id, "members": list(c.members),
                                     "member_ids": list(c.member_ids)}))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClusterCut":
        lines = [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
        head, rest = lines[0], lines[1:]
        clusters = tuple(Cluster(r["cluster_id"], tuple(r["members"]), tuple(r["member_ids"])) for r in rest)
        return cls(head["threshold"], head["threshold_id"], clusters)


def cut_dendrogram(d: Dendrogram, threshold: float, labels: Sequence[str] | None = None,
                   tid: str | None = None) -> ClusterCut:
    """Flat partition from applying every merge with height <= threshold.

    ``labels`` names the leaves (question ids); cluster ids hash the sorted
    labels, so they are stable across runs and input orderings.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    n = d.n_leaves
    if labels is None:
        labels = [str(i) for i in range(n)]
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} leaves")
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    # any leaf of a node identifies its component
    rep = list(range(n)) + [0] * (n - 1)
    for m in d.merges:
        rep[m.node] = rep[m.left]
        if m.height <= threshold:
            ra, rb = find(rep[m.left]), find(rep[m.right])
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    groups: dict[int, list[int]] = {}
    for leaf in range(n):
        groups.setdefault(find(leaf), []).append(leaf)
    clusters = []
    for root in sorted(groups, key=lambda r: groups[r][0]):
        members = tuple(groups[root])
        ids = tuple(labels[i] for i in members)
        clusters.append(Cluster(cluster_id_for(ids), members, ids))
    return ClusterCut(float(threshold), tid or threshold_id(threshold), tuple(clusters))


@dataclass(frozen=True)
class ClusterStats:
    n_leaves: int
    n_clusters: int
    mean_size: float
    std_size: float
    max_size: int
    silhouette: float | None

    def to_dict(self) -> dict:
        return {
            "n_leaves": self.n_leaves,
            "n_clusters": self.n_clusters,
            "mean_size": self.mean_size,
            "std_size": self.std_size,
            "max_size": self.max_size,
            "silhouette": self.silhouette,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterStats":
        return cls(**d)


def silhouette_samples(dist: np.ndarray, labels: np.ndarray, block: int = 1024) -> np.ndarray:
    """Per-point silhouette from a square distance matrix; singletons score 0."""
    labels = np.asarray(labels)
    _, lab = np.unique(labels, return_inverse=True)
    k = lab.max() + 1
    counts = np.bincount(lab, minlength=k).astype(float)
    n = lab.size
    out = np.zeros(n)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), lab] = 1.0
    for start in range(0, n, block):
        stop = min(start + block, n)
        sums = dist[start:stop] @ onehot  # (b, k) summed distance to each cluster
        own = lab[start:stop]
        rows = np.arange(stop - start)
        own_n = counts[own]
        a = np.where(own_n > 1, sums[rows, own] / np.maximum(own_n - 1, 1), 0.0)
        means = sums / counts
        means[rows, own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        s[own_n <= 1] = 0.0
        out[start:stop] = s
    return out


def cluster_stats(cut: ClusterCut, vectors=None, dist: np.ndarray | None = None) -> ClusterStats:
    """Size statistics and cosine silhouette for a cut.

    Pass either the leaf ``vectors`` or a precomputed cosine ``dist`` matrix.
    ``std_size`` is the population standard deviation.
    """
    sizes = np.array([c.size for c in cut.clusters], dtype=float)
    n = int(sizes.sum())
    k = sizes.size
    sil = None
    if 1 < k < n:
        if dist is None:
            if vectors is None:
                raise ValueError("need vectors or a distance matrix for the silhouette")
            dist = cosine_distance_matrix(vectors)
        if dist.shape[0] != n:
            raise ValueError(f"cut covers {n} leaves but {dist.shape[0]} vectors given")
        sil = float(silhouette_samples(dist, cut.labels()).mean())
    return ClusterStats(
        n_leaves=n,
        n_clusters=k,
        mean_size=n / k,
        std_size=float(sizes.std()),
        max_size=int(sizes.max()),
        silhouette=sil,
    )


# Reference statistics per task and threshold, for context only; they are
# reproducible only with the original embedding model and corpora.
REFERENCE_STATS = {
    "MedQA": [
        (0.177, 8414, 1.21, 0.63, 11, 0.079),
        (0.209, 7070, 1.44, 1.08, 18, 0.107),
        (0.244, 5390, 1.89, 1.83, 20, 0.127),
        (0.272, 4130, 2.46, 2.74, 38, 0.135),
        (0.325, 2198, 4.63, 6.34, 62, 0.128),
    ],
    "MMLULaw": [
        (0.246, 1048, 1.30, 0.79, 12, 0.083),
        (0.275, 872, 1.57, 1.29, 21, 0.101),
        (0.322, 586, 2.33, 2.67, 36, 0.101),
        (0.352, 410, 3.33, 4.45, 49, 0.099),
        (0.635, 3, 455.7, 639.5, 1360, 0.123),
    ],
    "MathQA": [
        (0.008, 29093, 1.03, 0.22, 7, 0.024),
        (0.063, 15949, 1.87, 1.88, 30, 0.387),
        (0.093, 12229, 2.44, 2.81, 61, 0.480),
        (0.154, 8509, 3.51, 4.97, 140, 0.539),
        (0.255, 4789, 6.23, 6.23, 786, 0.442),
    ],
}
