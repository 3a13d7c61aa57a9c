"""
Clustering training questions
=============================

"""

# a toy corpus: seven topics with disjoint vocabularies
from collections import Counter

import numpy as np

from instruction_corpus.backends import HashEmbeddings
from instruction_corpus.cluster import build_dendrogram, cluster_stats, cut_dendrogram
from instruction_corpus.core import Split
from instruction_corpus.infer import query_text
from instruction_corpus.synthetic import TOPICS, make_questions

questions = make_questions("MedQA", n_train=70, n_test=0, seed=0)
train = [q for q in questions if q.split == Split.TRAIN]
print(len(train), "training questions")
print(train[0].stem)

# hash embeddings: texts sharing words land close together
embedder = HashEmbeddings(dim=64)
vectors = embedder.embed_batch([query_text(q) for q in train])
X = np.stack([v.array for v in vectors])

# one dendrogram, many cuts
dendrogram = build_dendrogram(X)
print("merge heights from", round(dendrogram.heights.min(), 3), "to", round(dendrogram.heights.max(), 3))

ids = [q.id for q in train]
for thr in (0.2, 0.5, 0.8, 1.0):
    cut = cut_dendrogram(dendrogram, thr, ids)
    stats = cluster_stats(cut, X)
    sil = "n/a" if stats.silhouette is None else f"{stats.silhouette:.3f}"
    print(f"{cut.threshold_id:>6}: {stats.n_clusters:3d} clusters, mean size {stats.mean_size:5.2f}, silhouette {sil}")

# the topics come back: questions cycle through topics in sorted order
topic_of = {q.id: sorted(TOPICS)[i % len(TOPICS)] for i, q in enumerate(train)}
cut = cut_dendrogram(dendrogram, 0.5, ids)
for cl in cut.clusters:
    print(cl.cluster_id, cl.size, Counter(topic_of[m] for m in cl.member_ids).most_common(2))
