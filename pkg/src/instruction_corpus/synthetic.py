"""Seeded toy corpora for demos and tests.

Questions are drawn from a handful of topics with disjoint vocabularies, so
hash embeddings place same-topic questions close together and clustering
recovers the topics.
"""
from __future__ import annotations

import random

from .core import LABELS, Question, Split

TOPICS = {
    "cardio": "heart murmur valve systolic aortic chest pain ejection",
    "renal": "kidney creatinine nephron filtration urine sodium potassium",
    "neuro": "seizure neuron cortex stroke aphasia reflex spinal",
    "contracts": "offer acceptance consideration breach contract damages promise",
    "torts": "negligence duty injury liability plaintiff defendant harm",
    "algebra": "equation solve variable quadratic root coefficient polynomial",
    "rates": "speed distance hours train travels rate minutes",
}


def make_questions(task: str, n_train: int, n_test: int, seed: int = 0,
                   topics: dict[str, str] | None = None, n_options: int = 4) -> list[Question]:
    topics = topics or TOPICS
    rng = random.Random(f"{task}:{seed}")
    names = sorted(topics)
    out = []
    for split, n in ((Split.TRAIN, n_train), (Split.TEST, n_test)):
        for i in range(n):
            topic = names[i % len(names)]
            words = topics[topic].split()
            stem = f"{' '.join(rng.choices(words, k=8))} ({split.value} {i})"
            options = tuple((LABELS[j], f"{rng.choice(words)} {j}") for j in range(n_options))
            gold = LABELS[rng.randrange(n_options)]
            out.append(Question(f"{task.lower()}-{split.value}-{i:04d}", task, split, stem, options, gold))
    return out
