"""Builders for small on-disk workspaces used across the test modules."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from instruction_corpus.backends import HashEmbeddings, MockChat, auto_responder
from instruction_corpus.cluster import build_dendrogram, cluster_stats, cut_dendrogram, threshold_id
from instruction_corpus.core import HS_CONCISE, Split, save_questions
from instruction_corpus.infer import query_text
from instruction_corpus.instructgen import generate_corpus
from instruction_corpus.retrieve import build_index
from instruction_corpus.synthetic import make_questions
from instruction_corpus.workspace import Workspace


def build_workspace(root: str | Path, tasks=("MedQA",), n_train=40, n_test=10, thresholds=(0.5, 0.7),
                    variants=(HS_CONCISE,), seed=0, dim=32):
    ws = Workspace(root)
    embedder = HashEmbeddings(dim=dim, seed=seed, cache=ws.cache)
    gen = MockChat(auto_responder(seed), "mock-gen")
    questions = {}
    for task in tasks:
        qs = make_questions(task, n_train, n_test, seed)
        questions[task] = qs
        save_questions(ws.corpus_path(task), qs)
        train = [q for q in qs if q.split == Split.TRAIN]
        vecs = embedder.embed_batch([query_text(q) for q in train])
        d = build_dendrogram(vecs)
        d.save(ws.dendrogram_path(task))
        X = np.stack([v.array for v in vecs])
        by_q = {q.id: v for q, v in zip(train, vecs)}
        qmap = {q.id: q for q in train}
        for thr in thresholds:
            tid = threshold_id(thr)
            cut = cut_dendrogram(d, thr, [q.id for q in train], tid)
            cut.save(ws.cut_path(task, tid))
            ws.save_stats(task, tid, cluster_stats(cut, X))
            build_index(cut, by_q).save(ws.index_dir(task, tid))
            for v in variants:
                generate_corpus(cut, v, qmap, gen, ws.store(task, tid, v, must_exist=False), seed)
    return ws, embedder, questions, [threshold_id(t) for t in thresholds]


PIPELINE = """\
seed: {seed}
output_root: work
tasks:
  medqa:
    corpus: medqa.jsonl
    thresholds: [0.5, 0.7]
embedding: {{model_name: mock-embed, provider: mock, options: {{dim: 32}}}}
generator: {{model_name: mock-gen, provider: mock}}
judge: {{model_name: mock-judge, provider: mock}}
models:
  - {{model_name: small-a, provider: mock}}
  - {{model_name: small-b, provider: mock, options: {{seed: 3}}}}
  - {{model_name: small-c, provider: mock, options: {{seed: 5}}}}
  - {{model_name: small-d, provider: mock, options: {{seed: 9}}}}
registry:
  small-a: {{family: llama3, size_b: 1}}
  small-b: {{family: qwen3, size_b: 4}}
  small-c: {{family: llama3, size_b: 3}}
  small-d: {{family: qwen3, size_b: 8}}
variants: [baseline, hs_concise, hs_verbose, grad_concise, grad_verbose]
conditions: [zeroshot, instructed:baseline, instructed:hs_concise, instructed:hs_verbose,
             instructed:grad_concise, instructed:grad_verbose, knowledge_only, reasoning_only]
judge_repeats: 2
"""

STAGES = [["ingest"], ["embed"], ["cluster"], ["gen"], ["index"], ["run"], ["aggregate"], ["judge"],
          ["lengths"], ["export"], ["analyze"]]


def write_project(root: str | Path, seed=7, n_train=40, n_test=12) -> Path:
    """A mock-backed project directory; returns the config path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_questions(root / "medqa.jsonl", make_questions("MedQA", n_train, n_test, seed))
    path = root / "pipeline.yaml"
    path.write_text(PIPELINE.format(seed=seed), encoding="utf-8")
    return path


def run_cli(config: Path, *args):
    from click.testing import CliRunner

    from instruction_corpus.cli import main

    return CliRunner().invoke(main, ["--config", str(config), *args], catch_exceptions=False)
