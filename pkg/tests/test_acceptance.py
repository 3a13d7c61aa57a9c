"""Acceptance criteria, one test per criterion.

Each test records a ``PASS`` or ``FAIL`` line (printed in the pytest summary)
and then asserts, so a failed criterion also fails the run.
"""
import itertools
import math
import random
import time

import numpy as np
import pytest

import conftest
import oracles
from helpers import STAGES, build_workspace, run_cli, write_project
from instruction_corpus.analyze import fit_logistic, log_likelihood, marginal_effects, sigmoid
from instruction_corpus.backends import AnswerKeyChat, BackendConfig
from instruction_corpus.cluster import (
    build_dendrogram,
    cosine_distance_matrix,
    cut_dendrogram,
    linkage_from_distances,
    silhouette_samples,
)
from instruction_corpus.core import (
    BACKGROUND_HEADER,
    HS_CONCISE,
    REASONING_HEADER,
    VARIANTS,
    Condition,
    EvalRecord,
    Instruction,
    Question,
    Split,
    reconstruct,
)
from instruction_corpus.errors import BudgetInfeasible
from instruction_corpus.evalharness import ExperimentPlan, aggregate, fmt_delta, run_plan
from instruction_corpus.infer import PromptBudget, assemble_prompt, count_tokens, zero_shot_prompt
from instruction_corpus.instructgen import parse_instruction
from instruction_corpus.judge import RubricScore, apply_caps
from instruction_corpus.retrieve import build_index, top_k
from instruction_corpus.templates import TEMPLATES
from instruction_corpus.workspace import ResultsStore


def verdict(n: int, title: str, ok: bool, detail: str = ""):
    line = f"criterion {n}. {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    conftest.VERDICTS.append(line)
    print(line)
    assert ok, line


def test_1_clustering_oracle():
    rng = np.random.default_rng(1001)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(2, 13))
        x = rng.normal(size=(n, int(rng.integers(2, 8))))
        ours = build_dendrogram(x).heights
        ref = [h for _, _, h in oracles.average_linkage(oracles.cosine_dist_matrix(x))]
        worst = max(worst, float(np.max(np.abs(np.asarray(ours) - ref))))
    elapsed = time.perf_counter() - start
    verdict(1, "merge heights match brute-force average linkage", worst <= 1e-9 and elapsed < 10,
            f"max |dh| {worst:.1e}, {elapsed:.2f} s")


def test_2_cut_properties():
    rng = np.random.default_rng(1002)
    failures = []
    for trial in range(1000):
        n = int(rng.integers(2, 25))
        d = linkage_from_distances(cosine_distance_matrix(rng.normal(size=(n, 4))))
        hmax = float(d.heights.max())
        if len(cut_dendrogram(d, 0.0).clusters) != n:
            failures.append((trial, "threshold 0"))
        if len(cut_dendrogram(d, hmax).clusters) != 1 or len(cut_dendrogram(d, hmax + 1).clusters) != 1:
            failures.append((trial, "max height"))
        parts = [cut_dendrogram(d, float(t)).partition() for t in np.sort(rng.uniform(0, hmax, 5))]
        for p in parts:
            members = sorted(m for c in p for m in c)
            if members != list(range(n)):
                failures.append((trial, "partition"))
        for fine, coarse in zip(parts, parts[1:]):
            if not all(any(c <= big for big in coarse) for c in fine):
                failures.append((trial, "coarsening"))
    verdict(2, "cut coarsening, partition validity and extremes on 1000 dendrograms", not failures,
            f"{len(failures)} violations")


def test_3_silhouette():
    angles = np.deg2rad([0, 60, 180, 240])
    four = np.column_stack([np.cos(angles), np.sin(angles)])
    # within pair d = 0.5; across pairs 1.5 and 2.0; s = (1.75 - 0.5) / 1.75
    fixture = np.max(np.abs(silhouette_samples(cosine_distance_matrix(four), np.array([0, 0, 1, 1])) - 5 / 7))
    rng = np.random.default_rng(1003)
    in_range = True
    for _ in range(500):
        n = int(rng.integers(3, 30))
        labels = rng.integers(0, int(rng.integers(2, 6)), size=n)
        if len(set(labels)) < 2:
            labels[0] = labels[0] + 1
        s = silhouette_samples(cosine_distance_matrix(rng.normal(size=(n, 3))), labels)
        in_range &= bool(np.all((s >= -1) & (s <= 1)))
    s = silhouette_samples(cosine_distance_matrix(np.array([[1, 0], [1, 0.2], [0, 1.0]])), np.array([0, 0, 1]))
    verdict(3, "silhouette fixture, range and singleton convention",
            fixture <= 1e-9 and in_range and s[2] == 0.0, f"fixture err {fixture:.1e}")


def test_4_retrieval_oracle():
    rng = np.random.default_rng(1004)
    mismatches = props = 0
    for _ in range(500):
        n, dim = int(rng.integers(2, 40)), int(rng.integers(2, 9))
        x = rng.normal(size=(n, dim))
        ids = [f"q{i}" for i in range(n)]
        cut = cut_dendrogram(build_dendrogram(x), float(rng.uniform(0.1, 1.5)), ids)
        emb = dict(zip(ids, x))
        index = build_index(cut, emb)
        q = rng.normal(size=dim)
        k = int(rng.integers(1, len(index) + 2))
        ours = top_k(index, q, k)
        ref = oracles.centroid_topk({c.cluster_id: [emb[m] for m in c.member_ids] for c in cut.clusters}, q, k)
        if [c for c, _ in ours] != [c for c, _ in ref] or not np.allclose([s for _, s in ours], [s for _, s in ref],
                                                                          atol=1e-12):
            mismatches += 1
        scaled = top_k(index, float(rng.uniform(0.01, 100)) * q, k)
        full = top_k(index, q, len(index))
        if [c for c, _ in scaled] != [c for c, _ in ours] or full[: len(ours)] != ours:
            props += 1
    verdict(4, "top-k equals exhaustive ranking; scale invariance and prefix containment",
            mismatches == 0 and props == 0, f"{mismatches} order mismatches, {props} property failures")


Q = Question("q", "MedQA", "test", "Which valve is affected?", (("A", "aortic"), ("B", "mitral"), ("C", "tricuspid"),
                                                               ("D", "pulmonary")), "B")


def _instr(i, size):
    bg, rs = f"fact {i} " + "x" * size, f"1. step {i}"
    return Instruction(f"c{i}", HS_CONCISE, bg, rs, reconstruct(bg, rs))


def test_5_prompt_budget():
    rng = random.Random(1005)
    violations = 0
    for _ in range(3000):
        ranked = [_instr(i, rng.randint(0, 400)) for i in range(rng.randint(0, 7))]
        limit = rng.randint(40, 1200)
        budget = PromptBudget(limit, rng.randint(1, limit - 1))
        try:
            p = assemble_prompt(Q, ranked, budget)
        except BudgetInfeasible:
            violations += count_tokens(zero_shot_prompt(Q)) + budget.reserved_output_tokens <= limit
            continue
        violations += p.token_count + budget.reserved_output_tokens > limit
        violations += p.instructions_used != tuple(x.cluster_id for x in ranked[: len(p.instructions_used)])
    # top-5 -> top-4: a limit admitting exactly four instruction blocks
    five = [_instr(i, 300) for i in range(1, 6)]
    parts = [f"### Instruction {i}\n{x.raw}" for i, x in enumerate(five, 1)] + [zero_shot_prompt(Q)]
    need4 = math.ceil(len("\n\n".join(parts[:4] + parts[5:]).encode()) / 4)
    p = assemble_prompt(Q, five, PromptBudget(need4 + 512, 512))
    top4 = p.instructions_used == ("c1", "c2", "c3", "c4") and p.token_count == need4
    verdict(5, "budget invariant and ranking prefix; top-5 truncated to top-4", violations == 0 and top4,
            f"{violations} violations on 3000 budgets")


SENTINELS = ["Your response must contain exactly these two sections with these exact headers:",
             "## Background Knowledge", "## Reasoning Steps", "Here are the examples to analyze:"]


def test_6_template_fidelity():
    present = all(s in TEMPLATES[v] for v in VARIANTS for s in SENTINELS) and len(TEMPLATES) == 5
    rng = random.Random(1006)
    alphabet = "abcdefghij klmnop-*:0123456789#()é"

    def body():
        lines = []
        for _ in range(rng.randint(1, 5)):
            line = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 30))).strip()
            lines.append(line or "x")
        return "\n".join(l for l in lines if l not in (BACKGROUND_HEADER, REASONING_HEADER)) or "x"

    kept = 0
    for _ in range(100):
        bg, rs = body(), body()
        pre = rng.choice(["", "Sure.\n\n", "Here is the guide:\n"])
        instr = parse_instruction(f"{pre}{BACKGROUND_HEADER}\n{bg}\n\n{REASONING_HEADER}\n{rs}\n", "c", HS_CONCISE)
        again = parse_instruction(instr.raw, "c", HS_CONCISE)
        kept += (instr.background, instr.reasoning) == (again.background, again.reasoning) == (bg, rs)
    verdict(6, "templates carry sentinel lines; render/parse round trip", present and kept == 100,
            f"{kept}/100 round trips")


# cap table restated as data: flag -> {score field: ceiling}
CAPS = {
    "factual_error_in_steps": {"reasoning_accuracy": 2},
    "required_step_missing": {"reasoning_relevance": 2, "knowledge_comprehensiveness": 3},
    "background_mostly_tangential": {"knowledge_relevance": 2},
    "step_boundaries_unclear": {"clarity": 3},
}
FIELDS = ["knowledge_comprehensiveness", "knowledge_relevance", "reasoning_accuracy", "reasoning_relevance", "clarity"]


def test_7_rubric_caps():
    bad = cases = 0
    for scores in itertools.product(range(1, 6), repeat=5):
        for flags in itertools.product((False, True), repeat=4):
            cases += 1
            raw = RubricScore(*scores, *flags)
            capped = apply_caps(raw)
            expected = dict(zip(FIELDS, scores))
            for flag, on in zip(CAPS, flags):
                if on:
                    for field, ceiling in CAPS[flag].items():
                        expected[field] = min(expected[field], ceiling)
            bad += [getattr(capped, f) for f in FIELDS] != [expected[f] for f in FIELDS] or apply_caps(capped) != capped
    verdict(7, "cap rules and idempotence on the exhaustive sweep", bad == 0 and cases == 5**5 * 2**4,
            f"{cases} cases, {bad} wrong")


def test_8_harness_null(tmp_path):
    start = time.perf_counter()
    tasks = ("MedQA", "MMLULaw", "MathQA")
    ws, emb, questions, tids = build_workspace(tmp_path / "ws", tasks=tasks, n_train=60, n_test=50)
    test_qs = [q for t in tasks for q in questions[t] if q.split == Split.TEST]
    conds = [Condition.parse(c) for c in ("zeroshot", "instructed:hs_concise", "knowledge_only", "reasoning_only")]
    plan = ExperimentPlan(list(tasks), [BackendConfig("gold", provider="mock"), BackendConfig("gated", provider="mock")],
                          conds, list(tids), BackendConfig("mock-embedding", provider="mock", options={"dim": 32}))
    chats = {"gold": AnswerKeyChat(test_qs, model_name="gold"),
             "gated": AnswerKeyChat(test_qs, require_instruction=True, model_name="gated")}
    records = ResultsStore(run_plan(plan, ws, chats, emb)).records()
    elapsed = time.perf_counter() - start
    table = aggregate(records)
    gold = [r for r in table.rows if r.model_id == "gold"]
    gated = [r for r in table.rows if r.model_id == "gated"]
    ok_gold = all(r.accuracy == 1.0 and r.delta_vs_zeroshot == 0.0 for r in gold)
    ok_gated = all((r.accuracy, r.delta_vs_zeroshot) == ((0.0, 0.0) if r.condition == "zeroshot" else (1.0, 1.0))
                   for r in gated)
    cells = len(records) == 3 * 2 * 50 * (1 + 3 * len(tids)) and all(r.n == 50 for r in table.rows)
    verdict(8, "null harness: gold mock 1.000/+0.000, gated mock +1.000", ok_gold and ok_gated and cells
            and elapsed < 60, f"{len(records)} records, {elapsed:.1f} s")


def _recs(model, cond, k, n, task="MathQA"):
    c = Condition.parse(cond)
    tid = "" if c.is_zero_shot else "t1"
    return [EvalRecord(f"q{i}", task, model, c, (), 10, "x", "A" if i < k else None, i < k, tid) for i in range(n)]


def test_9_delta_arithmetic():
    t = aggregate(_recs("llama3-1b", "zeroshot", 10, 100) + _recs("llama3-1b", "instructed:hs_concise", 7, 100))
    row = t.lookup("MathQA", "llama3-1b", "instructed:hs_concise", "t1")
    zs = t.lookup("MathQA", "llama3-1b", "zeroshot")
    small = (f"{row.accuracy:.2f}", f"{zs.accuracy:.2f}", fmt_delta(row.delta_vs_zeroshot)) == ("0.07", "0.10", "-0.03")
    # 0.826 - 0.734 = 0.092 -> +0.09, while the rounded columns 0.83 - 0.73 give 0.10
    t = aggregate(_recs("m", "zeroshot", 734, 1000) + _recs("m", "instructed:hs_concise", 826, 1000))
    r = t.lookup("MathQA", "m", "instructed:hs_concise", "t1")
    rounding = fmt_delta(r.delta_vs_zeroshot) == "+0.09" and f"{r.accuracy:.2f}" == "0.83"
    verdict(9, "delta sign and rounding convention", small and rounding and zs.delta_vs_zeroshot == 0.0)


def test_10_regression():
    y = np.array([1] * 7 + [0] * 3, dtype=float)
    closed = abs(fit_logistic(np.ones((10, 1)), y).beta[0] - math.log(0.7 / 0.3))
    rng = np.random.default_rng(1010)
    worst_grad = 0.0
    for _ in range(50):
        n, p = int(rng.integers(80, 400)), int(rng.integers(2, 6))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
        yy = (rng.random(n) < sigmoid(X @ rng.normal(scale=0.8, size=p))).astype(float)
        fit = fit_logistic(X, yy)
        h = 1e-5
        fd = [(log_likelihood(fit.beta + h * e, X, yy) - log_likelihood(fit.beta - h * e, X, yy)) / (2 * h)
              for e in np.eye(p)]
        worst_grad = max(worst_grad, float(np.max(np.abs(fd))))
    n = 5000
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.normal(size=n), rng.integers(0, 2, n)])
    beta = np.array([-0.4, 0.9, -0.6, 0.5])
    yy = (rng.random(n) < sigmoid(X @ beta)).astype(float)
    fit = fit_logistic(X, yy, ["intercept", "b1", "c", "b2"])
    recovered = bool(np.all(np.abs(fit.beta - beta) < 3 * fit.stderr))
    me = marginal_effects(fit, X)
    ame_err = max(abs(me["b1"] - 100 * oracles.ame_binary(fit.beta, X, 1)),
                  abs(me["b2"] - 100 * oracles.ame_binary(fit.beta, X, 3)),
                  abs(me["c"] - 100 * oracles.ame_continuous(fit.beta, X, 2))) / 100
    verdict(10, "closed form, gradient at optimum, beta recovery, marginal effects",
            closed <= 1e-9 and worst_grad <= 1e-6 and recovered and ame_err <= 1e-12,
            f"logit err {closed:.1e}, max fd grad {worst_grad:.1e}, AME err {ame_err:.1e}")


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_11_end_to_end_determinism(tmp_path):
    snaps = []
    for name in ("a", "b"):
        cfg = write_project(tmp_path / name, seed=11)
        for stage in STAGES:
            res = run_cli(cfg, *stage)
            assert res.exit_code == 0, (stage, res.output)
        snaps.append(_snapshot(tmp_path / name / "work"))
    same = snaps[0] == snaps[1]
    diff = sorted(k for k in snaps[0] if snaps[0][k] != snaps[1].get(k))
    verdict(11, "two seeded ingest-to-analyze runs give byte-identical stores",
            same and "results/results.jsonl" in snaps[0], f"{len(snaps[0])} files" + (f", differ: {diff}" if diff else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
