import pytest

from helpers import build_workspace
from instruction_corpus.backends import AnswerKeyChat, BackendConfig, HashEmbeddings, MockChat, auto_responder
from instruction_corpus.core import HS_CONCISE, ZERO_SHOT, Condition, EvalRecord, Split
from instruction_corpus.errors import ConfigError, MissingArtifact
from instruction_corpus.evalharness import (
    ExperimentPlan,
    aggregate,
    fmt_delta,
    length_profile,
    lengths_to_csv,
    plan_cells,
    run_plan,
    threshold_sweep,
)
from instruction_corpus.workspace import ResultsStore

CONDS = [ZERO_SHOT, Condition.parse("instructed:hs_concise"), Condition.parse("knowledge_only"),
         Condition.parse("reasoning_only")]


def plan(tids, models=("m1",), conditions=CONDS, tasks=("MedQA",), **kw):
    return ExperimentPlan(list(tasks), [BackendConfig(m, provider="mock") for m in models], list(conditions),
                          list(tids), BackendConfig("mock-embedding", provider="mock", options={"dim": 32}), **kw)


@pytest.fixture
def ws(tmp_path):
    return build_workspace(tmp_path / "ws")


def test_plan_validation_and_round_trip(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentPlan([], [BackendConfig("m")], CONDS, [])
    p = plan(["t0.5"])
    p.save(tmp_path / "plan.json")
    back = ExperimentPlan.load(tmp_path / "plan.json")
    assert back.to_dict() == p.to_dict()
    with pytest.raises(ConfigError):
        ExperimentPlan.from_dict({"tasks": ["x"]})


def test_cell_count(ws):
    w, _, questions, tids = ws
    p = plan(tids)
    cells = plan_cells(p, {"MedQA": w.questions("MedQA", Split.TEST)}, "m1")
    n_test = len(w.questions("MedQA", Split.TEST))
    assert len(cells) == n_test * (1 + 3 * len(tids))
    assert len({c.key for c in cells}) == len(cells)


def test_run_fills_store_and_resumes(ws):
    w, emb, questions, tids = ws
    chats = {"m1": MockChat(auto_responder(1), "m1"), "m2": MockChat(auto_responder(2), "m2")}
    p = plan(tids, models=("m1", "m2"))
    path = run_plan(p, w, chats, emb)
    records = ResultsStore(path).records()
    n_test = len(questions["MedQA"]) - 40
    assert len(records) == 2 * n_test * (1 + 3 * len(tids))
    before = path.read_bytes()
    again = {"m1": MockChat(auto_responder(1), "m1"), "m2": MockChat(auto_responder(2), "m2")}
    run_plan(p, w, again, emb)
    assert path.read_bytes() == before
    assert again["m1"].calls == 0 and again["m2"].calls == 0


def test_partial_results_are_completed(ws):
    w, emb, _, tids = ws
    p = plan(tids)
    run_plan(plan(tids, conditions=[ZERO_SHOT]), w, {"m1": MockChat(auto_responder(1), "m1")}, emb)
    chat = MockChat(auto_responder(1), "m1")
    path = run_plan(p, w, {"m1": chat}, emb)
    n_test = len(w.questions("MedQA", Split.TEST))
    assert chat.calls == n_test * 3 * len(tids)
    assert len(ResultsStore(path).records()) == n_test * (1 + 3 * len(tids))


def test_missing_store_is_reported(ws):
    w, emb, _, tids = ws
    with pytest.raises(MissingArtifact, match="instruction store"):
        run_plan(plan(tids, conditions=[Condition.parse("instructed:grad_verbose")]), w, {}, emb)
    with pytest.raises(MissingArtifact, match="retrieval index"):
        run_plan(plan(["t0.9"]), w, {}, emb)
    with pytest.raises(MissingArtifact, match="corpus"):
        run_plan(plan(tids, tasks=("MathQA",)), w, {}, emb)


def test_dry_run_makes_no_calls(ws, capsys):
    w, _, _, tids = ws
    chat = MockChat(auto_responder(0), "m1")
    emb = HashEmbeddings(32)
    path = run_plan(plan(tids), w, {"m1": chat}, emb, dry_run=True)
    assert chat.calls == 0 and emb.calls == 0 and not path.exists()
    assert "cells to run" in capsys.readouterr().out


def test_gold_mock_gives_perfect_accuracy(ws):
    w, emb, questions, tids = ws
    test_qs = w.questions("MedQA", Split.TEST)
    path = run_plan(plan(tids), w, {"m1": AnswerKeyChat(test_qs, model_name="m1")}, emb)
    table = aggregate(ResultsStore(path).records())
    assert all(r.accuracy == 1.0 and r.delta_vs_zeroshot == 0.0 for r in table.rows)


def _rec(model, cond, correct, i, task="MathQA", tid=""):
    c = Condition.parse(cond)
    tid = "" if c.is_zero_shot else (tid or "t1")
    return EvalRecord(f"q{i}", task, model, c, (), 10, "x", "A" if correct else None, correct, tid)


def _records(model, cond, k, n, **kw):
    return [_rec(model, cond, i < k, i, **kw) for i in range(n)]


def test_delta_fixture_small_model_row():
    recs = _records("llama3-1b", "zeroshot", 10, 100) + _records("llama3-1b", "instructed:hs_concise", 7, 100)
    t = aggregate(recs)
    row = t.lookup("MathQA", "llama3-1b", "instructed:hs_concise", "t1")
    zs = t.lookup("MathQA", "llama3-1b", "zeroshot")
    assert (f"{row.accuracy:.2f}", f"{zs.accuracy:.2f}", fmt_delta(row.delta_vs_zeroshot)) == ("0.07", "0.10", "-0.03")
    assert zs.delta_vs_zeroshot == 0.0


def test_delta_uses_unrounded_accuracies():
    recs = _records("m", "zeroshot", 734, 1000) + _records("m", "instructed:hs_concise", 826, 1000)
    row = aggregate(recs).lookup("MathQA", "m", "instructed:hs_concise", "t1")
    assert f"{row.accuracy:.2f}" == "0.83"
    assert fmt_delta(row.delta_vs_zeroshot) == "+0.09"  # 0.83 - 0.73 would print +0.10


def test_delta_missing_without_zero_shot():
    row = aggregate(_records("m", "instructed:hs_concise", 1, 2)).rows[0]
    assert row.delta_vs_zeroshot is None and fmt_delta(None) == ""


def test_fmt_delta_no_negative_zero():
    assert fmt_delta(-0.0001) == "+0.00"
    assert fmt_delta(-0.031) == "-0.03"
    assert fmt_delta(0.2) == "+0.20"


def test_table_renderings():
    t = aggregate(_records("m", "zeroshot", 1, 4) + _records("m", "instructed:hs_concise", 3, 4))
    csv_text = t.to_csv()
    assert csv_text.splitlines()[0] == "task,model_id,condition,threshold_id,n,correct,accuracy,delta_vs_zeroshot"
    text = t.to_text()
    assert "+0.50" in text and "0.75" in text


def test_threshold_sweep(ws):
    w, emb, _, tids = ws
    chats = {"m1": MockChat(auto_responder(1), "m1")}
    table = threshold_sweep(plan(tids), w, "MedQA", tids, chat_backends=chats, embedder=emb)
    assert [r[0] for r in table.rows] == tids
    sizes = [r[1] for r in table.rows]
    assert sizes == sorted(sizes)
    assert table.to_csv().startswith("threshold_id,mean_cluster_size,m1")


def test_length_profile(ws):
    w, _, _, _ = ws
    rows = length_profile([("MedQA", s) for s in w.stores("MedQA")])
    assert {r.variant for r in rows} == {HS_CONCISE.slug}
    r = rows[0]
    assert r.p10 <= r.median <= r.p90 and r.n > 0
    assert lengths_to_csv(rows).startswith("task,variant,n,mean,median,p10,p90")
