"""
A harness with no noise
=======================

"""

# two answer-key mocks: one always right, one right only when an instruction is in the prompt
import tempfile
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from helpers import build_workspace  # noqa: E402

from instruction_corpus.backends import AnswerKeyChat, BackendConfig  # noqa: E402
from instruction_corpus.core import Condition, Split  # noqa: E402
from instruction_corpus.evalharness import ExperimentPlan, aggregate, run_plan  # noqa: E402
from instruction_corpus.workspace import ResultsStore  # noqa: E402

ws, embedder, questions, tids = build_workspace(tempfile.mkdtemp(), tasks=("MedQA", "MathQA"), n_train=40, n_test=20)
test = [q for qs in questions.values() for q in qs if q.split == Split.TEST]

conditions = [Condition.parse(c) for c in ("zeroshot", "instructed:hs_concise", "knowledge_only", "reasoning_only")]
plan = ExperimentPlan(["MedQA", "MathQA"],
                      [BackendConfig("gold", provider="mock"), BackendConfig("gated", provider="mock")],
                      conditions, tids, BackendConfig("mock-embedding", provider="mock", options={"dim": 32}))
chats = {"gold": AnswerKeyChat(test, model_name="gold"),
         "gated": AnswerKeyChat(test, require_instruction=True, model_name="gated")}

path = run_plan(plan, ws, chats, embedder)
table = aggregate(ResultsStore(path).records())

# gold: 1.00 everywhere with zero deltas; gated: 0.00 zero-shot, +1.00 whenever instructions appear
print(table.to_text())

# rerunning is free: every cell is already in the results store
again = {"gold": AnswerKeyChat(test, model_name="gold"), "gated": AnswerKeyChat(test, model_name="gated")}
run_plan(plan, ws, again, embedder)
print("calls on rerun:", sum(c.calls for c in again.values()))
