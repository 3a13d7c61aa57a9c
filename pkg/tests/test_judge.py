import itertools
import json

import pytest

from instruction_corpus.backends import MockChat, auto_responder, canned_chat, scripted_chat
from instruction_corpus.core import GRAD_CONCISE, HS_CONCISE, Instruction, reconstruct
from instruction_corpus.errors import JudgeParseError, NetworkError
from instruction_corpus.judge import (
    CRITERIA,
    FLAGS,
    RubricScore,
    apply_caps,
    average_runs,
    judge_corpus,
    judge_instruction,
    judge_prompt,
    parse_judgement,
)

INSTR = Instruction("c1", HS_CONCISE, "facts", "1. step", reconstruct("facts", "1. step"))


def payload(scores=(5, 5, 5, 5, 5), **flags):
    d = dict(zip(CRITERIA, scores))
    d.update({f: flags.get(f, False) for f in FLAGS})
    return json.dumps(d)


def test_score_range_validated():
    with pytest.raises(ValueError):
        RubricScore(0, 5, 5, 5, 5)
    with pytest.raises(ValueError):
        RubricScore(True, 5, 5, 5, 5)
    with pytest.raises(ValueError):
        RubricScore(4.5, 5, 5, 5, 5)


def test_factual_error_caps_accuracy_only():
    s = apply_caps(RubricScore(5, 5, 5, 5, 5, factual_error_in_steps=True))
    assert s.scores == (5, 5, 2, 5, 5)


def test_no_flags_identity():
    s = RubricScore(3, 4, 5, 2, 1)
    assert apply_caps(s) == s


def test_caps_only_lower():
    s = apply_caps(RubricScore(2, 5, 5, 5, 5, required_step_missing=True))
    assert s.knowledge_comprehensiveness == 2 and s.reasoning_relevance == 2


def test_other_caps():
    assert apply_caps(RubricScore(5, 5, 5, 5, 5, background_mostly_tangential=True)).scores == (5, 2, 5, 5, 5)
    assert apply_caps(RubricScore(5, 5, 5, 5, 5, step_boundaries_unclear=True)).scores == (5, 5, 5, 5, 3)
    assert apply_caps(RubricScore(5, 5, 5, 5, 5, required_step_missing=True)).scores == (3, 5, 5, 2, 5)


def test_caps_sample_sweep():
    # the exhaustive sweep lives in the acceptance suite
    for scores in itertools.product((1, 3, 5), repeat=5):
        for flags in itertools.product((False, True), repeat=4):
            s = RubricScore(*scores, *flags)
            c = apply_caps(s)
            assert all(a <= b for a, b in zip(c.scores, s.scores))
            assert apply_caps(c) == c


def test_prompt_contains_rubric_and_schema():
    p = judge_prompt(INSTR)
    for name in CRITERIA + FLAGS:
        assert f'"{name}"' in p
    for title in ("Knowledge Comprehensiveness", "Knowledge Relevance", "Reasoning Accuracy",
                  "Reasoning Relevance", "Clarity"):
        assert title in p
    assert INSTR.raw in p


def test_parse_judgement():
    s = parse_judgement("Here:\n" + payload((4, 3, 5, 2, 1), step_boundaries_unclear=True) + "\nthanks")
    assert s.scores == (4, 3, 5, 2, 1) and s.step_boundaries_unclear
    for bad in ["no json", "{not json}", payload((7, 5, 5, 5, 5)), '{"clarity": 5}', "[1, 2]",
                payload().replace("false", '"no"', 1)]:
        with pytest.raises(JudgeParseError):
            parse_judgement(bad)


def test_constant_judge_three_repeats():
    chat = canned_chat(payload())
    j = judge_instruction(INSTR, chat, repeats=3)
    assert j.averaged == (5.0,) * 5 and len(j.runs) == 3 and chat.calls == 3


def test_alternating_judge_averages():
    chat = scripted_chat([payload((4,) * 5), payload((5,) * 5)])
    assert judge_instruction(INSTR, chat, repeats=2).averaged == (4.5,) * 5


def test_caps_applied_before_averaging():
    chat = scripted_chat([payload(factual_error_in_steps=True), payload()])
    j = judge_instruction(INSTR, chat, repeats=2)
    assert j.averaged[2] == 3.5


def test_averaging_permutation_invariant():
    a, b, c = RubricScore(1, 2, 3, 4, 5), RubricScore(5, 4, 3, 2, 1), RubricScore(3, 3, 3, 3, 3)
    assert average_runs([a, b, c]) == average_runs([c, a, b])


def test_one_reask_then_fail():
    chat = scripted_chat(["garbage", payload((3,) * 5)])
    assert judge_instruction(INSTR, chat, repeats=1).averaged == (3.0,) * 5
    assert "could not be used" in chat.log[1].user
    with pytest.raises(JudgeParseError):
        judge_instruction(INSTR, scripted_chat([payload((7,) * 5)]), repeats=1)


def test_repeats_must_be_positive():
    with pytest.raises(ValueError):
        judge_instruction(INSTR, canned_chat(payload()), repeats=0)


def test_corpus_summary_by_variant(tmp_path):
    a = Instruction("c1", GRAD_CONCISE, "a", "1. a", reconstruct("a", "1. a"))
    b = Instruction("c2", GRAD_CONCISE, "b", "1. b", reconstruct("b", "1. b"))

    def respond(req):
        return payload((4,) * 5) if "1. a" in req.user else payload((5,) * 5)

    summary = judge_corpus([a, b], MockChat(respond), repeats=1)
    [row] = summary.rows
    assert (row.audience.value, row.length.value, row.n) == ("Graduate", "Concise", 2)
    assert row.means == (4.5,) * 5
    csv_text = summary.to_csv(tmp_path / "q.csv")
    assert csv_text.splitlines()[0] == ("Audience,Length,N,Knowledge Comp.,Knowledge Rel.,Reasoning Acc.,"
                                        "Reasoning Rel.,Clarity")
    summary.write_judged(tmp_path / "j.jsonl")
    assert len((tmp_path / "j.jsonl").read_text().splitlines()) == 2


def test_corpus_collects_failures():
    bad = Instruction("c9", HS_CONCISE, "z", "1. z", reconstruct("z", "1. z"))

    def respond(req):
        if "1. z" in req.user:
            raise NetworkError("down")
        return payload()

    summary = judge_corpus([INSTR, bad], MockChat(respond), repeats=1)
    assert list(summary.failures) == ["hs_concise/c9"] and len(summary.judged) == 1


def test_auto_mock_judge_parses():
    j = judge_instruction(INSTR, MockChat(auto_responder(0)), repeats=3)
    assert all(4 <= x <= 5 for x in j.averaged)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        judge_corpus([], canned_chat(payload()))
