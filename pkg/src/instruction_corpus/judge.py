"""Rubric-based instruction scoring with a judge model.

The judge reports raw 1-5 scores plus four boolean flags; the cap rules are
applied here, never delegated to the model.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backends import ChatBackend, ChatRequest
from .core import Audience, Instruction, InstructionVariant, Length, dumps_line
from .errors import BackendError, JudgeParseError

log = logging.getLogger(__name__)

CRITERIA = (
    "knowledge_comprehensiveness",
    "knowledge_relevance",
    "reasoning_accuracy",
    "reasoning_relevance",
    "clarity",
)
FLAGS = (
    "factual_error_in_steps",
    "required_step_missing",
    "background_mostly_tangential",
    "step_boundaries_unclear",
)
DISPLAY = {
    "knowledge_comprehensiveness": "Knowledge Comp.",
    "knowledge_relevance": "Knowledge Rel.",
    "reasoning_accuracy": "Reasoning Acc.",
    "reasoning_relevance": "Reasoning Rel.",
    "clarity": "Clarity",
}


@dataclass(frozen=True)
class RubricScore:
    knowledge_comprehensiveness: int
    knowledge_relevance: int
    reasoning_accuracy: int
    reasoning_relevance: int
    clarity: int
    factual_error_in_steps: bool = False
    required_step_missing: bool = False
    background_mostly_tangential: bool = False
    step_boundaries_unclear: bool = False

    def __post_init__(self):
        for name in CRITERIA:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or not 1 <= v <= 5:
                raise ValueError(f"{name} must be an integer in 1..5, got {v!r}")

    @property
    def scores(self) -> tuple[int, ...]:
        return tuple(getattr(self, n) for n in CRITERIA)

    def to_dict(self) -> dict:
        return {n: getattr(self, n) for n in CRITERIA + FLAGS}

    @classmethod
    def from_dict(cls, d: dict) -> "RubricScore":
        return cls(**{n: d[n] for n in CRITERIA}, **{f: bool(d.get(f, False)) for f in FLAGS})


def apply_caps(score: RubricScore) -> RubricScore:
    """Enforce the global decision rules; caps only ever lower a score."""
    s = score
    if s.factual_error_in_steps:
        s = replace(s, reasoning_accuracy=min(s.reasoning_accuracy, 2))
    if s.required_step_missing:
        s = replace(s, reasoning_relevance=min(s.reasoning_relevance, 2),
                    knowledge_comprehensiveness=min(s.knowledge_comprehensiveness, 3))
    if s.background_mostly_tangential:
        s = replace(s, knowledge_relevance=min(s.knowledge_relevance, 2))
    if s.step_boundaries_unclear:
        s = replace(s, clarity=min(s.clarity, 3))
    return s


RUBRIC = """\
Knowledge Comprehensiveness
  5: All background facts needed for typical instances are present, including key definitions, edge cases, and disambiguations.
  4: Nearly all essentials covered. Minor omissions that rarely affect correctness.
  3: Mixed coverage with several common cases or definitions missing. Sometimes blocks a correct solution.
  2: Multiple essential facts missing. Frequent failure without extra knowledge.
  1: Largely incomplete background.
Knowledge Relevance
  5: Background contains only necessary or highly useful facts for the cluster. No tangents.
  4: Small amount of extra detail that is not distracting.
  3: Noticeable extraneous content. Can distract or slow reasoning.
  2: Large amount of irrelevant or low-yield content. Likely to mislead.
  1: Mostly off-topic or generic background.
Reasoning Accuracy
  5: Reasoning steps are logically sound, factually correct, and properly sequenced. No contradictions.
  4: Minor imprecision or wording issues that do not change the outcome.
  3: At least one underspecified or brittle step that could lead to a wrong branch. Small gaps.
  2: Clear logical or factual error that would often yield an incorrect answer.
  1: Reasoning is largely incorrect or inconsistent.
Reasoning Relevance
  5: Steps are tailored to the problem type, align with input and output, and include cluster-critical operations.
  4: Mostly tailored with minimal generic filler.
  3: Mix of tailored and generic steps. Some do not map to the task structure.
  2: Largely generic advice. Missing one or more cluster-critical steps.
  1: Steps unrelated to the problem type.
Clarity
  5: Concise, well structured, unambiguous. Consistent terminology. Numbered steps or clear bullets. Explicit stop conditions or decision points.
  4: Generally clear with minor verbosity or mild ambiguity.
  3: Mixed clarity. Some steps vague or terminology inconsistent.
  2: Hard to follow. Long sentences, unclear step boundaries, or undefined terms.
  1: Confusing or unreadable.
"""

SCHEMA = """{
  "knowledge_comprehensiveness": <integer 1-5>,
  "knowledge_relevance": <integer 1-5>,
  "reasoning_accuracy": <integer 1-5>,
  "reasoning_relevance": <integer 1-5>,
  "clarity": <integer 1-5>,
  "factual_error_in_steps": <true|false>,
  "required_step_missing": <true|false>,
  "background_mostly_tangential": <true|false>,
  "step_boundaries_unclear": <true|false>
}"""


def judge_prompt(instr: Instruction) -> str:
    return (
        "You are grading an instruction written to help a model solve a family of "
        "multiple-choice questions. Score it on each criterion below using the "
        "five-point scale.\n\n"
        f"{RUBRIC}\n"
        "Also report these flags: factual_error_in_steps (any factual error in the steps), "
        "required_step_missing (a required step is missing), background_mostly_tangential "
        "(much of the background is tangential), step_boundaries_unclear (step boundaries "
        "are unclear or terminology is inconsistent).\n\n"
        "<instruction>\n"
        f"{instr.raw}\n"
        "</instruction>\n\n"
        "Reply with only a JSON object of exactly this form:\n"
        f"{SCHEMA}\n"
    )


REASK = "\n\nYour previous reply could not be used ({error}). Reply with only the JSON object."


def parse_judgement(text: str) -> RubricScore:
    start, end = text.find("{"), text.rfind("}")
    if start == -1 or end <= start:
        raise JudgeParseError("no JSON object in judge reply")
    try:
        data = json.loads(text[start : end + 1])
    except json.JSONDecodeError as exc:
        raise JudgeParseError(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise JudgeParseError("judge reply is not a JSON object")
    missing = [k for k in CRITERIA + FLAGS if k not in data]
    if missing:
        raise JudgeParseError(f"missing keys {missing}")
    for f in FLAGS:
        if not isinstance(data[f], bool):
            raise JudgeParseError(f"{f} must be true or false")
    try:
        return RubricScore.from_dict(data)
    except ValueError as exc:
        raise JudgeParseError(str(exc)) from exc


@dataclass(frozen=True)
class JudgedInstruction:
    cluster_id: str
    variant: InstructionVariant
    runs: tuple[RubricScore, ...]
    averaged: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "variant": self.variant.slug,
            "runs": [r.to_dict() for r in self.runs],
            "averaged": dict(zip(CRITERIA, self.averaged)),
        }


def average_runs(runs: Sequence[RubricScore]) -> tuple[float, ...]:
    return tuple(float(x) for x in np.mean([r.scores for r in runs], axis=0))


def judge_once(instr: Instruction, chat: ChatBackend, reasks: int = 1) -> RubricScore:
    prompt = judge_prompt(instr)
    err: JudgeParseError | None = None
    for attempt in range(reasks + 1):
        user = prompt if err is None else prompt + REASK.format(error=err)
        try:
            return parse_judgement(chat.chat(ChatRequest(user=user, max_tokens=512)))
        except JudgeParseError as exc:
            err = exc
    raise JudgeParseError(f"cluster {instr.cluster_id}: {err}")


def judge_instruction(instr: Instruction, chat: ChatBackend, repeats: int = 3) -> JudgedInstruction:
    """Score ``repeats`` times (sequentially), cap each run, and average."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    runs = tuple(apply_caps(judge_once(instr, chat)) for _ in range(repeats))
    return JudgedInstruction(instr.cluster_id, instr.variant, runs, average_runs(runs))


@dataclass(frozen=True)
class QualityRow:
    audience: Audience
    length: Length
    n: int
    means: tuple[float, ...]


@dataclass
class QualitySummary:
    rows: list[QualityRow]
    judged: list[JudgedInstruction] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Audience", "Length", "N"] + [DISPLAY[c] for c in CRITERIA])
        for r in self.rows:
            w.writerow([r.audience.value, r.length.value, r.n] + [f"{m:.2f}" for m in r.means])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def write_judged(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for j in self.judged:
                fh.write(dumps_line(j.to_dict()) + "\n")


def summarize(judged: Iterable[JudgedInstruction]) -> list[QualityRow]:
    buckets: dict[InstructionVariant, list[tuple[float, ...]]] = {}
    for j in judged:
        buckets.setdefault(j.variant, []).append(j.averaged)
    rows = []
    for v in sorted(buckets, key=lambda v: (v.audience.value, v.length.value)):
        vals = buckets[v]
        rows.append(QualityRow(v.audience, v.length, len(vals),
                               tuple(float(x) for x in np.mean(vals, axis=0))))
    return rows


def judge_corpus(instructions: Iterable[Instruction], chat: ChatBackend, repeats: int = 3) -> QualitySummary:
    """Judge every instruction (in parallel up to the backend limit) and summarize by variant."""
    items = list(instructions)
    if not items:
        raise ValueError("nothing to judge")

    def work(instr: Instruction):
        try:
            return judge_instruction(instr, chat, repeats)
        except (JudgeParseError, BackendError) as exc:
            return exc

    judged, failures = [], {}
    with ThreadPoolExecutor(max_workers=max(1, chat.max_concurrency)) as pool:
        for instr, out in zip(items, pool.map(work, items)):
            if isinstance(out, Exception):
                failures[f"{instr.variant.slug}/{instr.cluster_id}"] = f"{type(out).__name__}: {out}"
            else:
                judged.append(out)
    return QualitySummary(summarize(judged), judged, failures)


# Reference per-variant means (comprehensiveness, relevance, accuracy, reasoning relevance, clarity).
REFERENCE_QUALITY = {
    "grad_concise": (4.57, 4.92, 4.83, 4.90, 4.95),
    "grad_verbose": (4.97, 4.69, 4.93, 4.98, 4.94),
    "hs_concise": (4.31, 4.91, 4.73, 4.81, 4.91),
    "hs_verbose": (4.68, 4.82, 4.90, 4.95, 4.91),
}
