"""Domain model shared by every stage of the pipeline, plus JSONL I/O."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DimensionMismatch, ZeroVector

LABELS = "ABCDE"

# Tasks are plain strings; anything outside KNOWN_TASKS is a custom corpus.
MEDQA = "MedQA"
MMLU_LAW = "MMLULaw"
MATHQA = "MathQA"
KNOWN_TASKS = (MEDQA, MMLU_LAW, MATHQA)


def canonical_task(name: str) -> str:
    for t in KNOWN_TASKS:
        if name.lower() == t.lower():
            return t
    if not name:
        raise ConfigError("empty task name")
    return name


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class Question:
    id: str
    task: str
    split: Split
    stem: str
    options: tuple[tuple[str, str], ...]
    gold: str

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "options", tuple((str(l), str(t)) for l, t in self.options))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task": self.task,
            "split": self.split.value,
            "stem": self.stem,
            "options": [[l, t] for l, t in self.options],
            "gold": self.gold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Question":
        opts = d["options"]
        if isinstance(opts, dict):
            opts = sorted(opts.items())
        return cls(
            id=str(d["id"]),
            task=d["task"],
            split=Split(d["split"]),
            stem=d["stem"],
            options=tuple((l, t) for l, t in opts),
            gold=d["gold"],
        )


@dataclass
class ValidationReport:
    violations: list[tuple[str, str]] = field(default_factory=list)

    def add(self, qid: str, problem: str) -> None:
        self.violations.append((qid, problem))

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def ids(self) -> set[str]:
        return {qid for qid, _ in self.violations}

    def format(self) -> str:
        return "\n".join(f"{qid}: {problem}" for qid, problem in self.violations)


def validate_corpus(questions: Iterable[Question]) -> ValidationReport:
    """Check every corpus invariant; violations are returned, never raised."""
    report = ValidationReport()
    seen: Counter = Counter()
    for q in questions:
        seen[(q.task, q.split, q.id)] += 1
        if seen[(q.task, q.split, q.id)] == 2:
            report.add(q.id, f"duplicate id within ({q.task}, {q.split.value})")
        if not q.stem.strip():
            report.add(q.id, "empty stem")
        labels = q.labels
        if not labels:
            report.add(q.id, "no options")
            continue
        dupes = sorted(l for l, c in Counter(labels).items() if c > 1)
        for l in dupes:
            report.add(q.id, f"duplicate option label {l!r}")
        bad = [l for l in labels if l not in LABELS]
        if bad:
            report.add(q.id, f"option label outside A-E: {', '.join(map(repr, bad))}")
        elif not dupes and list(labels) != list(LABELS[: len(labels)]):
            report.add(q.id, "option labels not contiguous from 'A'")
        if q.gold not in labels:
            report.add(q.id, "gold not among options")
    return report


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int
    source_model: str = ""

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) != self.dim:
            raise DimensionMismatch(f"vector has {len(vals)} values but dim={self.dim}")
        if self.dim <= 0:
            raise DimensionMismatch("dim must be positive")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("embedding contains non-finite values")
        if not any(vals):
            raise ZeroVector("zero embedding vector rejected")

    @classmethod
    def from_array(cls, arr, source_model: str = "") -> "EmbeddingVector":
        arr = np.asarray(arr, dtype=float).ravel()
        return cls(tuple(arr.tolist()), int(arr.size), source_model)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def to_dict(self) -> dict:
        return {"values": list(self.values), "dim": self.dim, "source_model": self.source_model}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingVector":
        return cls(tuple(d["values"]), d["dim"], d.get("source_model", ""))


def stack(vectors: list[EmbeddingVector]) -> np.ndarray:
    if not vectors:
        raise ValueError("no vectors")
    dim = vectors[0].dim
    for v in vectors:
        if v.dim != dim:
            raise DimensionMismatch(f"mixed dims {dim} and {v.dim}")
    return np.array([v.values for v in vectors], dtype=float)


class Audience(str, Enum):
    HIGH_SCHOOL = "HighSchool"
    GRADUATE = "Graduate"
    BASELINE = "Baseline"


class Length(str, Enum):
    CONCISE = "Concise"
    VERBOSE = "Verbose"
    UNCONSTRAINED = "Unconstrained"


@dataclass(frozen=True)
class InstructionVariant:
    audience: Audience
    length: Length

    def __post_init__(self):
        a, l = Audience(self.audience), Length(self.length)
        object.__setattr__(self, "audience", a)
        object.__setattr__(self, "length", l)
        if (a is Audience.BASELINE) != (l is Length.UNCONSTRAINED):
            raise ValueError(f"invalid variant {a.value}/{l.value}")

    @property
    def slug(self) -> str:
        return _SLUGS[(self.audience, self.length)]

    @property
    def name(self) -> str:
        if self.audience is Audience.BASELINE:
            return "Baseline"
        return self.audience.value + self.length.value

    @classmethod
    def parse(cls, text: str) -> "InstructionVariant":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        for v in VARIANTS:
            if key in (v.slug, v.name.lower(), _snake(v.name)):
                return v
        raise ValueError(f"unknown instruction variant {text!r}")

    def __str__(self) -> str:
        return self.slug


def _snake(name: str) -> str:
    return "".join("_" + c.lower() if c.isupper() else c for c in name).lstrip("_")


_SLUGS = {
    (Audience.BASELINE, Length.UNCONSTRAINED): "baseline",
    (Audience.HIGH_SCHOOL, Length.CONCISE): "hs_concise",
    (Audience.HIGH_SCHOOL, Length.VERBOSE): "hs_verbose",
    (Audience.GRADUATE, Length.CONCISE): "grad_concise",
    (Audience.GRADUATE, Length.VERBOSE): "grad_verbose",
}

BASELINE = InstructionVariant(Audience.BASELINE, Length.UNCONSTRAINED)
HS_CONCISE = InstructionVariant(Audience.HIGH_SCHOOL, Length.CONCISE)
HS_VERBOSE = InstructionVariant(Audience.HIGH_SCHOOL, Length.VERBOSE)
GRAD_CONCISE = InstructionVariant(Audience.GRADUATE, Length.CONCISE)
GRAD_VERBOSE = InstructionVariant(Audience.GRADUATE, Length.VERBOSE)
VARIANTS = (BASELINE, HS_CONCISE, HS_VERBOSE, GRAD_CONCISE, GRAD_VERBOSE)

BACKGROUND_HEADER = "## Background Knowledge"
REASONING_HEADER = "## Reasoning Steps"


def reconstruct(background: str, reasoning: str) -> str:
    return f"{BACKGROUND_HEADER}\n{background}\n\n{REASONING_HEADER}\n{reasoning}"


@dataclass(frozen=True)
class Instruction:
    cluster_id: str
    variant: InstructionVariant
    background: str
    reasoning: str
    raw: str
    example_ids: tuple[str, ...] = ()
    token_len: int = 0

    def __post_init__(self):
        object.__setattr__(self, "example_ids", tuple(self.example_ids))
        if not self.background.strip() or not self.reasoning.strip():
            raise ValueError("instruction needs non-empty background and reasoning")
        if len(self.example_ids) > 5:
            raise ValueError("at most 5 example ids")
        if " ".join(self.raw.split()) != " ".join(
            reconstruct(self.background, self.reasoning).split()
        ):
            raise ValueError("raw text does not match background/reasoning sections")

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "variant": self.variant.slug,
            "background": self.background,
            "reasoning": self.reasoning,
            "raw": self.raw,
            "example_ids": list(self.example_ids),
            "token_len": self.token_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Instruction":
        return cls(
            cluster_id=d["cluster_id"],
            variant=InstructionVariant.parse(d["variant"]),
            background=d["background"],
            reasoning=d["reasoning"],
            raw=d["raw"],
            example_ids=tuple(d.get("example_ids", ())),
            token_len=int(d.get("token_len", 0)),
        )


class ConditionKind(str, Enum):
    ZERO_SHOT = "zeroshot"
    INSTRUCTED = "instructed"
    KNOWLEDGE_ONLY = "knowledge_only"
    REASONING_ONLY = "reasoning_only"


@dataclass(frozen=True)
class Condition:
    """Evaluation condition. Ablations carry the variant whose store they slice."""

    kind: ConditionKind
    variant: InstructionVariant | None = None

    def __post_init__(self):
        kind = ConditionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ConditionKind.ZERO_SHOT:
            if self.variant is not None:
                raise ValueError("zero-shot condition takes no variant")
        elif self.variant is None:
            object.__setattr__(self, "variant", HS_CONCISE)

    @property
    def is_zero_shot(self) -> bool:
        return self.kind is ConditionKind.ZERO_SHOT

    @property
    def ablation(self) -> str | None:
        if self.kind is ConditionKind.KNOWLEDGE_ONLY:
            return "KnowledgeOnly"
        if self.kind is ConditionKind.REASONING_ONLY:
            return "ReasoningOnly"
        return None

    def __str__(self) -> str:
        if self.is_zero_shot:
            return self.kind.value
        return f"{self.kind.value}:{self.variant.slug}"

    @classmethod
    def parse(cls, text: str) -> "Condition":
        text = text.strip()
        kind, _, var = text.partition(":")
        key = kind.lower().replace("-", "_")
        if key in ("zeroshot", "zero_shot"):
            return ZERO_SHOT
        aliases = {"knowledgeonly": "knowledge_only", "reasoningonly": "reasoning_only"}
        key = aliases.get(key, key)
        if key in (k.value for k in ConditionKind):
            return cls(ConditionKind(key), InstructionVariant.parse(var) if var else None)
        # a bare variant name means the instructed condition for that variant
        return cls(ConditionKind.INSTRUCTED, InstructionVariant.parse(text))


ZERO_SHOT = Condition(ConditionKind.ZERO_SHOT)


def is_correct(extracted: str | None, gold: str) -> bool:
    return extracted is not None and extracted == gold


@dataclass(frozen=True)
class EvalRecord:
    question_id: str
    task: str
    model_id: str
    condition: Condition
    retrieved_cluster_ids: tuple[str, ...]
    prompt_tokens: int
    raw_output: str
    extracted_answer: str | None
    correct: bool
    threshold_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "retrieved_cluster_ids", tuple(self.retrieved_cluster_ids))
        if self.condition.is_zero_shot and self.retrieved_cluster_ids:
            raise ValueError("zero-shot record cannot list retrieved clusters")
        if self.correct and self.extracted_answer is None:
            raise ValueError("record marked correct without an extracted answer")

    @property
    def key(self) -> tuple[str, str, str, str, str]:
        return (self.task, self.question_id, self.model_id, str(self.condition), self.threshold_id)

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "task": self.task,
            "model_id": self.model_id,
            "condition": str(self.condition),
            "retrieved_cluster_ids": list(self.retrieved_cluster_ids),
            "prompt_tokens": self.prompt_tokens,
            "raw_output": self.raw_output,
            "extracted_answer": self.extracted_answer,
            "correct": self.correct,
            "threshold_id": self.threshold_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(
            question_id=d["question_id"],
            task=d["task"],
            model_id=d["model_id"],
            condition=Condition.parse(d["condition"]),
            retrieved_cluster_ids=tuple(d.get("retrieved_cluster_ids", ())),
            prompt_tokens=int(d["prompt_tokens"]),
            raw_output=d["raw_output"],
            extracted_answer=d.get("extracted_answer"),
            correct=bool(d["correct"]),
            threshold_id=d.get("threshold_id", ""),
        )


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps_line(row) + "\n")
    tmp.replace(path)


def load_questions(path: str | Path, validate: bool = True) -> list[Question]:
    try:
        questions = [Question.from_dict(d) for d in iter_jsonl(path)]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed question record ({exc})") from exc
    if validate:
        report = validate_corpus(questions)
        if report:
            raise ConfigError(f"{path}: corpus invalid:\n{report.format()}")
    return questions


def save_questions(path: str | Path, questions: Iterable[Question]) -> None:
    write_jsonl(path, (q.to_dict() for q in questions))


def load_records(path: str | Path) -> list[EvalRecord]:
    return [EvalRecord.from_dict(d) for d in iter_jsonl(path)]


def save_records(path: str | Path, records: Iterable[EvalRecord]) -> None:
    write_jsonl(path, (r.to_dict() for r in records))
