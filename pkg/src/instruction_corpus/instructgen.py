"""Instruction generation: sample cluster examples, prompt the generator, parse."""
from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .backends import ChatBackend, ChatRequest
from .cluster import Cluster, ClusterCut
from .core import (
    BACKGROUND_HEADER,
    REASONING_HEADER,
    Instruction,
    InstructionVariant,
    Question,
    reconstruct,
)
from .errors import AuthError, BackendError, MalformedInstruction, MissingPlaceholder
from .templates import PLACEHOLDER, TEMPLATES
from .tokens import count_tokens

log = logging.getLogger(__name__)

MAX_EXAMPLES = 5
DEFAULT_RETRIES = 2


def sample_examples(cluster_members: Sequence[Question], rng_seed: int) -> list[Question]:
    if not cluster_members:
        raise ValueError("cluster has no members")
    rng = random.Random(rng_seed)
    return rng.sample(list(cluster_members), min(MAX_EXAMPLES, len(cluster_members)))


def format_example(number: int, q: Question) -> str:
    lines = [f"Example {number}:", f"Question: {q.stem}", "Options:"]
    lines += [f"{label}. {text}" for label, text in q.options]
    lines.append(f"Correct answer: {q.gold}")
    return "\n".join(lines)


def render_prompt(template: str, examples: Sequence[Question]) -> str:
    if PLACEHOLDER not in template:
        raise MissingPlaceholder(f"template has no {PLACEHOLDER} slot")
    if not examples:
        raise ValueError("need at least one example")
    block = "\n\n".join(format_example(i, q) for i, q in enumerate(examples, 1))
    return template.replace(PLACEHOLDER, block)


def _header_lines(lines: list[str], header: str) -> list[int]:
    return [i for i, line in enumerate(lines) if line.strip() == header]


def split_sections(raw: str) -> tuple[str, str]:
    """Return (background, reasoning) bodies; raises MalformedInstruction."""
    lines = raw.splitlines()
    bg = _header_lines(lines, BACKGROUND_HEADER)
    rs = _header_lines(lines, REASONING_HEADER)
    if not bg:
        raise MalformedInstruction(f"missing {BACKGROUND_HEADER!r} header")
    if not rs:
        raise MalformedInstruction(f"missing {REASONING_HEADER!r} header")
    if rs[0] < bg[0]:
        raise MalformedInstruction("sections out of order")
    background = "\n".join(lines[bg[0] + 1 : rs[0]]).strip()
    reasoning = "\n".join(lines[rs[0] + 1 :]).strip()
    if not background:
        raise MalformedInstruction("empty background section")
    if not reasoning:
        raise MalformedInstruction("empty reasoning section")
    return background, reasoning


def parse_instruction(raw: str, cluster_id: str, variant: InstructionVariant,
                      example_ids: Sequence[str] = (), tokenizer_id: str = "bytes/4") -> Instruction:
    """Parse a generator completion; any preamble before the first header is dropped.

    The stored ``raw`` is the canonical two-section text.
    """
    background, reasoning = split_sections(raw)
    canonical = reconstruct(background, reasoning)
    return Instruction(
        cluster_id=cluster_id,
        variant=variant,
        background=background,
        reasoning=reasoning,
        raw=canonical,
        example_ids=tuple(example_ids),
        token_len=count_tokens(canonical, tokenizer_id),
    )


def ablate_instruction(instr: Instruction, mode: str) -> str:
    if mode == "KnowledgeOnly":
        return f"{BACKGROUND_HEADER}\n{instr.background}"
    if mode == "ReasoningOnly":
        return f"{REASONING_HEADER}\n{instr.reasoning}"
    raise ValueError(f"unknown ablation mode {mode!r}")


class InstructionStore:
    """All instructions for one (threshold_id, variant), persisted as one JSON file."""

    def __init__(self, path: str | Path, threshold_id: str, variant: InstructionVariant):
        self.path = Path(path)
        self.threshold_id = threshold_id
        self.variant = variant
        self.instructions: dict[str, Instruction] = {}
        self.failures: dict[str, str] = {}
        self._lock = threading.Lock()

    @classmethod
    def open(cls, path: str | Path, threshold_id: str, variant: InstructionVariant) -> "InstructionStore":
        store = cls(path, threshold_id, variant)
        if store.path.exists():
            data = json.loads(store.path.read_text(encoding="utf-8"))
            if data["threshold_id"] != threshold_id or data["variant"] != variant.slug:
                raise ValueError(f"{path} holds {data['threshold_id']}/{data['variant']}")
            store.instructions = {k: Instruction.from_dict(v) for k, v in data["instructions"].items()}
            store.failures = dict(data.get("failures", {}))
        return store

    @classmethod
    def load(cls, path: str | Path) -> "InstructionStore":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.open(path, data["threshold_id"], InstructionVariant.parse(data["variant"]))

    def __len__(self) -> int:
        return len(self.instructions)

    def __contains__(self, cluster_id: str) -> bool:
        return cluster_id in self.instructions

    def get(self, cluster_id: str) -> Instruction | None:
        return self.instructions.get(cluster_id)

    def add(self, instr: Instruction) -> None:
        with self._lock:
            self.instructions[instr.cluster_id] = instr
            self.failures.pop(instr.cluster_id, None)

    def fail(self, cluster_id: str, reason: str) -> None:
        with self._lock:
            self.failures[cluster_id] = reason

    def save(self) -> None:
        with self._lock:
            data = {
                "threshold_id": self.threshold_id,
                "variant": self.variant.slug,
                "instructions": {k: self.instructions[k].to_dict() for k in sorted(self.instructions)},
                "failures": {k: self.failures[k] for k in sorted(self.failures)},
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_suffix(".tmp")
            tmp.write_text(json.dumps(data, indent=1, ensure_ascii=False, sort_keys=True), encoding="utf-8")
            tmp.replace(self.path)


@dataclass(frozen=True)
class GenerationJob:
    cluster_id: str
    variant: InstructionVariant
    sampled_examples: tuple[Question, ...]
    rendered_prompt: str

    def __post_init__(self):
        if not 1 <= len(self.sampled_examples) <= MAX_EXAMPLES:
            raise ValueError("a generation job needs 1-5 examples")


@dataclass
class GenerationResult:
    instructions: list[Instruction]
    failed: dict[str, str] = field(default_factory=dict)
    attempt_errors: list[tuple[str, str]] = field(default_factory=list)
    calls: int = 0


def cluster_seed(rng_seed: int, cluster_id: str) -> int:
    digest = hashlib.sha256(f"{rng_seed}\0{cluster_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_job(cluster: Cluster, variant: InstructionVariant, questions: Mapping[str, Question],
             rng_seed: int, templates: Mapping[InstructionVariant, str] = TEMPLATES) -> GenerationJob:
    members = [questions[qid] for qid in cluster.member_ids]
    examples = sample_examples(members, cluster_seed(rng_seed, cluster.cluster_id))
    return GenerationJob(cluster.cluster_id, variant, tuple(examples),
                         render_prompt(templates[variant], examples))


def generate_corpus(cut: ClusterCut, variant: InstructionVariant, questions: Mapping[str, Question],
                    chat: ChatBackend, store: InstructionStore, rng_seed: int = 0,
                    retries: int = DEFAULT_RETRIES, max_tokens: int = 4096,
                    tokenizer_id: str = "bytes/4", save_every: int = 50) -> GenerationResult:
    """Generate one instruction per cluster, skipping clusters already in ``store``.

    Each cluster gets ``1 + retries`` attempts with the identical prompt;
    clusters that still fail are recorded in ``store.failures``. An AuthError
    aborts the whole run.
    """
    if not cut.clusters:
        raise ValueError("empty cluster cut")
    todo = [c for c in cut.clusters if c.cluster_id not in store]
    result = GenerationResult(instructions=[])
    errors_lock = threading.Lock()
    done = 0

    def work(cluster: Cluster) -> Instruction | None:
        job = make_job(cluster, variant, questions, rng_seed)
        ids = tuple(q.id for q in job.sampled_examples)
        last = ""
        for attempt in range(retries + 1):
            with errors_lock:
                result.calls += 1
            try:
                raw = chat.chat(ChatRequest(user=job.rendered_prompt, max_tokens=max_tokens))
                return parse_instruction(raw, cluster.cluster_id, variant, ids, tokenizer_id)
            except AuthError:
                raise
            except (MalformedInstruction, BackendError) as exc:
                last = f"{type(exc).__name__}: {exc}"
                with errors_lock:
                    result.attempt_errors.append((cluster.cluster_id, last))
                log.info("cluster %s attempt %d failed: %s", cluster.cluster_id, attempt + 1, last)
        store.fail(cluster.cluster_id, last)
        return None

    with ThreadPoolExecutor(max_workers=max(1, chat.max_concurrency)) as pool:
        for cluster, instr in zip(todo, pool.map(work, todo)):
            if instr is not None:
                store.add(instr)
            done += 1
            if save_every and done % save_every == 0:
                store.save()
    store.save()
    result.instructions = [store.instructions[c.cluster_id] for c in cut.clusters
                           if c.cluster_id in store.instructions]
    result.failed = {c.cluster_id: store.failures[c.cluster_id] for c in cut.clusters
                     if c.cluster_id in store.failures}
    log.info("%s/%s: %d generated, %d failed, %d skipped", store.threshold_id, variant.slug,
             len(todo) - len(result.failed), len(result.failed), len(cut.clusters) - len(todo))
    return result
