"""Prompt assembly under a context budget, model calls, and answer extraction."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Collection, Sequence

from .backends import ChatBackend, ChatRequest, EmbeddingBackend
from .core import Condition, EvalRecord, Instruction, Question, is_correct
from .errors import BackendError, BudgetInfeasible
from .instructgen import InstructionStore, ablate_instruction
from .retrieve import DEFAULT_K, RetrievalIndex, top_k
from .tokens import count_tokens, register_tokenizer  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

ANSWER_DIRECTIVE = "Answer with the letter of the correct option."


@dataclass(frozen=True)
class PromptBudget:
    context_limit_tokens: int = 8192
    reserved_output_tokens: int = 512
    tokenizer_id: str = "bytes/4"

    def __post_init__(self):
        if self.context_limit_tokens < 1 or self.reserved_output_tokens < 1:
            raise ValueError("budget sizes must be positive")
        if self.reserved_output_tokens >= self.context_limit_tokens:
            raise ValueError("reserved output tokens must be below the context limit")

    @property
    def prompt_limit(self) -> int:
        return self.context_limit_tokens - self.reserved_output_tokens

    def to_dict(self) -> dict:
        return {"context_limit_tokens": self.context_limit_tokens,
                "reserved_output_tokens": self.reserved_output_tokens,
                "tokenizer_id": self.tokenizer_id}


@dataclass(frozen=True)
class AssembledPrompt:
    instructions_used: tuple[str, ...]
    text: str
    token_count: int
    budget: PromptBudget

    def __post_init__(self):
        assert self.token_count + self.budget.reserved_output_tokens <= self.budget.context_limit_tokens, (
            f"prompt of {self.token_count} tokens breaks the budget"
        )


def options_text(q: Question) -> str:
    return "\n".join(f"{label}. {text}" for label, text in q.options)


def query_text(q: Question) -> str:
    """Text embedded for retrieval: the stem followed by the lettered options."""
    return f"{q.stem}\n{options_text(q)}"


def question_section(q: Question) -> str:
    return f"Question: {q.stem}\n{options_text(q)}\n\n{ANSWER_DIRECTIVE}"


def render(q: Question, blocks: Sequence[str]) -> str:
    parts = [f"### Instruction {i}\n{b}" for i, b in enumerate(blocks, 1)]
    parts.append(question_section(q))
    return "\n\n".join(parts)


def zero_shot_prompt(q: Question) -> str:
    return question_section(q)


def assemble_prompt(question: Question, ranked_instructions: Sequence[Instruction],
                    budget: PromptBudget, ablation_mode: str | None = None) -> AssembledPrompt:
    """Fit as many top-ranked instructions as the budget allows.

    Starts from all of them and drops the lowest-ranked one until the prompt
    plus reserved output fits the context limit.
    """
    blocks = [ablate_instruction(i, ablation_mode) if ablation_mode else i.raw
              for i in ranked_instructions]
    for n in range(len(blocks), -1, -1):
        text = render(question, blocks[:n])
        tokens = count_tokens(text, budget.tokenizer_id)
        if tokens <= budget.prompt_limit:
            used = tuple(i.cluster_id for i in ranked_instructions[:n])
            return AssembledPrompt(used, text, tokens, budget)
    raise BudgetInfeasible(
        f"question {question.id} needs {tokens} tokens; only {budget.prompt_limit} available"
    )


_ANSWER = re.compile(r"(?i:\banswer)\s*(?:(?i:is)\s*)?(?::\s*)?[(\[*\s]*([A-E])(?![A-Za-z0-9])")
_LETTER = re.compile(r"(?<![A-Za-z0-9])([A-E])(?![A-Za-z0-9])")


def extract_answer(raw_output: str, valid_labels: Collection[str]) -> str | None:
    """Pick the chosen option letter out of free-form model output.

    The last "Answer: X" / "answer is X" with a valid X wins; failing that, a
    single distinct valid letter on the final non-empty line; else None.
    """
    if not raw_output:
        return None
    valid = set(valid_labels)
    hits = [m.group(1) for m in _ANSWER.finditer(raw_output) if m.group(1) in valid]
    if hits:
        return hits[-1]
    lines = [l for l in raw_output.splitlines() if l.strip()]
    if not lines:
        return None
    letters = {m.group(1) for m in _LETTER.finditer(lines[-1]) if m.group(1) in valid}
    if len(letters) == 1:
        return letters.pop()
    return None


def retrieve_instructions(question: Question, embedder: EmbeddingBackend, index: RetrievalIndex,
                          store: InstructionStore, k: int = DEFAULT_K) -> list[Instruction]:
    """Top-k instructions in rank order; clusters without an instruction are skipped."""
    [vec] = embedder.embed_batch([query_text(question)])
    ranked = top_k(index, vec, k)
    return [store.get(cid) for cid, _ in ranked if store.get(cid) is not None]


def run_inference(question: Question, condition: Condition, chat: ChatBackend, budget: PromptBudget,
                  *, embedder: EmbeddingBackend | None = None, index: RetrievalIndex | None = None,
                  store: InstructionStore | None = None, k: int = DEFAULT_K,
                  model_id: str | None = None) -> EvalRecord:
    """One question under one condition; backend failures become incorrect rows."""
    model_id = model_id or chat.model_name
    threshold = "" if condition.is_zero_shot else (index.threshold_id if index is not None else "")
    prompt: AssembledPrompt | None = None
    try:
        ranked: list[Instruction] = []
        if not condition.is_zero_shot:
            if embedder is None or index is None or store is None:
                raise ValueError(f"condition {condition} needs an embedder, index, and store")
            ranked = retrieve_instructions(question, embedder, index, store, k)
        prompt = assemble_prompt(question, ranked, budget, condition.ablation)
        raw = chat.chat(ChatRequest(user=prompt.text, max_tokens=budget.reserved_output_tokens))
    except (BackendError, BudgetInfeasible) as exc:
        log.warning("question %s / %s / %s failed: %s", question.id, model_id, condition, exc)
        return EvalRecord(
            question_id=question.id,
            task=question.task,
            model_id=model_id,
            condition=condition,
            retrieved_cluster_ids=prompt.instructions_used if prompt else (),
            prompt_tokens=prompt.token_count if prompt else 0,
            raw_output=f"<error:{type(exc).__name__}> {exc}",
            extracted_answer=None,
            correct=False,
            threshold_id=threshold,
        )
    answer = extract_answer(raw, question.labels)
    return EvalRecord(
        question_id=question.id,
        task=question.task,
        model_id=model_id,
        condition=condition,
        retrieved_cluster_ids=prompt.instructions_used,
        prompt_tokens=prompt.token_count,
        raw_output=raw,
        extracted_answer=answer,
        correct=is_correct(answer, question.gold),
        threshold_id=threshold,
    )

