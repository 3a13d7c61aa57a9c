"""
Judging instructions and fitting the regression
===============================================

"""

# caps only ever lower a score
import math

import numpy as np

from instruction_corpus.analyze import ModelInfo, build_design, fit_design
from instruction_corpus.backends import MockChat, auto_responder
from instruction_corpus.core import (GRAD_VERBOSE, HS_CONCISE, VARIANTS, ZERO_SHOT, Condition, EvalRecord,
                                     Instruction, reconstruct)
from instruction_corpus.judge import RubricScore, apply_caps, judge_corpus

print(apply_caps(RubricScore(5, 5, 5, 5, 5, factual_error_in_steps=True)).scores)
print(apply_caps(RubricScore(2, 5, 5, 5, 5, required_step_missing=True)).scores)

# a mock judge scores each instruction three times; runs are capped then averaged
instrs = [Instruction(f"c{i}", v, f"fact {i}", f"1. step {i}", reconstruct(f"fact {i}", f"1. step {i}"))
          for i, v in enumerate([HS_CONCISE, HS_CONCISE, GRAD_VERBOSE])]
summary = judge_corpus(instrs, MockChat(auto_responder(0)), repeats=3)
print(summary.to_csv())

# simulated evaluation records: instructions help, bigger models help
registry = {"llama3-1b": ModelInfo("llama3", 1), "llama3-8b": ModelInfo("llama3", 8),
            "qwen3-4b": ModelInfo("qwen3", 4), "qwen3-14b": ModelInfo("qwen3", 14)}
rng = np.random.default_rng(0)
records = []
for model, info in registry.items():
    for cond in [ZERO_SHOT] + [Condition.parse(f"instructed:{v.slug}") for v in VARIANTS]:
        for i in range(300):
            tokens = 80 if cond.is_zero_shot else int(rng.integers(200, 1200))
            eta = -0.8 + 0.9 * (not cond.is_zero_shot) + 0.3 * math.log(info.size_b) + 0.5 * (info.family == "qwen3")
            ok = bool(rng.random() < 1 / (1 + math.exp(-eta)))
            records.append(EvalRecord(f"q{i}", "MedQA", model, cond, (), tokens, "", "A" if ok else None, ok))

# the reference row is instructed High School Concise on llama3
fit = fit_design(build_design(records, registry))
print(fit.to_text())
print("zero-shot effect (pp):", round(fit.marginal_effects["zero_shot"], 1))
