"""Fixed-effects logistic regression over evaluation records.

Coefficients are fitted by IRLS with step halving; effects are reported as
average marginal effects in percentage points. Random intercepts are not
estimated here: ``export_long`` writes the long-format table (with question
and task grouping columns) for external mixed-model software.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Audience, EvalRecord, Length, BASELINE, ConditionKind
from .errors import RankDeficient, SeparationDetected, UnknownModel

PROB_CLAMP = 1e-12
GRAD_TOL = 1e-8
MAX_ITER = 100


@dataclass(frozen=True)
class ModelInfo:
    family: str
    size_b: float  # parameter count in billions

    def __post_init__(self):
        if self.size_b <= 0:
            raise ValueError("model size must be positive")


BASE_PREDICTORS = (
    "zero_shot",
    "baseline",
    "graduate",
    "verbose",
    "knowledge_only",
    "reasoning_only",
    "log_model_size",
    "log_prompt_tokens",
)
CONTINUOUS = {"log_model_size", "log_prompt_tokens"}


@dataclass(frozen=True)
class DesignSpec:
    """Reference coding: instructed High School Concise from the reference
    family is the all-zero row; ``interactions`` are products of two predictors."""

    reference_family: str = "llama3"
    interactions: tuple[tuple[str, str], ...] = (("log_model_size", "verbose"),)


@dataclass(frozen=True)
class DesignRow:
    y: int
    predictors: tuple[tuple[str, float], ...]
    question_id: str
    task: str
    model_id: str
    condition: str

    def value(self, name: str) -> float:
        return dict(self.predictors)[name]


@dataclass
class DesignMatrix:
    names: list[str]
    rows: list[DesignRow]

    @property
    def y(self) -> np.ndarray:
        return np.array([r.y for r in self.rows], dtype=float)

    def matrix(self, intercept: bool = True, drop_constant: bool = True) -> tuple[np.ndarray, list[str]]:
        X = np.array([[v for _, v in r.predictors] for r in self.rows], dtype=float).reshape(len(self.rows), -1)
        names = list(self.names)
        if drop_constant and len(self.rows) > 1:
            keep = [j for j in range(X.shape[1]) if np.ptp(X[:, j]) > 0]
            X, names = X[:, keep], [names[j] for j in keep]
        if intercept:
            X = np.column_stack([np.ones(len(self.rows)), X])
            names = ["intercept"] + names
        return X, names


def predictor_names(registry: Mapping[str, ModelInfo], spec: DesignSpec = DesignSpec()) -> list[str]:
    families = sorted({m.family for m in registry.values()} - {spec.reference_family})
    names = list(BASE_PREDICTORS) + [f"family_{f}" for f in families]
    names += [f"{a}:{b}" for a, b in spec.interactions]
    return names


def _row(rec: EvalRecord, info: ModelInfo, names: Sequence[str], spec: DesignSpec) -> DesignRow:
    cond = rec.condition
    v = cond.variant
    base = {
        "zero_shot": float(cond.is_zero_shot),
        "baseline": float(v == BASELINE),
        "graduate": float(v is not None and v.audience is Audience.GRADUATE),
        "verbose": float(v is not None and v.length is Length.VERBOSE),
        "knowledge_only": float(cond.kind is ConditionKind.KNOWLEDGE_ONLY),
        "reasoning_only": float(cond.kind is ConditionKind.REASONING_ONLY),
        "log_model_size": math.log(info.size_b),
        # failed calls carry zero tokens; floor at one token keeps the log finite
        "log_prompt_tokens": math.log(max(rec.prompt_tokens, 1)),
    }
    for name in names:
        if name.startswith("family_"):
            base[name] = float(info.family == name[len("family_"):])
    for a, b in spec.interactions:
        base[f"{a}:{b}"] = base[a] * base[b]
    return DesignRow(int(rec.correct), tuple((n, base[n]) for n in names), rec.question_id, rec.task,
                     rec.model_id, str(cond))


def build_design(records: Iterable[EvalRecord], registry: Mapping[str, ModelInfo],
                 spec: DesignSpec = DesignSpec()) -> DesignMatrix:
    names = predictor_names(registry, spec)
    rows = []
    for rec in records:
        if rec.model_id not in registry:
            raise UnknownModel(f"model {rec.model_id!r} not in the registry")
        rows.append(_row(rec, registry[rec.model_id], names, spec))
    return DesignMatrix(names, rows)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def log_likelihood(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ beta
    return float(-np.sum(y * np.logaddexp(0.0, -eta) + (1 - y) * np.logaddexp(0.0, eta)))


def predict(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.clip(sigmoid(X @ beta), PROB_CLAMP, 1 - PROB_CLAMP)


@dataclass
class FitResult:
    names: list[str]
    beta: np.ndarray
    stderr: np.ndarray
    converged: bool
    n_iter: int
    log_likelihood: float
    gradient: np.ndarray
    ll_history: list[float] = field(default_factory=list)
    marginal_effects: dict[str, float] = field(default_factory=dict)

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def to_dict(self) -> dict:
        return {
            "names": self.names,
            "beta": self.beta.tolist(),
            "stderr": self.stderr.tolist(),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "log_likelihood": self.log_likelihood,
            "max_abs_gradient": float(np.max(np.abs(self.gradient))),
            "marginal_effects_pp": self.marginal_effects,
        }

    def to_text(self) -> str:
        lines = [f"{'predictor':<28}{'coef':>10}{'stderr':>10}{'AME (pp)':>10}"]
        for name, b, se in zip(self.names, self.beta, self.stderr):
            me = self.marginal_effects.get(name)
            lines.append(f"{name:<28}{b:>10.4f}{se:>10.4f}{'' if me is None else f'{me:>10.2f}'}")
        lines.append(f"log-likelihood {self.log_likelihood:.4f}; converged={self.converged} "
                     f"after {self.n_iter} iterations")
        return "\n".join(lines)


def fit_logistic(X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None,
                 tol: float = GRAD_TOL, max_iter: int = MAX_ITER) -> FitResult:
    """Maximum-likelihood logistic fit by Newton/IRLS with step halving.

    Converged when the largest absolute score component is <= ``tol``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if y.sum() < 1 or y.sum() > n - 1:
        raise SeparationDetected("outcome needs at least one success and one failure")
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        # columns carrying weight in the null space are the collinear ones
        _, _, vt = np.linalg.svd(X, full_matrices=False)
        null = np.abs(vt[rank:]).max(axis=0)
        involved = [names[j] for j in np.flatnonzero(null > 1e-8)]
        raise RankDeficient(f"design matrix has rank {rank} < {p} columns; collinear: {', '.join(involved)}")

    beta = np.zeros(p)
    ll = log_likelihood(beta, X, y)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = sigmoid(X @ beta)
        grad = X.T @ (y - prob)
        if np.max(np.abs(grad)) <= tol:
            converged = True
            it -= 1
            break
        w = prob * (1 - prob)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            ll_new = log_likelihood(cand, X, y)
            if ll_new >= ll:
                break
            t /= 2
        else:
            break  # no ascent possible at machine precision
        beta, ll = cand, ll_new
        history.append(ll)

    prob = sigmoid(X @ beta)
    grad = X.T @ (y - prob)
    converged = converged or bool(np.max(np.abs(grad)) <= tol)
    eta = X @ beta
    if np.max(np.abs(y - prob)) < 1e-6 or (not converged and np.max(np.abs(eta)) > 30):
        raise SeparationDetected("outcomes are (quasi-)perfectly separated; coefficients diverge")
    w = prob * (1 - prob)
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    return FitResult(names, beta, np.sqrt(np.diag(cov)), converged, it, ll, grad, history)


def _binary_columns(X: np.ndarray, names: Sequence[str]) -> list[bool]:
    return [name != "intercept" and ":" not in name and name not in CONTINUOUS
            and bool(np.all((X[:, j] == 0) | (X[:, j] == 1)))
            for j, name in enumerate(names)]


def marginal_effects(fit: FitResult, X: np.ndarray, binary: Sequence[bool] | None = None) -> dict[str, float]:
    """Average marginal effect of each predictor, in percentage points.

    Binary predictors use the mean discrete change from 0 to 1; continuous
    ones use the mean of beta_j * p(1 - p).
    """
    X = np.asarray(X, dtype=float)
    binary = list(binary) if binary is not None else _binary_columns(X, fit.names)
    prob = sigmoid(X @ fit.beta)
    out = {}
    for j, name in enumerate(fit.names):
        if name == "intercept":
            continue
        if binary[j]:
            hi, lo = X.copy(), X.copy()
            hi[:, j], lo[:, j] = 1.0, 0.0
            effect = np.mean(sigmoid(hi @ fit.beta) - sigmoid(lo @ fit.beta))
        else:
            effect = np.mean(fit.beta[j] * prob * (1 - prob))
        out[name] = float(100 * effect)
    return out


def fit_design(design: DesignMatrix, drop_constant: bool = True) -> FitResult:
    X, names = design.matrix(intercept=True, drop_constant=drop_constant)
    fit = fit_logistic(X, design.y, names)
    fit.marginal_effects = marginal_effects(fit, X)
    return fit


LONG_ID_COLUMNS = ("question_id", "task", "model_id", "condition")


def export_long(records: Iterable[EvalRecord], registry: Mapping[str, ModelInfo], path: str | Path,
                spec: DesignSpec = DesignSpec()) -> Path:
    """Write one CSV row per record.

    Columns: ``y``, every predictor from ``predictor_names`` in order, then
    ``question_id``, ``task``, ``model_id``, ``condition`` for grouping.
    Floats are written with ``repr`` so re-reading is exact.
    """
    design = build_design(records, registry, spec)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y"] + design.names + list(LONG_ID_COLUMNS))
        for r in design.rows:
            w.writerow([r.y] + [repr(v) for _, v in r.predictors]
                       + [r.question_id, r.task, r.model_id, r.condition])
    return path


def read_long(path: str | Path) -> DesignMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = header[1 : -len(LONG_ID_COLUMNS)]
        rows = []
        for rec in reader:
            vals = rec[1 : -len(LONG_ID_COLUMNS)]
            qid, task, model, cond = rec[-len(LONG_ID_COLUMNS):]
            rows.append(DesignRow(int(rec[0]), tuple((n, float(v)) for n, v in zip(names, vals)),
                                  qid, task, model, cond))
    return DesignMatrix(names, rows)


def load_registry(data: Mapping[str, Mapping]) -> dict[str, ModelInfo]:
    return {mid: ModelInfo(str(d["family"]), float(d["size_b"])) for mid, d in data.items()}


def save_fit(fit: FitResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(fit.to_dict(), indent=2), encoding="utf-8")


# Reference average marginal effects (pp) for context only. They come from a
# model with random intercepts, which this fit omits.
REFERENCE_EFFECTS_PP = {
    "instruction_variant": (28, 29),
    "family_qwen3": 56,
    "family_deepseek_r1_llama": 43,
    "family_deepseek_r1_qwen": 38,
    "family_gemma2": 16,
    "family_mistral": 2,
    "log_model_size": 9,
    "log_prompt_tokens": -8,
}
