"""YAML pipeline configuration with ``${ENV_VAR}`` interpolation."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .analyze import DesignSpec, ModelInfo, load_registry
from .backends import BackendConfig
from .cluster import threshold_id
from .core import HS_CONCISE, ZERO_SHOT, Condition, InstructionVariant, canonical_task
from .errors import ConfigError
from .infer import PromptBudget
from .retrieve import CENTROID, DEFAULT_K

KEYS = {"tasks", "embedding", "generator", "judge", "models", "output_root", "k", "budget", "seed", "variants",
        "conditions", "registry", "design", "index_mode", "judge_repeats", "generation_retries"}
_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate(value):
    if isinstance(value, str):
        def sub(m):
            name, default = m.group(1), m.group(2)
            if name in os.environ:
                return os.environ[name]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {name} is not set")
        return _ENV.sub(sub, value)
    if isinstance(value, list):
        return [interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: interpolate(v) for k, v in value.items()}
    return value


@dataclass
class TaskConfig:
    name: str
    corpus: Path
    thresholds: list[float]

    @property
    def threshold_ids(self) -> list[str]:
        return [threshold_id(t) for t in self.thresholds]


@dataclass
class PipelineConfig:
    tasks: dict[str, TaskConfig]
    embedding: BackendConfig
    generator: BackendConfig
    judge: BackendConfig
    models: list[BackendConfig]
    output_root: Path
    k: int = DEFAULT_K
    budget: PromptBudget = field(default_factory=PromptBudget)
    seed: int = 0
    variants: list[InstructionVariant] = field(default_factory=lambda: [HS_CONCISE])
    conditions: list[Condition] = field(default_factory=lambda: [ZERO_SHOT, Condition.parse("instructed:hs_concise")])
    registry: dict[str, ModelInfo] = field(default_factory=dict)
    design: DesignSpec = field(default_factory=DesignSpec)
    index_mode: str = CENTROID
    judge_repeats: int = 3
    generation_retries: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not self.tasks:
            raise ConfigError("config lists no tasks")

    def task(self, name: str) -> TaskConfig:
        key = canonical_task(name)
        for t in self.tasks.values():
            if t.name.lower() == key.lower():
                return t
        raise ConfigError(f"task {name!r} not in config (have {sorted(self.tasks)})")

    def select_tasks(self, names) -> list[TaskConfig]:
        return [self.task(n) for n in names] if names else list(self.tasks.values())


def _backend(d, what: str) -> BackendConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"{what}: expected a mapping")
    return BackendConfig.from_dict(d)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    data = interpolate(raw)
    base = path.parent
    try:
        tasks = {}
        for name, t in data["tasks"].items():
            corpus = Path(t["corpus"])
            corpus = corpus if corpus.is_absolute() else base / corpus
            tasks[canonical_task(name)] = TaskConfig(canonical_task(name), corpus,
                                                     [float(x) for x in t.get("thresholds", [])])
        generator = _backend(data["generator"], "generator")
        root = Path(data.get("output_root", "work"))
        design = data.get("design", {})
        cfg = PipelineConfig(
            tasks=tasks,
            embedding=_backend(data["embedding"], "embedding"),
            generator=generator,
            judge=_backend(data.get("judge", data["generator"]), "judge"),
            models=[_backend(m, "models") for m in data.get("models", [])],
            output_root=root if root.is_absolute() else base / root,
            k=int(data.get("k", DEFAULT_K)),
            budget=PromptBudget(**data.get("budget", {})),
            seed=int(data.get("seed", 0)),
            variants=[InstructionVariant.parse(v) for v in data.get("variants", ["hs_concise"])],
            conditions=[Condition.parse(c) for c in data.get("conditions", ["zeroshot", "instructed:hs_concise"])],
            registry=load_registry(data.get("registry", {})),
            design=DesignSpec(
                reference_family=design.get("reference_family", "llama3"),
                interactions=tuple(tuple(x.split(":")) for x in design.get("interactions", ["log_model_size:verbose"])),
            ),
            index_mode=data.get("index_mode", CENTROID),
            judge_repeats=int(data.get("judge_repeats", 3)),
            generation_retries=int(data.get("generation_retries", 2)),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg
