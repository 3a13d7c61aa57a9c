"""Cluster-level instruction retrieval for small language models.

Build a corpus of two-section instructions from clustered training questions,
retrieve them for test questions, evaluate, judge, and analyze.
"""
from .analyze import DesignSpec, FitResult, ModelInfo, build_design, export_long, fit_design, fit_logistic, marginal_effects
from .backends import (
    BackendConfig,
    ChatBackend,
    ChatRequest,
    EmbeddingBackend,
    EmbeddingCache,
    HashEmbeddings,
    MockChat,
    OpenAIChat,
    OpenAIEmbeddings,
    chat,
    embed_batch,
    make_chat,
    make_embedder,
)
from .cluster import (
    ClusterCut,
    ClusterStats,
    Dendrogram,
    build_dendrogram,
    cluster_stats,
    cosine_distance,
    cut_dendrogram,
    silhouette_samples,
    threshold_id,
)
from .config import PipelineConfig, load_config
from .core import (
    VARIANTS,
    ZERO_SHOT,
    Condition,
    ConditionKind,
    EmbeddingVector,
    EvalRecord,
    Instruction,
    InstructionVariant,
    Question,
    Split,
    load_questions,
    validate_corpus,
)
from .errors import *  # noqa: F401,F403
from .evalharness import AccuracyTable, ExperimentPlan, aggregate, length_profile, run_plan, threshold_sweep
from .infer import PromptBudget, assemble_prompt, extract_answer, run_inference
from .instructgen import InstructionStore, generate_corpus, parse_instruction, render_prompt
from .judge import RubricScore, apply_caps, judge_corpus, judge_instruction
from .retrieve import RetrievalIndex, build_index, top_k
from .tokens import count_tokens, register_tokenizer
from .workspace import ResultsStore, Workspace

__version__ = "0.1.0"
