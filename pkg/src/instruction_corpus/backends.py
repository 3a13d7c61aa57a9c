"""Embedding and chat clients for OpenAI-compatible services, plus offline mocks.

Both client kinds speak the ``/v1/embeddings`` and ``/v1/chat/completions``
JSON shapes, so the same code talks to hosted APIs and local servers. The mock
backends ship with the library: the acceptance suite and offline demos run on
them.

Embedding cache layout (``EmbeddingCache``)::

    <root>/manifest.jsonl          one {"key", "model", "dim"} object per line
    <root>/vectors/<kk>/<key>.npy  float64 vector, kk = first two hex chars

``key`` is the sha256 of ``model_name + "\\0" + text`` (UTF-8), so changing the
model name always misses.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

from .core import EmbeddingVector
from .errors import (
    AuthError,
    BackendError,
    ConfigError,
    DimensionMismatch,
    EmptyCompletion,
    NetworkError,
)

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_TOP_P = 0.95


@dataclass(frozen=True)
class ChatRequest:
    user: str
    system: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.user:
            raise ValueError("chat request needs a non-empty user message")
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p {self.top_p} outside (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def messages(self) -> list[dict]:
        msgs = []
        if self.system:
            msgs.append({"role": "system", "content": self.system})
        msgs.append({"role": "user", "content": self.user})
        return msgs


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one model service.

    ``provider`` is ``"openai"`` for any OpenAI-compatible HTTP server or
    ``"mock"`` for the built-in offline backends; ``options`` carries
    provider-specific knobs (mock dim/seed/behaviour, embedding batch size).
    ``max_retries`` is the total number of attempts per request.
    """

    model_name: str
    provider: str = "openai"
    base_url: str = "https://api.openai.com/v1"
    api_key_env_var: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 3
    max_concurrency: int = 4
    backoff_s: float = 1.0
    options: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if self.timeout_s <= 0:
            raise ConfigError("timeout_s must be > 0")
        if self.max_retries < 1:
            raise ConfigError("max_retries must be >= 1")
        if self.provider not in ("openai", "mock"):
            raise ConfigError(f"unknown provider {self.provider!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown backend config keys: {sorted(extra)}")
        if "model_name" not in d:
            raise ConfigError("backend config needs model_name")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "provider": self.provider,
            "base_url": self.base_url,
            "api_key_env_var": self.api_key_env_var,
            "timeout_s": self.timeout_s,
            "max_retries": self.max_retries,
            "max_concurrency": self.max_concurrency,
            "backoff_s": self.backoff_s,
            "options": dict(self.options),
        }


class EmbeddingCache:
    """Content-addressed on-disk vector cache; writes are serialized by a lock."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._manifest = self.root / "manifest.jsonl"
        self._lock = threading.Lock()
        self._index: dict[str, int] = {}
        if self._manifest.exists():
            with open(self._manifest, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = json.loads(line)
                        self._index[entry["key"]] = entry["dim"]

    @staticmethod
    def key(model_name: str, text: str) -> str:
        h = hashlib.sha256()
        h.update(model_name.encode("utf-8"))
        h.update(b"\0")
        h.update(text.encode("utf-8"))
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / "vectors" / key[:2] / f"{key}.npy"

    def __len__(self) -> int:
        return len(self._index)

    def get(self, model_name: str, text: str) -> np.ndarray | None:
        key = self.key(model_name, text)
        if key not in self._index:
            return None
        return np.load(self._path(key))

    def put(self, model_name: str, text: str, vector: np.ndarray) -> None:
        key = self.key(model_name, text)
        vector = np.asarray(vector, dtype=np.float64)
        with self._lock:
            if key in self._index:
                return
            path = self._path(key)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp.npy")
            np.save(tmp, vector)
            tmp.replace(path)
            with open(self._manifest, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key, "model": model_name, "dim": int(vector.size)}) + "\n")
            self._index[key] = int(vector.size)


class EmbeddingBackend:
    """Base class: validation, caching, and dimension checks around ``_embed``."""

    model_name: str

    def __init__(self, model_name: str, cache: EmbeddingCache | None = None):
        self.model_name = model_name
        self.cache = cache
        self.calls = 0  # uncached batches sent to the service

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = list(texts)
        if not texts:
            raise ValueError("embed_batch needs at least one text")
        if any(not t for t in texts):
            raise ValueError("cannot embed an empty text")
        out: dict[str, np.ndarray] = {}
        missing: list[str] = []
        for t in texts:
            if t in out or t in missing:
                continue
            hit = self.cache.get(self.model_name, t) if self.cache else None
            if hit is not None:
                out[t] = hit
            else:
                missing.append(t)
        if missing:
            self.calls += 1
            fresh = self._embed(missing)
            if len(fresh) != len(missing):
                raise BackendError(f"service returned {len(fresh)} vectors for {len(missing)} texts")
            for t, v in zip(missing, fresh):
                v = np.asarray(v, dtype=np.float64)
                out[t] = v
                if self.cache is not None:
                    self.cache.put(self.model_name, t, v)
        dims = {out[t].size for t in texts}
        if len(dims) != 1:
            raise DimensionMismatch(f"inconsistent embedding dims {sorted(dims)}")
        return [EmbeddingVector.from_array(out[t], self.model_name) for t in texts]


def embed_batch(texts: Sequence[str], backend: EmbeddingBackend) -> list[EmbeddingVector]:
    return backend.embed_batch(texts)


class ChatBackend:
    """Base class for chat completion; enforces the concurrency ceiling."""

    def __init__(self, model_name: str, max_concurrency: int = 4):
        self.model_name = model_name
        self.max_concurrency = max_concurrency
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self.calls = 0
        self._count_lock = threading.Lock()

    def _complete(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def chat(self, request: ChatRequest) -> str:
        with self._count_lock:
            self.calls += 1
        with self._slots:
            text = self._complete(request)
        if not text or not text.strip():
            raise EmptyCompletion(f"{self.model_name} returned an empty completion")
        return text


def chat(request: ChatRequest, backend: ChatBackend) -> str:
    return backend.chat(request)


# --- OpenAI-compatible HTTP clients ----------------------------------------


class _Http:
    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self._client = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            timeout=cfg.timeout_s,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)

    def _headers(self) -> dict:
        if not self.cfg.api_key_env_var:
            return {}
        key = os.environ.get(self.cfg.api_key_env_var)
        if not key:
            raise AuthError(f"environment variable {self.cfg.api_key_env_var} is not set")
        return {"Authorization": f"Bearer {key}"}

    def post(self, path: str, body: dict) -> dict:
        headers = self._headers()
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries):
            if attempt:
                time.sleep(self.cfg.backoff_s * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(path, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = exc
                log.warning("%s %s attempt %d failed: %s", self.cfg.model_name, path, attempt + 1, exc)
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"{path}: HTTP {resp.status_code} (key rejected)")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = NetworkError(f"{path}: HTTP {resp.status_code}")
                log.warning("%s %s attempt %d: HTTP %d", self.cfg.model_name, path, attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendError(f"{path}: response is not JSON") from exc
        raise NetworkError(f"{path}: gave up after {self.cfg.max_retries} attempts ({last})")


class OpenAIEmbeddings(EmbeddingBackend):
    def __init__(self, cfg: BackendConfig, cache: EmbeddingCache | None = None,
                 transport: httpx.BaseTransport | None = None):
        super().__init__(cfg.model_name, cache)
        self.cfg = cfg
        self.batch_size = int(cfg.options.get("batch_size", 64))
        self._http = _Http(cfg, transport)

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for i in range(0, len(texts), self.batch_size):
            chunk = texts[i : i + self.batch_size]
            data = self._http.post("/embeddings", {"model": self.cfg.model_name, "input": chunk})
            try:
                items = sorted(data["data"], key=lambda d: d["index"])
                out.extend(np.asarray(d["embedding"], dtype=np.float64) for d in items)
            except (KeyError, TypeError) as exc:
                raise BackendError("malformed embeddings response") from exc
        return out


class OpenAIChat(ChatBackend):
    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None):
        super().__init__(cfg.model_name, cfg.max_concurrency)
        self.cfg = cfg
        self._http = _Http(cfg, transport)

    def _complete(self, request: ChatRequest) -> str:
        body = {
            "model": self.cfg.model_name,
            "messages": request.messages(),
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        data = self._http.post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("malformed chat completion response") from exc


# --- offline mocks -----------------------------------------------------------

_TOKEN = re.compile(r"\w+")


def _seeded_rng(*parts: str) -> np.random.Generator:
    digest = hashlib.sha256("\0".join(parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def hash_vector(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-embedding: sum of per-token Gaussian hashes.

    Texts sharing vocabulary land close together under cosine distance, which
    keeps offline clustering and retrieval meaningful.
    """
    tokens = _TOKEN.findall(text.lower())
    vec = 0.05 * _seeded_rng(str(seed), "text", text).standard_normal(dim)
    for tok in tokens:
        vec += _seeded_rng(str(seed), "tok", tok).standard_normal(dim)
    return vec


class HashEmbeddings(EmbeddingBackend):
    def __init__(self, dim: int = 64, seed: int = 0, model_name: str = "mock-embedding",
                 cache: EmbeddingCache | None = None):
        super().__init__(model_name, cache)
        self.dim = dim
        self.seed = seed

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        return [hash_vector(t, self.dim, self.seed) for t in texts]


Responder = Callable[[ChatRequest], str]


class MockChat(ChatBackend):
    """Chat backend driven by a Python callable; keeps a log of every request."""

    def __init__(self, responder: Responder, model_name: str = "mock-chat", max_concurrency: int = 4):
        super().__init__(model_name, max_concurrency)
        self.responder = responder
        self.log: list[ChatRequest] = []
        self._log_lock = threading.Lock()

    def _complete(self, request: ChatRequest) -> str:
        with self._log_lock:
            self.log.append(request)
        return self.responder(request)


def echo_chat(model_name: str = "mock-echo") -> MockChat:
    return MockChat(lambda req: req.user, model_name)


def canned_chat(text: str, model_name: str = "mock-canned") -> MockChat:
    return MockChat(lambda req: text, model_name)


def scripted_chat(outputs: Iterable[str | Exception], model_name: str = "mock-scripted") -> MockChat:
    """Replies with successive items; exceptions in the script are raised."""
    items = list(outputs)
    lock = threading.Lock()

    def respond(req: ChatRequest) -> str:
        with lock:
            item = items.pop(0) if len(items) > 1 else items[0]
        if isinstance(item, Exception):
            raise item
        return item

    return MockChat(respond, model_name)


_QUESTION_LINE = re.compile(r"^Question: (.*)$", re.M)


class AnswerKeyChat(MockChat):
    """Answers multiple-choice prompts from an answer key.

    With ``require_instruction`` the gold letter is given only when a
    retrieved instruction section is present in the prompt; otherwise the
    reply carries no extractable answer.
    """

    def __init__(self, questions, require_instruction: bool = False,
                 model_name: str = "mock-answer-key", fallback: str = "I am not sure."):
        self.key = {_first_line(q.stem): q.gold for q in questions}
        self.require_instruction = require_instruction
        self.fallback = fallback
        super().__init__(self._respond, model_name)

    def _respond(self, req: ChatRequest) -> str:
        if self.require_instruction and not _has_instruction(req.user):
            return self.fallback
        matches = _QUESTION_LINE.findall(req.user)
        for stem in reversed(matches):
            if stem in self.key:
                return f"Answer: {self.key[stem]}"
        return self.fallback


def _first_line(text: str) -> str:
    return text.splitlines()[0] if text else ""


def _has_instruction(prompt: str) -> bool:
    return "## Background Knowledge" in prompt or "## Reasoning Steps" in prompt


JUDGE_MARKER = '"knowledge_comprehensiveness"'


def auto_responder(seed: int = 0) -> Responder:
    """Deterministic stand-in for a general model, recognizing the pipeline's prompts.

    Generation prompts get a well-formed two-section instruction, judge prompts
    get rubric JSON, and multiple-choice prompts get a hashed option letter.
    """

    def respond(req: ChatRequest) -> str:
        text = req.user
        rng = _seeded_rng(str(seed), "chat", text)
        if "<examples>" in text:
            stems = _QUESTION_LINE.findall(text)
            words = sorted({w for s in stems for w in _TOKEN.findall(s.lower()) if len(w) > 4})[:12]
            topic = ", ".join(words) or "the shared concepts"
            return (
                "Here is the guide.\n\n"
                "## Background Knowledge\n"
                f"- Key concepts: {topic}.\n"
                "- Distinguish the decisive clue from supporting detail.\n\n"
                "## Reasoning Steps\n"
                "1. Identify what the question asks.\n"
                "2. Match the key clues to the background concepts.\n"
                "3. Eliminate options that contradict the clues and pick the remaining one.\n"
            )
        if JUDGE_MARKER in text:
            scores = rng.integers(4, 6, size=5).tolist()
            names = ["knowledge_comprehensiveness", "knowledge_relevance", "reasoning_accuracy",
                     "reasoning_relevance", "clarity"]
            flags = ["factual_error_in_steps", "required_step_missing",
                     "background_mostly_tangential", "step_boundaries_unclear"]
            payload = dict(zip(names, scores))
            payload.update({f: False for f in flags})
            return json.dumps(payload)
        labels = re.findall(r"^([A-E])\. ", text, re.M) or ["A"]
        return f"Answer: {labels[int(rng.integers(len(labels)))]}"

    return respond


class OpenAICompatibleMock:
    """In-process OpenAI-compatible server exposed as an ``httpx`` transport.

    Records every request body, tracks peak in-flight concurrency, and can be
    told to fail the next ``n`` requests with a given status.
    """

    def __init__(self, responder: Responder | None = None, dim: int = 16, seed: int = 0,
                 latency_s: float = 0.0):
        self.responder = responder or auto_responder(seed)
        self.dim = dim
        self.seed = seed
        self.latency_s = latency_s
        self.requests: list[tuple[str, dict]] = []
        self.failures: list[int] = []
        self.in_flight = 0
        self.peak_in_flight = 0
        self._lock = threading.Lock()
        self.transport = httpx.MockTransport(self._handle)

    def fail_next(self, n: int, status: int = 503) -> None:
        with self._lock:
            self.failures.extend([status] * n)

    def _handle(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content or b"{}")
        with self._lock:
            self.requests.append((request.url.path, body))
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            status = self.failures.pop(0) if self.failures else None
        try:
            if self.latency_s:
                time.sleep(self.latency_s)
            if status is not None:
                return httpx.Response(status, json={"error": {"message": "injected failure"}})
            if request.url.path.endswith("/embeddings"):
                inputs = body["input"]
                inputs = [inputs] if isinstance(inputs, str) else inputs
                data = [
                    {"object": "embedding", "index": i,
                     "embedding": hash_vector(t, self.dim, self.seed).tolist()}
                    for i, t in enumerate(inputs)
                ]
                return httpx.Response(200, json={"object": "list", "data": data, "model": body.get("model")})
            if request.url.path.endswith("/chat/completions"):
                msgs = body["messages"]
                system = next((m["content"] for m in msgs if m["role"] == "system"), None)
                user = next(m["content"] for m in msgs if m["role"] == "user")
                req = ChatRequest(user=user, system=system, temperature=body.get("temperature", 1.0),
                                  top_p=body.get("top_p", 1.0), max_tokens=body.get("max_tokens", 1024))
                content = self.responder(req)
                return httpx.Response(200, json={
                    "object": "chat.completion",
                    "model": body.get("model"),
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": content},
                                 "finish_reason": "stop"}],
                })
            return httpx.Response(404, json={"error": {"message": "not found"}})
        finally:
            with self._lock:
                self.in_flight -= 1

    def paths(self, suffix: str) -> list[dict]:
        return [body for path, body in self.requests if path.endswith(suffix)]


def make_embedder(cfg: BackendConfig, cache: EmbeddingCache | None = None) -> EmbeddingBackend:
    if cfg.provider == "mock":
        return HashEmbeddings(dim=int(cfg.options.get("dim", 64)), seed=int(cfg.options.get("seed", 0)),
                              model_name=cfg.model_name, cache=cache)
    return OpenAIEmbeddings(cfg, cache)


def make_chat(cfg: BackendConfig) -> ChatBackend:
    if cfg.provider == "mock":
        behaviour = cfg.options.get("behaviour", "auto")
        if behaviour == "echo":
            responder: Responder = lambda req: req.user
        elif behaviour == "auto":
            responder = auto_responder(int(cfg.options.get("seed", 0)))
        elif behaviour == "canned":
            text = cfg.options["text"]
            responder = lambda req: text
        else:
            raise ConfigError(f"unknown mock behaviour {behaviour!r}")
        return MockChat(responder, cfg.model_name, cfg.max_concurrency)
    return OpenAIChat(cfg)
