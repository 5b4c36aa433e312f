"""Classifier roles: probability scorers, persona agents, remote clients, mocks.

The first-stage scorer is pluggable: anything exposing score(text) -> float
fills the role. The built-in baseline is a hashed-unigram logistic model that
trains in seconds and keeps the whole pipeline network-free; the remote
client lets a served transformer take over in deployment.

Persona agents answer with a free-text reply ending in a ``Label:`` line;
replies that violate the format become abstentions so voting always proceeds.
"""

from __future__ import annotations

import re
import threading
import time
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
import requests
from scipy import sparse

from .analysis import FundamentalAnalysis, Distress, _load_prompt
from .core import Dataset, Label, check_probability
from .errors import DegenerateDataError, ProtocolError, TransportError
from .modelio import dump_model, load_model

__all__ = [
    "AgentPersona",
    "BaselineScorer",
    "ChatClient",
    "HttpChatClient",
    "KeywordAnalystMock",
    "MockChatClient",
    "RemoteScorer",
    "Scorer",
    "TrainBaselineConfig",
    "Verdict",
    "agent_classify",
    "remote_score",
    "train_baseline",
]


class Scorer(Protocol):
    """Behavioral contract: score(text) returns P(positive | text), deterministically."""

    def score(self, text: str) -> float: ...


class AgentPersona(Enum):
    """The three prompting styles, each bundling its verbatim system prompt."""

    BULLISH = "bullish"
    BEARISH = "bearish"
    EXPERT = "expert"

    @property
    def system_prompt(self) -> str:
        return _load_prompt(f"agent_{self.value}.txt")


@dataclass(frozen=True)
class Verdict:
    """An agent's decision, or an abstention when the reply was unusable."""

    label: Optional[Label]
    reason: str = ""

    @classmethod
    def suicide(cls) -> "Verdict":
        return cls(Label.SUICIDE)

    @classmethod
    def non_suicide(cls) -> "Verdict":
        return cls(Label.NON_SUICIDE)

    @classmethod
    def abstain(cls, reason: str) -> "Verdict":
        return cls(None, reason)

    @property
    def is_abstain(self) -> bool:
        return self.label is None


# ---------------------------------------------------------------------------
# Built-in baseline scorer: hashed unigram counts + logistic loss.
# ---------------------------------------------------------------------------


@dataclass
class TrainBaselineConfig:
    epochs: int = 300
    learning_rate: float = 0.5
    seed: int = 0
    hash_bits: int = 18


def _hash_token(token: str, mask: int) -> int:
    return zlib.crc32(token.encode("utf-8")) & mask


def _hashed_counts(text: str, bits: int) -> dict[int, float]:
    mask = (1 << bits) - 1
    counts: dict[int, float] = {}
    for token in text.lower().split():
        bucket = _hash_token(token, mask)
        counts[bucket] = counts.get(bucket, 0.0) + 1.0
    return counts


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class BaselineScorer:
    """Logistic model over 2^hash_bits hashed unigram buckets."""

    KIND = "hashed_unigram_logistic"

    def __init__(self, weights: np.ndarray, bias: float, hash_bits: int, seed: int = 0,
                 loss_history: Optional[list[float]] = None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.hash_bits = hash_bits
        self.seed = seed
        self.loss_history = loss_history or []

    def score(self, text: str) -> float:
        z = self.bias
        for bucket, count in _hashed_counts(text, self.hash_bits).items():
            z += self.weights[bucket] * count
        p = float(_sigmoid(z))
        # keep the contract open-interval even when the margin saturates
        return min(max(p, 1e-12), 1.0 - 1e-12)

    def save(self, path: str | Path) -> None:
        nz = np.nonzero(self.weights)[0]
        payload = {
            "hash_bits": self.hash_bits,
            "bias": self.bias,
            "indices": nz.tolist(),
            "values": self.weights[nz].tolist(),
        }
        dump_model(path, self.KIND, payload, seed=self.seed, feature_dim=1 << self.hash_bits)

    @classmethod
    def load(cls, path: str | Path) -> "BaselineScorer":
        document = load_model(path, expected_kind=cls.KIND)
        payload = document["payload"]
        dim = 1 << payload["hash_bits"]
        if document["feature_dim"] != dim:
            raise ValueError(f"{path}: feature_dim does not match hash_bits")
        weights = np.zeros(dim, dtype=np.float64)
        weights[np.asarray(payload["indices"], dtype=np.intp)] = payload["values"]
        return cls(weights, payload["bias"], payload["hash_bits"], seed=document["seed"])


def train_baseline(train: Dataset, config: TrainBaselineConfig | None = None) -> BaselineScorer:
    """Fit the baseline by full-batch gradient descent on average logistic loss.

    Backtracking halves the step whenever it would increase the loss, so the
    per-epoch training loss is non-increasing. Training is deterministic, and
    the seed is recorded in the dump for provenance.
    """
    config = config or TrainBaselineConfig()
    labels = [p.gold_label for p in train.posts]
    if any(l is None for l in labels):
        raise DegenerateDataError("baseline training requires gold labels on every post")
    y = np.array([l.value for l in labels], dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("baseline training requires both label classes")

    dim = 1 << config.hash_bits
    rows, cols, vals = [], [], []
    for i, post in enumerate(train.posts):
        for bucket, count in _hashed_counts(post.text, config.hash_bits).items():
            rows.append(i)
            cols.append(bucket)
            vals.append(count)
    X = sparse.csr_matrix((vals, (rows, cols)), shape=(len(train.posts), dim))

    n = len(y)
    w = np.zeros(dim, dtype=np.float64)
    b = 0.0

    def loss(w_, b_):
        z = X @ w_ + b_
        # mean log(1 + exp(-y~ z)) with y~ in {-1, +1}
        margins = np.where(y == 1.0, z, -z)
        return float(np.mean(np.logaddexp(0.0, -margins)))

    history = [loss(w, b)]
    lr = config.learning_rate
    for _ in range(config.epochs):
        p = _sigmoid(X @ w + b)
        grad_w = X.T @ (p - y) / n
        grad_b = float(np.mean(p - y))
        step = lr
        for _ in range(30):
            cand = loss(w - step * grad_w, b - step * grad_b)
            if cand <= history[-1]:
                break
            step *= 0.5
        else:
            cand = history[-1]
            step = 0.0
        w = w - step * grad_w
        b = b - step * grad_b
        history.append(cand)
    return BaselineScorer(w, b, config.hash_bits, seed=config.seed, loss_history=history)


# ---------------------------------------------------------------------------
# Remote scorer and chat clients.
# ---------------------------------------------------------------------------


def _post_with_retries(url: str, body: dict, max_retries: int, backoff: float,
                       timeout: float, headers: Optional[dict] = None) -> dict:
    """POST JSON with exponential backoff; transport failures exhaust retries."""
    last: Exception | None = None
    for attempt in range(max_retries + 1):
        try:
            response = requests.post(url, json=body, timeout=timeout, headers=headers)
        except requests.RequestException as exc:
            last = exc
        else:
            if response.status_code == 200:
                try:
                    return response.json()
                except ValueError as exc:
                    raise ProtocolError(f"{url}: response is not JSON: {exc}") from exc
            last = RuntimeError(f"HTTP {response.status_code}")
        if attempt < max_retries and backoff > 0:
            time.sleep(backoff * (2**attempt))
    raise TransportError(f"{url}: unreachable after {max_retries + 1} attempts: {last}")


def remote_score(endpoint: str, text: str, max_retries: int = 3, backoff: float = 0.1,
                 timeout: float = 10.0, headers: Optional[dict] = None) -> float:
    """Score a text via the scorer wire protocol.

    POSTs {"text": ...} and expects {"prob_suicide": p} with p in [0, 1].
    A missing or out-of-range field raises ProtocolError without retrying.
    """
    payload = _post_with_retries(endpoint, {"text": text}, max_retries, backoff, timeout, headers)
    if "prob_suicide" not in payload:
        raise ProtocolError(f"{endpoint}: reply lacks 'prob_suicide'")
    value = payload["prob_suicide"]
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ProtocolError(f"{endpoint}: 'prob_suicide' is not a number: {value!r}")
    try:
        return check_probability(float(value), "prob_suicide")
    except ValueError as exc:
        raise ProtocolError(f"{endpoint}: {exc}") from exc


class RemoteScorer:
    """Scorer backed by a /score HTTP service."""

    def __init__(self, endpoint: str, max_retries: int = 3, backoff: float = 0.1,
                 timeout: float = 10.0, headers: Optional[dict] = None):
        self.endpoint = endpoint
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.headers = headers

    def score(self, text: str) -> float:
        return remote_score(self.endpoint, text, self.max_retries, self.backoff,
                            self.timeout, self.headers)


class ChatClient(Protocol):
    def chat(self, system: str, user: str) -> str: ...


class HttpChatClient:
    """Chat client for the generic two-message wire shape.

    POST /chat {"system": ..., "user": ...} -> {"content": ...}.
    """

    def __init__(self, endpoint: str, max_retries: int = 3, backoff: float = 0.1,
                 timeout: float = 30.0, headers: Optional[dict] = None):
        self.endpoint = endpoint
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.headers = headers

    def chat(self, system: str, user: str) -> str:
        payload = _post_with_retries(self.endpoint, {"system": system, "user": user},
                                     self.max_retries, self.backoff, self.timeout, self.headers)
        if "content" not in payload or not isinstance(payload["content"], str):
            raise ProtocolError(f"{self.endpoint}: reply lacks string 'content'")
        return payload["content"]


class MockChatClient:
    """Deterministic chat client driven by a reply function of the user text.

    The call counter is lock-guarded so assertions stay exact when the client
    is shared across escalation-resolution workers.
    """

    def __init__(self, reply_fn: Callable[[str], str]):
        self.reply_fn = reply_fn
        self.calls = 0
        self._lock = threading.Lock()

    def chat(self, system: str, user: str) -> str:
        with self._lock:
            self.calls += 1
        return self.reply_fn(user)


# ---------------------------------------------------------------------------
# Persona agents.
# ---------------------------------------------------------------------------

# "non_suicide" must be tried before "suicide" so the longer token wins.
_LABEL_LINE = re.compile(r"label\s*:\s*\[?\s*(non[_\s-]?suicide|suicide)\s*\]?", re.IGNORECASE)


def agent_classify(client: ChatClient, persona: AgentPersona, text: str) -> Verdict:
    """Ask one persona for a verdict; total over all replies, never raises.

    The reply is scanned for the last line carrying ``Label:`` followed by
    suicide or non_suicide (case-insensitive, brackets and whitespace
    tolerated). Anything else, including transport failure, abstains with
    the raw reply or error recorded.
    """
    try:
        reply = client.chat(persona.system_prompt, text)
    except Exception as exc:
        return Verdict.abstain(f"transport: {exc}")
    found: Optional[str] = None
    for line in reply.splitlines():
        match = _LABEL_LINE.search(line)
        if match:
            found = match.group(1).lower()
    if found is None:
        return Verdict.abstain(reply)
    normalized = re.sub(r"[\s-]", "_", found)
    return Verdict.suicide() if normalized == "suicide" else Verdict.non_suicide()


# ---------------------------------------------------------------------------
# Deterministic mocks for offline runs.
# ---------------------------------------------------------------------------

_RISK_PHRASES = (
    "kill myself", "end my life", "end it", "suicide", "want to die",
    "better off without me", "can't go on", "disappear",
)
_PLAN_WORDS = ("tonight", "pills", "bridge", "rope", "plan")
_METAPHOR_PHRASES = ("killing me", "dying to", "death of me")
_FAREWELL_WORDS = ("goodbye", "farewell", "last message")
_DISTRESS_WORDS = ("hopeless", "worthless", "alone", "trapped", "unbearable")


def keyword_agent_reply(text: str) -> str:
    """Reply function for a mock agent that votes on the risk lexicon."""
    hit = any(p in text.lower() for p in _RISK_PHRASES)
    return "Label: [suicide]" if hit else "Label: [non_suicide]"


class KeywordAnalystMock:
    """Rule-based analyst: a deterministic function of the post text."""

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def analyze(self, text: str) -> FundamentalAnalysis:
        with self._lock:
            self.calls += 1
        lowered = text.lower()
        intent = any(p in lowered for p in _RISK_PHRASES)
        metaphor = any(p in lowered for p in _METAPHOR_PHRASES)
        distress = (
            Distress.HIGH if intent
            else Distress.MEDIUM if any(w in lowered for w in _DISTRESS_WORDS)
            else Distress.LOW
        )
        return FundamentalAnalysis(
            suicide_intent=intent,
            emotional_distress_level=distress,
            has_plan=any(w in lowered for w in _PLAN_WORDS),
            is_metaphor=metaphor,
            farewell_hint=any(w in lowered for w in _FAREWELL_WORDS),
            reasoning="keyword heuristic over risk, plan, metaphor, and farewell cues",
        )
