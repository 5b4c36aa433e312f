"""Psychological feature extraction: prompt, parser, vectorizer, cache.

The analyst role is a chat model instructed to answer with a strict JSON
object covering six risk indicators. Replies are untrusted, so the parser
extracts the first balanced JSON object even when the model wraps it in
prose. Parsed analyses vectorize to a fixed 9-dimensional layout:

    [intent, distress low/medium/high/unknown (one-hot), plan, metaphor,
     farewell, reasoning character count]

Reasoning length is measured on the raw string, before any whitespace
normalization.
"""

from __future__ import annotations

import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .core import Dataset
from .errors import AnalystError, DimensionError, ParseError, SchemaError

__all__ = [
    "FEATURE_DIM",
    "FEATURE_NAMES",
    "Analyst",
    "Distress",
    "FeatureCache",
    "FundamentalAnalysis",
    "PromptPair",
    "analyst_system_prompt",
    "build_analyst_prompt",
    "check_feature_vector",
    "extract_features",
    "parse_analysis",
    "vectorize",
]

FEATURE_DIM = 9
FEATURE_NAMES = (
    "suicide_intent",
    "distress_low",
    "distress_medium",
    "distress_high",
    "distress_unknown",
    "has_plan",
    "is_metaphor",
    "farewell_hint",
    "reasoning_length",
)

PROMPT_VERSION = "v1"


class Distress(Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    # Assigned only by the parser when the value is missing or unparsable;
    # the analyst prompt never offers it as an option.
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class FundamentalAnalysis:
    """The six risk indicators produced by the analyst."""

    suicide_intent: bool
    emotional_distress_level: Distress
    has_plan: bool
    is_metaphor: bool
    farewell_hint: bool
    reasoning: str = ""

    def to_dict(self) -> dict:
        return {
            "suicide_intent": self.suicide_intent,
            "emotional_distress_level": self.emotional_distress_level.value,
            "has_plan": self.has_plan,
            "is_metaphor": self.is_metaphor,
            "farewell_hint": self.farewell_hint,
            "reasoning": self.reasoning,
        }


@dataclass(frozen=True)
class PromptPair:
    system: str
    user: str


def _load_prompt(name: str) -> str:
    return resources.files("riskcascade").joinpath(f"prompts/{name}").read_text(encoding="utf-8")


def analyst_system_prompt() -> str:
    """The bundled analyst system prompt, verbatim."""
    return _load_prompt("analyst_system.txt")


def build_analyst_prompt(text: str) -> PromptPair:
    """Pair the bundled analyst system prompt with the raw post text.

    The user message is the post text byte-exact; no escaping happens at
    the prompt level.
    """
    if not text:
        raise ValueError("post text must be non-empty")
    return PromptPair(system=analyst_system_prompt(), user=text)


def _first_json_object(raw: str) -> dict:
    """Extract the first balanced top-level JSON object from untrusted text."""
    decoder = json.JSONDecoder()
    idx = raw.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(raw, idx)
        except json.JSONDecodeError:
            idx = raw.find("{", idx + 1)
            continue
        if isinstance(obj, dict):
            return obj
        idx = raw.find("{", idx + 1)
    raise ParseError("no JSON object found in reply")


_BOOL_FIELDS = ("suicide_intent", "has_plan", "is_metaphor", "farewell_hint")


def parse_analysis(raw: str) -> FundamentalAnalysis:
    """Parse an analyst reply into a FundamentalAnalysis.

    The four indicator fields must be JSON booleans (SchemaError otherwise).
    The distress string is matched case-insensitively against low/medium/high;
    anything else, including a missing field, maps to UNKNOWN. A missing or
    non-string reasoning becomes the empty string.
    """
    obj = _first_json_object(raw)
    bools = {}
    for name in _BOOL_FIELDS:
        if name not in obj:
            raise SchemaError(name, "missing")
        value = obj[name]
        if not isinstance(value, bool):
            raise SchemaError(name, f"expected a JSON boolean, got {value!r}")
        bools[name] = value
    distress = Distress.UNKNOWN
    raw_distress = obj.get("emotional_distress_level")
    if isinstance(raw_distress, str):
        lowered = raw_distress.strip().lower()
        if lowered in ("low", "medium", "high"):
            distress = Distress(lowered)
    reasoning = obj.get("reasoning")
    if not isinstance(reasoning, str):
        reasoning = ""
    return FundamentalAnalysis(
        suicide_intent=bools["suicide_intent"],
        emotional_distress_level=distress,
        has_plan=bools["has_plan"],
        is_metaphor=bools["is_metaphor"],
        farewell_hint=bools["farewell_hint"],
        reasoning=reasoning,
    )


_DISTRESS_ORDER = (Distress.LOW, Distress.MEDIUM, Distress.HIGH, Distress.UNKNOWN)


def vectorize(a: FundamentalAnalysis) -> np.ndarray:
    """Encode an analysis as the canonical 9-dimensional float vector."""
    vec = np.zeros(FEATURE_DIM, dtype=np.float64)
    vec[0] = 1.0 if a.suicide_intent else 0.0
    vec[1 + _DISTRESS_ORDER.index(a.emotional_distress_level)] = 1.0
    vec[5] = 1.0 if a.has_plan else 0.0
    vec[6] = 1.0 if a.is_metaphor else 0.0
    vec[7] = 1.0 if a.farewell_hint else 0.0
    vec[8] = float(len(a.reasoning))
    return vec


def check_feature_vector(vec: np.ndarray) -> np.ndarray:
    """Validate the feature-vector invariants; returns the vector unchanged."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.shape != (FEATURE_DIM,):
        raise DimensionError(f"feature vector must have shape ({FEATURE_DIM},), got {arr.shape}")
    for i in (0, 5, 6, 7):
        if arr[i] not in (0.0, 1.0):
            raise ValueError(f"component {i} must be 0.0 or 1.0, got {arr[i]!r}")
    one_hot = arr[1:5]
    if not (np.all(np.isin(one_hot, (0.0, 1.0))) and one_hot.sum() == 1.0):
        raise ValueError(f"distress components {one_hot.tolist()} are not one-hot")
    if arr[8] < 0:
        raise ValueError("reasoning length must be non-negative")
    return arr


def text_key(text: str) -> str:
    """Content hash of the exact post text, used as the cache key."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class FeatureCache:
    """A jsonl-persisted map from text hashes to analyses.

    Entries carry the prompt version they were produced under; lookups only
    hit entries matching the cache's configured version. Reads are lock-free
    after load; appends are serialized.
    """

    def __init__(self, path: str | Path | None = None, prompt_version: str = PROMPT_VERSION):
        self.path = Path(path) if path is not None else None
        self.prompt_version = prompt_version
        self._entries: dict[str, FundamentalAnalysis] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                if record.get("prompt_version") != self.prompt_version:
                    continue
                a = record["analysis"]
                self._entries[record["key"]] = FundamentalAnalysis(
                    suicide_intent=bool(a["suicide_intent"]),
                    emotional_distress_level=Distress(a["emotional_distress_level"]),
                    has_plan=bool(a["has_plan"]),
                    is_metaphor=bool(a["is_metaphor"]),
                    farewell_hint=bool(a["farewell_hint"]),
                    reasoning=a.get("reasoning", ""),
                )

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, text: str) -> Optional[FundamentalAnalysis]:
        return self._entries.get(text_key(text))

    def put(self, text: str, analysis: FundamentalAnalysis) -> None:
        key = text_key(text)
        record = {
            "key": key,
            "prompt_version": self.prompt_version,
            "analysis": analysis.to_dict(),
        }
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = analysis
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")


class ChatClient(Protocol):
    def chat(self, system: str, user: str) -> str: ...


class Analyst:
    """Wraps a chat client into the analyst role with bounded retries.

    A transport failure or an unparsable reply is retried up to
    ``max_retries`` times; the last error propagates afterwards.
    """

    def __init__(self, client: ChatClient, max_retries: int = 2):
        if max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        self.client = client
        self.max_retries = max_retries

    def analyze(self, text: str) -> FundamentalAnalysis:
        prompt = build_analyst_prompt(text)
        last_error: Exception | None = None
        for _ in range(self.max_retries + 1):
            try:
                reply = self.client.chat(prompt.system, prompt.user)
                return parse_analysis(reply)
            except (ParseError, SchemaError, RuntimeError) as exc:
                last_error = exc
        raise last_error


class SupportsAnalyze(Protocol):
    def analyze(self, text: str) -> FundamentalAnalysis: ...


def extract_features(
    ds: Dataset,
    analyst: SupportsAnalyze,
    cache: FeatureCache,
    parallelism: int = 4,
) -> np.ndarray:
    """Resolve every post to a feature vector, cache-first, order-aligned.

    Uncached texts are deduplicated by content hash and analyzed with up to
    ``parallelism`` concurrent requests; fresh analyses are appended to the
    cache. The operation is all-or-nothing: any post failing after retries
    raises AnalystError and no matrix is returned (cache appends that already
    happened are kept, as is the cache's job).
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    analyses: dict[str, FundamentalAnalysis] = {}
    pending: dict[str, str] = {}  # key -> representative text
    pending_post: dict[str, str] = {}  # key -> first post id needing it
    for post in ds.posts:
        key = text_key(post.text)
        cached = cache.get(post.text)
        if cached is not None:
            analyses[key] = cached
        elif key not in pending:
            pending[key] = post.text
            pending_post[key] = post.id

    def resolve(key: str) -> tuple[str, FundamentalAnalysis]:
        return key, analyst.analyze(pending[key])

    if pending:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = {pool.submit(resolve, key): key for key in pending}
            for future in futures:
                key = futures[future]
                try:
                    _, analysis = future.result()
                except Exception as exc:
                    raise AnalystError(pending_post[key], exc) from exc
                analyses[key] = analysis
                cache.put(pending[key], analysis)

    matrix = np.zeros((len(ds), FEATURE_DIM), dtype=np.float64)
    for i, post in enumerate(ds.posts):
        matrix[i] = vectorize(analyses[text_key(post.text)])
    return matrix
