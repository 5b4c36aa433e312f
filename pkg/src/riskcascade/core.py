"""Core domain types, dataset ingestion, and the tokenization proxy.

A post is a raw text sample with an optional gold label. Labels are binary
with the suicide class as the positive class everywhere in the package.
Token counts are whitespace runs: routing only needs a monotone length
signal, and the length threshold is configurable to compensate for the
coarser proxy.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

from .errors import FormatError

__all__ = [
    "Label",
    "Split",
    "Post",
    "Dataset",
    "check_probability",
    "load_dataset",
    "parse_label",
    "split_dataset",
    "token_length",
]


class Label(Enum):
    """Binary risk label. SUICIDE is the positive class for all metrics."""

    NON_SUICIDE = 0
    SUICIDE = 1

    def to_name(self) -> str:
        return "suicide" if self is Label.SUICIDE else "non_suicide"


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


_LABEL_NAMES = {
    "suicide": Label.SUICIDE,
    "non_suicide": Label.NON_SUICIDE,
}


def parse_label(value) -> Label:
    """Map 0/1 (ints or digit strings) or 'suicide'/'non_suicide' to a Label.

    Accepting both spellings lets one file format serve gold datasets and
    agent transcripts alike.
    """
    if isinstance(value, bool):
        raise ValueError(f"ambiguous boolean label: {value!r}")
    if isinstance(value, int):
        if value in (0, 1):
            return Label(value)
        raise ValueError(f"numeric label must be 0 or 1, got {value!r}")
    if isinstance(value, str):
        text = value.strip().lower()
        if text in ("0", "1"):
            return Label(int(text))
        if text in _LABEL_NAMES:
            return _LABEL_NAMES[text]
    raise ValueError(f"unrecognized label: {value!r}")


@dataclass(frozen=True)
class Post:
    """One text sample, optionally carrying its gold label."""

    id: str
    text: str
    gold_label: Optional[Label] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("post id must be non-empty")
        if not self.text.strip():
            raise ValueError(f"post {self.id!r}: text is empty after trimming")


@dataclass(frozen=True)
class Dataset:
    """An ordered, immutable collection of posts with unique ids."""

    posts: tuple[Post, ...]
    name: str = ""
    split: Split = Split.TEST

    def __post_init__(self) -> None:
        object.__setattr__(self, "posts", tuple(self.posts))
        seen: set[str] = set()
        for post in self.posts:
            if post.id in seen:
                raise ValueError(f"duplicate post id {post.id!r} in dataset {self.name!r}")
            seen.add(post.id)

    def __len__(self) -> int:
        return len(self.posts)

    def __iter__(self):
        return iter(self.posts)

    def labels(self) -> list[Optional[Label]]:
        return [p.gold_label for p in self.posts]


def check_probability(value: float, what: str = "probability") -> float:
    """Validate a scalar as a probability: finite and inside [0, 1]."""
    p = float(value)
    if math.isnan(p):
        raise ValueError(f"{what} is NaN")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{what} {p!r} outside [0, 1]")
    return p


def token_length(text: str) -> int:
    """Number of maximal whitespace-separated runs in the text."""
    return len(text.split())


def _post_from_record(row: int, record: dict) -> Post:
    if "id" not in record or record["id"] in (None, ""):
        raise FormatError(row, "missing 'id'")
    if "text" not in record or record["text"] is None:
        raise FormatError(row, "missing 'text'")
    text = record["text"]
    if not isinstance(text, str) or not text.strip():
        raise FormatError(row, "'text' is empty or not a string")
    label = None
    raw_label = record.get("label")
    if raw_label is not None and raw_label != "":
        try:
            label = parse_label(raw_label)
        except ValueError as exc:
            raise FormatError(row, str(exc)) from exc
    return Post(id=str(record["id"]), text=text, gold_label=label)


def load_dataset(
    path: str | Path,
    format: str = "jsonl",
    name: str | None = None,
    split: Split = Split.TEST,
) -> Dataset:
    """Load a dataset from a jsonl or csv file, preserving record order.

    jsonl rows are objects {"id", "text", "label"?}; csv files carry the
    header ``id,text,label``. Labels may be 0/1 or suicide/non_suicide.
    Raises OSError for unreadable files and FormatError (with the offending
    row number) for malformed records.
    """
    path = Path(path)
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unknown dataset format {format!r}")
    posts: list[Post] = []
    seen: set[str] = set()

    def add(row: int, record: dict) -> None:
        post = _post_from_record(row, record)
        if post.id in seen:
            raise FormatError(row, f"duplicate id {post.id!r}")
        seen.add(post.id)
        posts.append(post)

    if format == "jsonl":
        with path.open("r", encoding="utf-8") as fh:
            for row, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(row, f"invalid JSON: {exc}") from exc
                if not isinstance(record, dict):
                    raise FormatError(row, "record is not an object")
                add(row, record)
    else:
        with path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row, record in enumerate(reader, start=2):  # row 1 is the header
                add(row, dict(record))
    return Dataset(posts=tuple(posts), name=name or path.stem, split=split)


def split_dataset(
    ds: Dataset,
    seed: int,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic stratified train/val/test split.

    Posts are shuffled per label stratum with the given seed (unlabeled posts
    form their own stratum), then cut at the cumulative ratios. The seed fully
    determines the assignment.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negatives summing to 1, got {ratios!r}")
    rng = random.Random(seed)
    strata: dict[object, list[Post]] = {}
    for post in ds.posts:
        strata.setdefault(post.gold_label, []).append(post)
    buckets: tuple[list[Post], list[Post], list[Post]] = ([], [], [])
    for key in sorted(strata, key=lambda k: "" if k is None else k.name):
        group = strata[key]
        rng.shuffle(group)
        n = len(group)
        n_train = round(n * ratios[0])
        n_val = round(n * ratios[1])
        buckets[0].extend(group[:n_train])
        buckets[1].extend(group[n_train : n_train + n_val])
        buckets[2].extend(group[n_train + n_val :])
    return (
        Dataset(tuple(buckets[0]), name=f"{ds.name}-train", split=Split.TRAIN),
        Dataset(tuple(buckets[1]), name=f"{ds.name}-val", split=Split.VAL),
        Dataset(tuple(buckets[2]), name=f"{ds.name}-test", split=Split.TEST),
    )
