"""Versioned on-disk format shared by all trained models.

Every dump is a single JSON document with a magic header, a format version,
a kind tag, the training seed, a feature-dimension guard, and a kind-specific
payload. Keys are sorted and floats use their shortest round-tripping
representation, so identical models serialize to identical bytes. Writes go
through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import DimensionError

MAGIC = "riskcascade-model"
FORMAT_VERSION = 1


def dump_model(path: str | Path, kind: str, payload: dict, *, seed: int, feature_dim: int) -> None:
    document = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "seed": seed,
        "feature_dim": feature_dim,
        "payload": payload,
    }
    atomic_write_text(path, json.dumps(document, sort_keys=True) + "\n")


def load_model(path: str | Path, expected_kind: str | None = None, expected_dim: int | None = None) -> dict:
    """Read and validate a model dump envelope; returns the full document."""
    with Path(path).open("r", encoding="utf-8") as fh:
        document = json.load(fh)
    if document.get("magic") != MAGIC:
        raise ValueError(f"{path}: not a model dump (bad magic)")
    if document.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {document.get('format_version')!r}")
    if expected_kind is not None and document.get("kind") != expected_kind:
        raise ValueError(f"{path}: expected kind {expected_kind!r}, found {document.get('kind')!r}")
    if expected_dim is not None and document.get("feature_dim") != expected_dim:
        raise DimensionError(
            f"{path}: model was trained on {document.get('feature_dim')} features, expected {expected_dim}"
        )
    return document


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
