"""``key = value`` text documents used for models, weights and configs.

Lines starting with ``#`` are comments. Repeated keys are kept in order, so
list-like sections (support vectors, data sources) can use one line each.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def format_float(x: float) -> str:
    # repr round-trips exactly
    return repr(float(x))


def format_floats(xs) -> str:
    return ", ".join(format_float(x) for x in np.ravel(xs))


def parse_floats(text: str) -> np.ndarray:
    text = text.strip()
    if not text:
        return np.zeros(0)
    return np.array([float(x) for x in text.split(",")])


def parse_ints(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    return [int(x) for x in text.split(",")]


def dumps(items) -> str:
    """Serialize ``(key, value)`` pairs (or a dict) to document text."""
    if isinstance(items, dict):
        items = items.items()
    lines = []
    for key, value in items:
        if "=" in key or "\n" in key:
            raise ValueError(f"bad key {key!r}")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_dict(path) -> dict[str, str]:
    """Load a document where every key is unique."""
    pairs = loads(Path(path).read_text())
    out: dict[str, str] = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"{path}: duplicate key {key!r}")
        out[key] = value
    return out


def atomic_write(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
