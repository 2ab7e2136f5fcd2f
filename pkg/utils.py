"""
Utility Functions for levylab

Common helper functions used across the experiment pipelines.
"""

import hashlib
import logging
import os
from typing import Any, Iterable, List

import numpy as np

logger = logging.getLogger(__name__)


def safe_int(value: Any, default: int = 0) -> int:
    """Convert value to integer, falling back to default."""
    try:
        return int(value)
    except (ValueError, TypeError):
        return default


def parse_float_list(text: str) -> List[float]:
    """
    Parse a comma or whitespace separated list of reals.

    Args:
        text: e.g. "2, 5, 10" or "1e-2 1e-3"

    Returns:
        List of floats (empty for blank input)

    Raises:
        ValueError: if any entry is not a number
    """
    if text is None:
        return []
    parts = [p for p in text.replace(",", " ").split() if p]
    return [float(p) for p in parts]


def parse_vector_list(text: str) -> List[List[float]]:
    """Parse 'a b; c d' style text into a list of vectors."""
    if not text:
        return []
    return [parse_float_list(chunk) for chunk in text.split(";") if chunk.strip()]


# ============================================================================
# SEEDS AND DIGESTS
# ============================================================================

def derive_seed(base_seed: int, *labels: Any) -> int:
    """
    Derive a child seed from a base seed and a sequence of labels.

    The seed is the first 8 bytes of SHA-256 over the joined labels, so it
    does not depend on Python's hash randomization or on thread scheduling.

    Args:
        base_seed: Experiment-level seed
        *labels: Experiment kind, cell index, path index, ...

    Returns:
        Unsigned 64-bit integer
    """
    key = "|".join([str(int(base_seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def file_digest(path: str) -> str:
    """Return SHA-256 hex digest of a file's bytes."""
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(65536), b""):
            sha.update(block)
    return sha.hexdigest()


def ensure_directory(path: str) -> str:
    """Create a directory (and parents) if missing; return it."""
    os.makedirs(path, exist_ok=True)
    return path


def fixed_order_mean(values: Iterable[float]) -> float:
    """Mean with a fixed left-to-right summation order."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return float("nan")
    total = 0.0
    for v in arr:
        total += float(v)
    return total / arr.size
