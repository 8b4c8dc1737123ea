"""Small dense vector operations and stable elementary functions.

Vectors are 1-D float64 numpy arrays throughout the package; matrices are
2-D row-major float64 arrays. All functions here are pure and operate in
64-bit arithmetic. ``softmax`` and ``log_sum_exp`` additionally accept 2-D
input with an ``axis`` argument since the losses evaluate them row-wise.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError


def as_vector(a, name: str = "input") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DomainError(f"{name} must be 1-D, got shape {v.shape}")
    if v.size == 0:
        raise DomainError(f"{name} must be non-empty")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} contains non-finite entries")
    return v


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises DomainError on dimension mismatch or a zero-norm argument,
    naming which argument is degenerate.
    """
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise DomainError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0:
        raise DomainError("argument 'a' has zero norm")
    if nb == 0.0:
        raise DomainError("argument 'b' has zero norm")
    c = float(np.dot(va, vb) / (na * nb))
    return min(1.0, max(-1.0, c))


def softmax(z, axis: int = -1) -> np.ndarray:
    """Stable softmax along ``axis`` (max-shifted before exponentiation)."""
    x = np.asarray(z, dtype=np.float64)
    if x.size == 0:
        raise DomainError("softmax input must be non-empty")
    if not np.all(np.isfinite(x)):
        raise DomainError("softmax input contains non-finite entries")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_sum_exp(z, axis: int = -1):
    """max(z) + log(sum(exp(z - max(z)))) along ``axis``."""
    x = np.asarray(z, dtype=np.float64)
    if x.size == 0:
        raise DomainError("log_sum_exp input must be non-empty")
    if not np.all(np.isfinite(x)):
        raise DomainError("log_sum_exp input contains non-finite entries")
    m = np.max(x, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(x - m), axis=axis))
    return float(out) if np.ndim(out) == 0 else out


def l2_normalize(a) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    v = as_vector(a, "input")
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DomainError("cannot normalize a zero-norm vector")
    return v / n


def l2_normalize_rows(m: np.ndarray, what: str = "matrix") -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a 2-D array; returns (normalized rows, original norms).

    Raises DomainError naming ``what`` and the row index if any row has
    zero norm.
    """
    x = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DomainError(f"{what} row {int(bad[0])} has zero norm")
    return x / norms[:, None], norms
