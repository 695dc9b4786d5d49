"""Deterministic float64 vector kernels and seeded, stream-labeled randomness.

Everything here is a pure function over immutable inputs. All arithmetic is
64-bit; callers that need reproducibility draw from :class:`SeededRng`
streams identified by explicit string labels.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "as_f64",
    "cosine_sim",
    "softmax_temp",
    "softmax_rows",
    "l2_normalize",
    "normalize_rows",
    "stable_hash64",
    "SeededRng",
]


def as_f64(x) -> np.ndarray:
    """Return ``x`` as a float64 ndarray without copying when already one."""
    return np.asarray(x, dtype=np.float64)


def _check_vector(v: np.ndarray, name: str) -> None:
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")


def cosine_sim(a, b) -> float:
    """Cosine similarity a.b / (|a| |b|), clipped to [-1, 1].

    Raises ShapeError on dimension mismatch and DomainError if either
    vector has zero norm.
    """
    a = as_f64(a)
    b = as_f64(b)
    _check_vector(a, "a")
    _check_vector(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"dim mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def softmax_temp(scores, tau: float) -> np.ndarray:
    """Temperature softmax with max-subtraction for stability at small tau."""
    scores = as_f64(scores)
    _check_vector(scores, "scores")
    if not tau > 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("softmax scores must be finite")
    z = scores / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_rows(scores, tau: float) -> np.ndarray:
    """Row-wise temperature softmax over a 2-D score matrix."""
    scores = as_f64(scores)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {scores.shape}")
    if not tau > 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("softmax scores must be finite")
    z = scores / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit L2 norm. Zero vectors raise DomainError."""
    v = as_f64(v)
    _check_vector(v, "v")
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DomainError("cannot normalize a zero vector")
    return v / n


def normalize_rows(m) -> np.ndarray:
    """L2-normalize every row of a 2-D array. Any zero row raises DomainError."""
    m = as_f64(m)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-D array, got shape {m.shape}")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("cannot normalize a zero row")
    return m / norms


def stable_hash64(text: str) -> int:
    """Platform- and process-stable 64-bit hash of a string."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def _derive_key(seed: int, label: str) -> int:
    # 128-bit Philox key derived from (seed, label); independent of PYTHONHASHSEED.
    digest = hashlib.blake2b(
        label.encode("utf-8"), digest_size=16, key=int(seed).to_bytes(8, "little", signed=False)
    ).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """Counter-based generator with named, independently derived streams.

    One root generator per run; every stochastic operation draws from its own
    ``stream(label)`` child so the draw sequence of one operation never shifts
    another's. Identical (seed, label) pairs reproduce identical draws across
    runs and platforms. Instances are single-owner: share streams by splitting,
    never by passing one instance to concurrent tasks.
    """

    def __init__(self, seed: int, label: str = "root"):
        if not 0 <= int(seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.label = label
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, label)))

    def stream(self, label: str) -> "SeededRng":
        """Split off an independent child stream."""
        return SeededRng(self.seed, f"{self.label}/{label}")

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape=None):
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, label={self.label!r})"
