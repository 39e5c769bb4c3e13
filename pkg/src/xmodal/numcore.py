"""Dense float64 matrix helpers and a seeded random stream.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in
C (row-major) order. Functions here never mutate their inputs.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


def as_matrix(a, name="a") -> np.ndarray:
    """Return ``a`` as a finite, C-ordered float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got {m.ndim}-D")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: contains NaN or Inf")
    return m


def _check_finite(m: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _check_finite(a @ b, "matmul")


def row_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", a, a))


def row_l2_normalize(a, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by ``max(||row||_2, eps)``; zero rows stay zero."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    a = as_matrix(a)
    return a / np.maximum(row_norms(a), eps)[:, None]


def softmax_rows(a) -> np.ndarray:
    a = as_matrix(a)
    if a.size == 0:
        raise ShapeError("softmax_rows: empty matrix")
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def log_softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class RandomStream:
    """Seeded generator backed by the Philox4x32 counter-based bit generator.

    The key is derived from ``(seed, path)`` through ``numpy.random.SeedSequence``,
    so a stream's output depends only on its seed and tag path, never on the
    platform or on how many draws its parent has made.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(t) for t in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, path={self.path})"

    def sub_stream(self, tag: int) -> "RandomStream":
        return RandomStream(self.seed, self.path + (int(tag),))

    def next_uniform(self) -> float:
        return float(self.generator.random())

    def next_gaussian(self) -> float:
        return float(self.generator.standard_normal())

    # vectorised draws used by model init and data generation
    def uniform(self, size) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, size, scale=1.0) -> np.ndarray:
        return self.generator.standard_normal(size) * scale

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size=size)


def sub_stream(s: RandomStream, tag: int) -> RandomStream:
    return s.sub_stream(tag)


def next_uniform(s: RandomStream) -> float:
    return s.next_uniform()


def next_gaussian(s: RandomStream) -> float:
    return s.next_gaussian()


def to_csv(a, path=None) -> str:
    """Serialise a matrix as headerless CSV with round-trippable decimals."""
    a = as_matrix(a)
    text = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in a)
    if path is not None:
        Path(path).write_text(text)
    return text


def from_csv(source) -> np.ndarray:
    """Inverse of :func:`to_csv`; ``source`` is a path or CSV text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and Path(source).exists()):
        source = Path(source).read_text()
    rows = [line for line in io.StringIO(source).read().splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 0))
    return as_matrix([[float(c) for c in r.split(",")] for r in rows])
