"""Cross-modal cosine similarity and contrastive alignment losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ShapeError, as_matrix, log_softmax_rows, row_norms, softmax_rows

EPS = 1e-12


@dataclass
class LossValue:
    """A scalar loss and its gradients w.r.t. each input, in argument order."""

    value: float
    grads: tuple

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise FloatingPointError("loss value is not finite")


def _unit_rows(a):
    norms = np.maximum(row_norms(a), EPS)
    return a / norms[:, None], norms


def _unit_rows_vjp(unit, norms, g):
    # d(a/|a|) = (g - u (u.g)) / |a|; rows clamped at EPS act linearly
    proj = np.einsum("ij,ij->i", unit, g)
    out = (g - unit * proj[:, None]) / norms[:, None]
    small = norms <= EPS
    if np.any(small):
        out[small] = g[small] / EPS
    return out


def similarity_matrix(e_a, e_b, beta: float = 1.0) -> np.ndarray:
    """``Q[i, j] = beta * cos(e_a[i], e_b[j])``. Zero rows give zero entries."""
    return similarity_with_vjp(e_a, e_b, beta)[0]


def similarity_with_vjp(e_a, e_b, beta: float = 1.0):
    """Return ``Q`` and a function mapping ``dL/dQ`` to ``(dL/de_a, dL/de_b)``."""
    if not (beta > 0 and np.isfinite(beta)):
        raise ValueError("beta must be positive and finite")
    e_a = as_matrix(e_a, "e_a")
    e_b = as_matrix(e_b, "e_b")
    if e_a.shape[1] != e_b.shape[1] or e_a.shape[1] < 1:
        raise ShapeError(f"embedding widths differ: {e_a.shape} vs {e_b.shape}")
    ua, na = _unit_rows(e_a)
    ub, nb = _unit_rows(e_b)
    q = beta * (ua @ ub.T)

    def vjp(dq):
        dq = np.asarray(dq, dtype=np.float64)
        dua = beta * dq @ ub
        dub = beta * dq.T @ ua
        return _unit_rows_vjp(ua, na, dua), _unit_rows_vjp(ub, nb, dub)

    return q, vjp


def _square(q, name="q"):
    q = as_matrix(q, name)
    if q.shape[0] != q.shape[1] or q.shape[0] < 1:
        raise ShapeError(f"{name} must be square and nonempty, got {q.shape}")
    return q


def _diag_ce(q):
    """Mean over rows of -log softmax(q)[i, i] and its gradient."""
    n = q.shape[0]
    logp = log_softmax_rows(q)
    value = -np.trace(logp) / n
    grad = softmax_rows(q)
    grad[np.diag_indices(n)] -= 1.0
    return value, grad / n


def infonce_loss(q) -> LossValue:
    value, grad = _diag_ce(_square(q))
    return LossValue(value, (grad,))


def symmetric_contrastive_loss(s) -> LossValue:
    """Average of row-wise and column-wise matching-pair cross entropy."""
    s = _square(s, "s")
    v_rows, g_rows = _diag_ce(s)
    v_cols, g_cols = _diag_ce(s.T)
    return LossValue(0.5 * (v_rows + v_cols), (0.5 * (g_rows + g_cols.T),))


def off_diagonal_mean(s) -> np.ndarray:
    s = _square(s, "s")
    n = s.shape[0]
    if n < 2:
        raise ValueError("degenerate batch: off-diagonal mean needs at least 2 samples")
    return (s.sum(axis=1) - np.diag(s)) / (n - 1)
