"""Class prototypes, Dirichlet evidence from prototype similarity, and the
uncertainty-alignment loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import LossValue, similarity_with_vjp
from .numcore import ShapeError, as_matrix

EXP_CLAMP = 700.0


@dataclass
class PrototypeBank:
    phi: np.ndarray  # (c, d), one row per class
    tau_temp: float = 1.0
    update_momentum: float = 0.9

    def __post_init__(self):
        self.phi = as_matrix(self.phi, "phi")
        if self.phi.shape[0] < 1:
            raise ValueError("need at least one prototype")
        if not self.tau_temp > 0:
            raise ValueError("tau_temp must be > 0")
        if not 0.0 <= self.update_momentum <= 1.0:
            raise ValueError("update_momentum must lie in [0, 1]")

    @property
    def c(self) -> int:
        return self.phi.shape[0]

    @classmethod
    def from_class_means(cls, e, labels, n_classes, tau_temp=1.0, update_momentum=0.9):
        """Initialise each prototype as the mean embedding of its class.

        Classes with no members get a zero row, which has zero similarity to
        everything until the first update that sees the class.
        """
        e = as_matrix(e, "e")
        labels = np.asarray(labels, dtype=int)
        phi = np.zeros((n_classes, e.shape[1]))
        for j in range(n_classes):
            members = labels == j
            if members.any():
                phi[j] = e[members].mean(axis=0)
        return cls(phi, tau_temp, update_momentum)


@dataclass
class EvidentialResult:
    alpha: np.ndarray  # (N, c), all > 1
    evidence: np.ndarray  # (N,)
    uncertainty: np.ndarray  # (N,), in [0, 1)


def prototype_similarity(e, bank: PrototypeBank, beta: float = 1.0) -> np.ndarray:
    e = as_matrix(e, "e")
    if e.shape[1] != bank.phi.shape[1]:
        raise ShapeError(f"embedding width {e.shape[1]} vs prototype width {bank.phi.shape[1]}")
    return similarity_with_vjp(e, bank.phi, beta)[0]


UNCERTAINTY_FORMS = ("complement", "vacuity")


def dirichlet_uncertainty(q, tau_temp: float = 1.0, form: str = "complement") -> EvidentialResult:
    """alpha = exp(q / tau) + 1, evidence = sum(alpha), u = 1 - c / evidence.

    ``form="vacuity"`` returns the usual subjective-logic vacuity ``c / evidence``
    instead, which falls (rather than rises) as similarity to the prototypes grows.
    """
    return _dirichlet(q, tau_temp, form)[0]


def _dirichlet(q, tau_temp, form="complement"):
    if form not in UNCERTAINTY_FORMS:
        raise ValueError(f"form must be one of {UNCERTAINTY_FORMS}")
    if not tau_temp > 0:
        raise ValueError("tau_temp must be > 0")
    q = as_matrix(q, "q")
    c = q.shape[1]
    z = q / tau_temp
    active = np.abs(z) < EXP_CLAMP
    ez = np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP))
    alpha = ez + 1.0
    evidence = alpha.sum(axis=1)
    sign = 1.0 if form == "complement" else -1.0
    u = 1.0 - c / evidence if form == "complement" else c / evidence

    def vjp(du):
        # du/dq_ij = +-c / E_i^2 * exp(z_ij) / tau, zero where clamped
        scale = sign * np.asarray(du) * c / evidence ** 2
        return scale[:, None] * ez * active / tau_temp

    return EvidentialResult(alpha, evidence, u), vjp


def uncertainty_loss(u, h, delta: float = 1.0) -> LossValue:
    """Mean of (u_j - delta * h_j)^2; the target ``delta * h`` gets no gradient."""
    u = np.asarray(u, dtype=np.float64).ravel()
    h = np.asarray(h, dtype=np.float64).ravel()
    if u.shape != h.shape or u.size < 1:
        raise ShapeError(f"length mismatch: u {u.shape} vs h {h.shape}")
    r = u - delta * h
    n = u.size
    return LossValue(np.mean(r * r), (2.0 * r / n, np.zeros_like(h)))


def uncertainty_loss_from_embeddings(e, bank: PrototypeBank, h, beta: float, delta: float,
                                     form: str = "complement"):
    """L_unc evaluated on raw embeddings, with the gradient taken back to ``e``.

    Returns ``(LossValue, EvidentialResult)``; ``LossValue.grads[0]`` is dL/de.
    """
    q, sim_vjp = similarity_with_vjp(e, bank.phi, beta)
    result, dir_vjp = _dirichlet(q, bank.tau_temp, form)
    loss = uncertainty_loss(result.uncertainty, h, delta)
    de, _ = sim_vjp(dir_vjp(loss.grads[0]))
    return LossValue(loss.value, (de,)), result


def prototype_update(bank: PrototypeBank, e, labels) -> PrototypeBank:
    """EMA step: phi_j <- m * phi_j + (1 - m) * mean(e[labels == j]); absent classes untouched."""
    e = as_matrix(e, "e")
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (e.shape[0],):
        raise ShapeError("one label per embedding row required")
    if labels.size and (labels.min() < 0 or labels.max() >= bank.c):
        raise ValueError("label outside prototype range")
    m = bank.update_momentum
    phi = bank.phi.copy()
    for j in np.unique(labels):
        phi[j] = m * phi[j] + (1.0 - m) * e[labels == j].mean(axis=0)
    return PrototypeBank(phi, bank.tau_temp, bank.update_momentum)
