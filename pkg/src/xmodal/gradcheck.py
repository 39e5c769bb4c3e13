"""Central finite-difference verification of every analytic gradient.

Each check builds a small random instance, evaluates the analytic gradient,
and compares it to central differences of the scalar loss. Targets that the
training code treats as constants (the uncertainty target ``h``, the
reliability target ``r*``, teacher outputs) are pinned at their base-point
values so both sides differentiate the same function.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .active import ConsistencyALClassifier, reliability_loss, reliability_target
from .alignment import infonce_loss, off_diagonal_mean, similarity_with_vjp, symmetric_contrastive_loss
from .datagen import CER, DEC
from .distill import (
    KdConfig,
    KdWeights,
    ModelBundle,
    ccc_loss,
    ce_loss,
    init_prototypes,
    kl_distill_loss,
    scalar_distill_loss,
    student_objective,
)
from .evidential import PrototypeBank, uncertainty_loss_from_embeddings
from .numcore import RandomStream, softmax_rows

STEP = 1e-6
# Entries whose magnitude is below this are compared on an absolute scale.
FLOOR = 1e-4


def numeric_grad(f, x, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at flat vector ``x``."""
    x = np.array(x, dtype=np.float64).ravel()
    out = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        up = f(x.copy())
        x[i] = orig - step
        down = f(x.copy())
        x[i] = orig
        out[i] = (up - down) / (2 * step)
    return out


def max_rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"gradient sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@dataclass
class GradResult:
    name: str
    instance: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < 1e-4


# ---------------------------------------------------------------- single-loss checks


def _probs(rng, n, c):
    return softmax_rows(rng.normal(size=(n, c)))


def check_infonce(rng):
    n, d = rng.integers(2, 6), rng.integers(2, 5)
    ea, eb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    beta = rng.uniform(0.5, 10)

    def f(v):
        return infonce_loss(similarity_with_vjp(v.reshape(ea.shape), eb, beta)[0]).value

    q, vjp = similarity_with_vjp(ea, eb, beta)
    de, _ = vjp(infonce_loss(q).grads[0])
    return max_rel_error(de, numeric_grad(f, ea))


def check_symmetric_contrastive(rng):
    n, d = rng.integers(2, 6), rng.integers(2, 5)
    ea, eb = rng.normal(size=(n, d)), rng.normal(size=(n, d))

    def f(v):
        return symmetric_contrastive_loss(similarity_with_vjp(ea, v.reshape(eb.shape))[0]).value

    s, vjp = similarity_with_vjp(ea, eb)
    _, de = vjp(symmetric_contrastive_loss(s).grads[0])
    return max_rel_error(de, numeric_grad(f, eb))


def check_uncertainty(rng, form):
    n, d, c = rng.integers(2, 6), rng.integers(2, 5), rng.integers(2, 4)
    e = rng.normal(size=(n, d))
    bank = PrototypeBank(rng.normal(size=(c, d)), tau_temp=rng.uniform(0.5, 2))
    beta, delta = rng.uniform(0.5, 3), rng.uniform(0.1, 1)
    h = off_diagonal_mean(similarity_with_vjp(e, rng.normal(size=(n, d)), beta)[0])

    def f(v):
        return uncertainty_loss_from_embeddings(v.reshape(e.shape), bank, h, beta, delta, form)[0].value

    loss, _ = uncertainty_loss_from_embeddings(e, bank, h, beta, delta, form)
    return max_rel_error(loss.grads[0], numeric_grad(f, e))


def check_kl(rng):
    n, c = rng.integers(1, 5), rng.integers(2, 5)
    p, q = _probs(rng, n, c), _probs(rng, n, c)

    def f(v):
        return kl_distill_loss(p, v.reshape(q.shape)).value

    return max_rel_error(kl_distill_loss(p, q).grads[1], numeric_grad(f, q))


def check_scalar_distill(rng):
    n = rng.integers(1, 6)
    a, b = rng.normal(size=(n, 1)), rng.normal(size=(n, 1))
    return max_rel_error(scalar_distill_loss(a, b).grads[1],
                         numeric_grad(lambda v: scalar_distill_loss(a, v.reshape(b.shape)).value, b))


def check_ce(rng):
    n, c = rng.integers(1, 5), rng.integers(2, 5)
    p, y = _probs(rng, n, c), rng.integers(0, c, size=n)
    return max_rel_error(ce_loss(p, y).grads[0],
                         numeric_grad(lambda v: ce_loss(v.reshape(p.shape), y).value, p))


def check_ccc(rng):
    n = rng.integers(3, 8)
    p, y = rng.normal(size=n), rng.normal(size=n)
    loss = ccc_loss(p, y)
    err_p = max_rel_error(loss.grads[0], numeric_grad(lambda v: ccc_loss(v, y).value, p))
    err_y = max_rel_error(loss.grads[1], numeric_grad(lambda v: ccc_loss(p, v).value, y))
    return max(err_p, err_y)


def check_reliability(rng, reduction):
    n = rng.integers(1, 6)
    ra, rb, rs = rng.uniform(size=n), rng.uniform(size=n), rng.uniform(size=n)
    loss = reliability_loss(ra, rb, rs, reduction)
    err_a = max_rel_error(loss.grads[0], numeric_grad(lambda v: reliability_loss(v, rb, rs, reduction).value, ra))
    err_b = max_rel_error(loss.grads[1], numeric_grad(lambda v: reliability_loss(ra, v, rs, reduction).value, rb))
    return max(err_a, err_b)


# ---------------------------------------------------------------- full objectives


def _flat(params_list):
    return np.concatenate([p.to_vector() for p in params_list])


def _unflat(templates, vec):
    out, at = [], 0
    for t in templates:
        size = t.to_vector().size
        out.append(t.with_vector(vec[at: at + size]))
        at += size
    return out


def check_kd_objective(rng, task):
    seed = int(rng.integers(2 ** 31))
    n, d_s, d_t, c = 4, 3, 3, 3
    config = KdConfig(hidden=4, embed_dim=3, beta=float(rng.uniform(1, 10)),
                      delta=float(rng.uniform(0.1, 1)), injection_layer=int(rng.integers(0, 3)))
    bundle = ModelBundle.create(d_s, d_t, task, c, config, RandomStream(seed))
    x_s, x_t = rng.normal(size=(n, d_s)), rng.normal(size=(n, d_t))
    y = rng.integers(0, c, size=n) if task == DEC else rng.normal(size=n)
    init_prototypes(bundle, x_s, y, config)
    bundle.prototypes = PrototypeBank(bundle.prototypes.phi + 0.1 * rng.normal(size=bundle.prototypes.phi.shape))
    w = KdWeights(*rng.uniform(0.2, 1.5, size=4))
    enc, head = bundle.student_encoder, bundle.student_head
    base = [enc.params, head.params]
    q = similarity_with_vjp(enc.forward(x_s).final, bundle.teacher_encoder.forward(x_t).final, config.beta)[0]
    h = off_diagonal_mean(q)

    def f(v):
        enc.params, head.params = _unflat(base, v)
        value = student_objective(bundle, x_s, x_t, y, w, config, need_grads=False, h=h)[1].value
        enc.params, head.params = base
        return value

    _, _, g_enc, g_head = student_objective(bundle, x_s, x_t, y, w, config, h=h)
    analytic = _flat([g_enc.as_params(), g_head.as_params()])
    return max_rel_error(analytic, numeric_grad(f, _flat(base)))


def check_al_objective(rng):
    n, d_a, d_b, c = 4, 3, 2, 3
    model = ConsistencyALClassifier(hidden=4, embed_dim=3, beta=float(rng.uniform(0.5, 2)),
                                    lambda_sim=float(rng.uniform(0.2, 1.5)),
                                    lambda_rel=float(rng.uniform(0.2, 1.5)),
                                    lambda_task=float(rng.uniform(0.2, 1.5)))
    model._init_nets(d_a, d_b, c, RandomStream(int(rng.integers(2 ** 31))))
    xa, xb = rng.normal(size=(n, d_a)), rng.normal(size=(n, d_b))
    y = rng.integers(0, c, size=n)
    s = similarity_with_vjp(model.nets_["enc_a"].forward(xa).final,
                            model.nets_["enc_b"].forward(xb).final, model.beta)[0]
    r_star = reliability_target(s, model.eps)
    names = sorted(model.nets_)
    base = [model.nets_[k].params for k in names]

    def f(v):
        for k, p in zip(names, _unflat(base, v)):
            model.nets_[k].params = p
        value = model.objective(xa, xb, y, need_grads=False, r_star=r_star)[1].value
        for k, p in zip(names, base):
            model.nets_[k].params = p
        return value

    _, _, grads = model.objective(xa, xb, y, r_star=r_star)
    analytic = _flat([grads[k].as_params() for k in names])
    return max_rel_error(analytic, numeric_grad(f, _flat(base)))


CHECKS = {
    "infonce": check_infonce,
    "symmetric_contrastive": check_symmetric_contrastive,
    "uncertainty_complement": lambda rng: check_uncertainty(rng, "complement"),
    "uncertainty_vacuity": lambda rng: check_uncertainty(rng, "vacuity"),
    "kl_distill": check_kl,
    "scalar_distill": check_scalar_distill,
    "cross_entropy": check_ce,
    "ccc": check_ccc,
    "reliability_sum": lambda rng: check_reliability(rng, "sum"),
    "reliability_mean": lambda rng: check_reliability(rng, "mean"),
    "kd_objective_dec": lambda rng: check_kd_objective(rng, DEC),
    "kd_objective_cer": lambda rng: check_kd_objective(rng, CER),
    "al_objective": check_al_objective,
}


def run_gradcheck(instances_per_check: int = 10, seed: int = 0, checks=None) -> list:
    """Run every check on ``instances_per_check`` random instances; returns GradResults."""
    results = []
    for name in checks or CHECKS:
        rng = np.random.default_rng([seed, sorted(CHECKS).index(name)])
        for i in range(instances_per_check):
            results.append(GradResult(name, i, CHECKS[name](rng)))
    return results


def summarize(results) -> dict:
    by_name = {}
    for r in results:
        by_name[r.name] = max(by_name.get(r.name, 0.0), r.error)
    return {"instances": len(results), "max_error": max(by_name.values(), default=0.0),
            "per_check": by_name, "passed": all(r.passed for r in results)}


def timed_gradcheck(instances_per_check: int = 10, seed: int = 0):
    start = time.perf_counter()
    results = run_gradcheck(instances_per_check, seed)
    return results, time.perf_counter() - start


__all__ = ["numeric_grad", "max_rel_error", "GradResult", "CHECKS", "run_gradcheck", "summarize",
           "timed_gradcheck"]
