"""Cross-modal consistency-guided active learning.

Training objective on the labeled pool::

    total = w_sim * L_sim + w_rel * L_rel + w_task * L_task

``L_sim`` is a symmetric matching-pair contrastive loss over cosine
similarities of the two modality embeddings, ``L_rel`` regresses per-modality
sigmoid reliability heads onto a target derived from each sample's mean
similarity to the non-paired samples, and ``L_task`` is cross entropy of a
head that only ever sees modality A. Querying ranks the unlabeled pool by
predictive entropy of that head.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .alignment import LossValue, off_diagonal_mean, similarity_with_vjp, symmetric_contrastive_loss
from .datagen import PairedDataset, inject_label_noise
from .distill import _batches, ce_loss, cosine_lr, split_validation
from .numcore import RandomStream, ShapeError
from .nn import Mlp

# sub-stream tags
_TAG_INIT, _TAG_BATCHES, _TAG_SPLIT = range(1, 4)
_TAG_TEST, _TAG_INITIAL_POOL, _TAG_RANDOM_QUERY, _TAG_ORACLE = range(11, 15)


@dataclass(frozen=True)
class AlWeights:
    sim: float = 1.0
    rel: float = 1.0
    task: float = 1.0

    def __post_init__(self):
        for name in ("sim", "rel", "task"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class AcquisitionConfig:
    ratio: float = 0.1
    rounds: int = 5
    tie_break: str = "index"

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.tie_break != "index":
            raise ValueError("only ascending-index tie breaking is supported")


# ---------------------------------------------------------------- losses and scores


def reliability_target(s, eps: float = 1e-8) -> np.ndarray:
    """``1 - minmax(h)`` where ``h`` is each row's mean off-diagonal similarity."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    h = off_diagonal_mean(s)
    h_tilde = (h - h.min()) / (h.max() - h.min() + eps)
    return 1.0 - h_tilde


def reliability_loss(r_a, r_b, r_star, reduction="sum") -> LossValue:
    """Half the summed squared error of both reliability estimates against ``r_star``.

    ``reduction="mean"`` divides each squared norm by the batch size.
    """
    r_a, r_b, r_star = (np.asarray(v, dtype=np.float64).ravel() for v in (r_a, r_b, r_star))
    if not r_a.shape == r_b.shape == r_star.shape:
        raise ShapeError(f"length mismatch: {r_a.size}, {r_b.size}, {r_star.size}")
    scale = 1.0 if reduction == "sum" else 1.0 / max(r_a.size, 1)
    da, db = r_a - r_star, r_b - r_star
    value = 0.5 * scale * (da @ da + db @ db)
    return LossValue(value, (scale * da, scale * db))


def al_total_loss(parts: dict, w: AlWeights) -> LossValue:
    value, grads = 0.0, []
    for name in ("sim", "rel", "task"):
        lam = getattr(w, name)
        value += lam * parts[name].value
        grads.append(tuple(lam * g for g in parts[name].grads))
    return LossValue(value, tuple(grads))


def predictive_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError("expected an (N, C) probability matrix")
    if p.size and (np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6)):
        raise ValueError("rows must be probability vectors")
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=1)


def query_count(ratio: float, pool_size: int) -> int:
    """``floor(ratio * pool_size)``, at least 1 when ``ratio > 0`` and the pool is nonempty."""
    if pool_size == 0 or ratio <= 0:
        return 0
    # the small slack keeps exact fractions such as 2/9 * 432 from rounding down
    return min(pool_size, max(1, math.floor(ratio * pool_size + 1e-9)))


def select_top_tau(u, ratio: float, indices=None, k=None) -> np.ndarray:
    """Indices of the most uncertain ``floor(ratio * n)`` entries, ties by ascending index.

    ``indices`` gives the dataset index of each entry of ``u``; the result is
    expressed in those indices and sorted ascending.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    indices = np.arange(u.size) if indices is None else np.asarray(indices, dtype=int)
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    k = query_count(ratio, u.size) if k is None else min(k, u.size)
    order = np.lexsort((indices, -u))
    return np.sort(indices[order[:k]])


# ---------------------------------------------------------------- pool bookkeeping


@dataclass
class Pool:
    labeled: np.ndarray
    unlabeled: np.ndarray
    labels: dict = field(default_factory=dict)  # index -> label returned by the oracle

    def __post_init__(self):
        self.labeled = np.sort(np.asarray(self.labeled, dtype=int))
        self.unlabeled = np.sort(np.asarray(self.unlabeled, dtype=int))
        self.check()

    def check(self):
        if np.intersect1d(self.labeled, self.unlabeled).size:
            raise AssertionError("labeled and unlabeled pools overlap")
        if np.unique(self.labeled).size != self.labeled.size or \
                np.unique(self.unlabeled).size != self.unlabeled.size:
            raise AssertionError("duplicate index in pool")

    @property
    def size(self) -> int:
        return self.labeled.size + self.unlabeled.size

    def label_array(self):
        return np.array([self.labels[i] for i in self.labeled])


class SimulatedOracle:
    """Answers queries with ground-truth labels, optionally corrupted."""

    def __init__(self, labels, noise_rate=0.0, classes=0, stream=None):
        self.truth = np.asarray(labels)
        self.noise_rate = noise_rate
        self.classes = classes
        self.stream = stream or RandomStream(0)
        self._calls = 0

    def __call__(self, idx):
        idx = np.asarray(idx, dtype=int)
        y = self.truth[idx]
        if self.noise_rate > 0 and idx.size:
            self._calls += 1
            y = inject_label_noise(y, self.noise_rate, self.classes, self.stream.sub_stream(self._calls))
        return y


def pool_update(pool: Pool, q, oracle) -> Pool:
    q = np.asarray(q, dtype=int)
    if np.intersect1d(q, pool.labeled).size:
        raise ValueError("query overlaps the labeled pool")
    if np.setdiff1d(q, pool.unlabeled).size:
        raise ValueError("query contains indices outside the unlabeled pool")
    labels = dict(pool.labels)
    if q.size:
        labels.update(zip(q.tolist(), np.asarray(oracle(q)).tolist()))
    return Pool(np.union1d(pool.labeled, q), np.setdiff1d(pool.unlabeled, q), labels)


# ---------------------------------------------------------------- estimator


class ConsistencyALClassifier(ClassifierMixin, BaseEstimator):
    """Classifier over modality A trained with optional cross-modal consistency terms.

    ``fit(X, y, X_aux=...)`` uses the paired modality-B rows only for the
    similarity and reliability terms; ``predict``/``predict_proba`` read
    modality A alone. With ``warm_start=True`` a refit continues from the
    current parameters.
    """

    def __init__(self, lambda_sim=1.0, lambda_rel=1.0, lambda_task=1.0, beta=1.0,
                 eps=1e-8, hidden=32, embed_dim=16, lr=1e-3, lr_min=1e-6, epochs=100,
                 batch_size=32, patience=20, validation_fraction=0.2,
                 rel_reduction="mean", warm_start=False, random_state=0):
        self.lambda_sim = lambda_sim
        self.lambda_rel = lambda_rel
        self.lambda_task = lambda_task
        self.beta = beta
        self.eps = eps
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.lr = lr
        self.lr_min = lr_min
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.rel_reduction = rel_reduction
        self.warm_start = warm_start
        self.random_state = random_state

    @property
    def weights(self) -> AlWeights:
        return AlWeights(self.lambda_sim, self.lambda_rel, self.lambda_task)

    def _init_nets(self, d_a, d_b, n_classes, stream):
        h, e = self.hidden, self.embed_dim
        self.nets_ = {
            "enc_a": Mlp.create([d_a, h, e], stream.sub_stream(1)),
            "enc_b": Mlp.create([d_b, h, e], stream.sub_stream(2)),
            "rel_a": Mlp.create([e, h, 1], stream.sub_stream(3), final_activation="sigmoid"),
            "rel_b": Mlp.create([e, h, 1], stream.sub_stream(4), final_activation="sigmoid"),
            "head": Mlp.create([e, h, n_classes], stream.sub_stream(5), final_activation="softmax"),
        }

    def objective(self, xa, xb, y, need_grads=True, r_star=None):
        """Loss parts, total, and per-network gradients on one batch.

        The reliability target is a constant; pass ``r_star`` to pin it,
        otherwise it is derived from this batch's similarity matrix.
        """
        w = self.weights
        nets = self.nets_
        tr_a = nets["enc_a"].forward(xa)
        tr_head = nets["head"].forward(tr_a.final)
        parts = {"task": ce_loss(tr_head.final, y)}
        use_b = xb is not None and (w.sim or w.rel)
        if use_b:
            tr_b = nets["enc_b"].forward(xb)
            s, sim_vjp = similarity_with_vjp(tr_a.final, tr_b.final, self.beta)
            parts["sim"] = symmetric_contrastive_loss(s)
            if r_star is None:
                r_star = reliability_target(s, self.eps)
            tr_ra = nets["rel_a"].forward(tr_a.final)
            tr_rb = nets["rel_b"].forward(tr_b.final)
            parts["rel"] = reliability_loss(tr_ra.final, tr_rb.final, r_star, self.rel_reduction)
        else:
            parts["sim"] = parts["rel"] = LossValue(0.0, ())
        total = LossValue(sum(getattr(w, k) * parts[k].value for k in ("sim", "rel", "task")), ())
        if not need_grads:
            return parts, total, None

        grads = {}
        g_head = nets["head"].backward(tr_head, w.task * parts["task"].grads[0])
        grads["head"] = g_head
        dz_a = g_head.input
        if use_b:
            dz_b = np.zeros_like(tr_b.final)
            if w.sim:
                ga, gb = sim_vjp(w.sim * parts["sim"].grads[0])
                dz_a = dz_a + ga
                dz_b += gb
            ra_grad = w.rel * parts["rel"].grads[0].reshape(-1, 1)
            rb_grad = w.rel * parts["rel"].grads[1].reshape(-1, 1)
            grads["rel_a"] = nets["rel_a"].backward(tr_ra, ra_grad)
            grads["rel_b"] = nets["rel_b"].backward(tr_rb, rb_grad)
            dz_a = dz_a + grads["rel_a"].input
            dz_b += grads["rel_b"].input
            grads["enc_b"] = nets["enc_b"].backward(tr_b, dz_b)
        grads["enc_a"] = nets["enc_a"].backward(tr_a, dz_a)
        return parts, total, grads

    def fit(self, X, y, X_aux=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        if X_aux is not None:
            X_aux = check_array(X_aux, dtype=np.float64)
            if X_aux.shape[0] != X.shape[0]:
                raise ValueError(f"X has {X.shape[0]} rows but X_aux has {X_aux.shape[0]}")
        if X.shape[0] < 2:
            raise ValueError("need at least 2 labeled samples")
        root = RandomStream(self.random_state)
        warm = self.warm_start and hasattr(self, "nets_")
        if warm:
            if X.shape[1] != self.n_features_in_:
                raise ValueError("feature count changed between warm-started fits")
            unknown = np.setdiff1d(np.unique(y), self.classes_)
            if unknown.size:
                raise ValueError(f"unseen classes on warm start: {unknown}")
            self._fit_count += 1
        else:
            self.classes_ = np.unique(y)
            n_classes = max(2, len(self.classes_))
            d_b = X_aux.shape[1] if X_aux is not None else 1
            self._init_nets(X.shape[1], d_b, n_classes, root.sub_stream(_TAG_INIT))
            self.n_features_in_ = X.shape[1]
            self._fit_count = 0
        targets = np.searchsorted(self.classes_, y)
        fit_stream = root.sub_stream(100 + self._fit_count)
        tr, va = split_validation(X.shape[0], self.validation_fraction, fit_stream.sub_stream(_TAG_SPLIT))
        xb = None if X_aux is None else X_aux[tr]
        self.history_ = self._train(X[tr], xb, targets[tr], fit_stream.sub_stream(_TAG_BATCHES),
                                    None if va is None else (X[va], targets[va]))
        return self

    def _train(self, xa, xb, y, stream, val):
        history = []
        best, best_loss, since = None, np.inf, 0
        n = xa.shape[0]
        batch_size = self.batch_size if n >= 2 * 2 else n
        for epoch in range(self.epochs):
            lr = cosine_lr(epoch, self.epochs, self.lr, self.lr_min)
            logs = []
            for idx in _batches(n, batch_size, stream.sub_stream(epoch)):
                parts, total, grads = self.objective(xa[idx], None if xb is None else xb[idx], y[idx])
                for name, g in grads.items():
                    self.nets_[name].step(g, lr)
                logs.append({**{k: v.value for k, v in parts.items()}, "total": total.value})
            log = {k: float(np.mean([r[k] for r in logs])) for k in logs[0]}
            log["epoch"] = epoch
            if val is not None:
                log["val_task"] = ce_loss(self._proba(val[0]), val[1]).value
                if log["val_task"] < best_loss:
                    best = {k: m.copy() for k, m in self.nets_.items()}
                    best_loss, since = log["val_task"], 0
                else:
                    since += 1
            history.append(log)
            if val is not None and since >= self.patience:
                break
        if best is not None:
            self.nets_ = best
        return history

    def _proba(self, X):
        return self.nets_["head"].forward(self.nets_["enc_a"].forward(X).final).final

    def predict_proba(self, X):
        check_is_fitted(self, "nets_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        p = self._proba(X)
        return p[:, : len(self.classes_)] / p[:, : len(self.classes_)].sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def reliability(self, X, X_aux):
        """Per-sample ``(r_a, r_b)`` estimates from the two reliability heads."""
        check_is_fitted(self, "nets_")
        za = self.nets_["enc_a"].forward(check_array(X, dtype=np.float64)).final
        zb = self.nets_["enc_b"].forward(check_array(X_aux, dtype=np.float64)).final
        return self.nets_["rel_a"].forward(za).final.ravel(), self.nets_["rel_b"].forward(zb).final.ravel()


# ---------------------------------------------------------------- loop


HISTORY_COLUMNS = ("round", "labeled_fraction", "test_accuracy", "mean_pool_entropy",
                   "topfrac_entropy_mean")


@dataclass
class AlHistory:
    rows: list
    labeled_sets: list  # dataset indices labeled at each round
    config: dict
    seed: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in self.rows:
            writer.writerow([row["round"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps({"seed": self.seed, "config": self.config, "rounds": self.rows},
                          sort_keys=True, indent=1)

    def entropy_series(self):
        return [r["mean_pool_entropy"] for r in self.rows if not math.isnan(r["mean_pool_entropy"])]


def split_holdout(n, test_fraction, seed):
    """Fixed holdout created before any acquisition: ``(pool_idx, test_idx)``."""
    order = RandomStream(seed).sub_stream(_TAG_TEST).permutation(n)
    n_test = int(math.floor(test_fraction * n))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def initial_pool(pool_idx, fraction, seed) -> np.ndarray:
    order = RandomStream(seed).sub_stream(_TAG_INITIAL_POOL).permutation(pool_idx.size)
    k = max(2, int(math.floor(fraction * pool_idx.size + 1e-9)))
    return np.sort(pool_idx[order[:k]])


def _topfrac_mean(u, frac):
    if u.size == 0:
        return math.nan
    k = max(1, int(math.floor(frac * u.size)))
    return float(np.mean(np.sort(u)[::-1][:k]))


def _active_loop(dataset: PairedDataset, estimator, query_counts, strategy, seed,
                 test_fraction=0.2, initial_fraction=0.1, oracle_noise=0.0,
                 use_aux=True, topfrac=0.05, config_echo=None) -> AlHistory:
    if strategy not in ("entropy", "random"):
        raise ValueError(f"unknown strategy {strategy!r}")
    pool_idx, test_idx = split_holdout(dataset.n, test_fraction, seed)
    labeled0 = initial_pool(pool_idx, initial_fraction, seed)
    if labeled0.size == 0:
        raise ValueError("initial labeled pool is empty")
    root = RandomStream(seed)
    oracle = SimulatedOracle(dataset.labels_clean, oracle_noise, dataset.classes,
                             root.sub_stream(_TAG_ORACLE))
    pool = Pool([], pool_idx)
    pool = pool_update(pool, labeled0, oracle)
    model = clone(estimator)
    rows, labeled_sets = [], []
    random_stream = root.sub_stream(_TAG_RANDOM_QUERY)
    for rnd in range(len(query_counts) + 1):
        pool.check()
        if pool.size != pool_idx.size:
            raise AssertionError("pool union changed")
        xb = dataset.x_t[pool.labeled] if use_aux else None
        model.fit(dataset.x_s[pool.labeled], pool.label_array(), X_aux=xb)
        test_acc = float(np.mean(model.predict(dataset.x_s[test_idx]) == dataset.labels_clean[test_idx]))
        if pool.unlabeled.size:
            u = predictive_entropy(model.predict_proba(dataset.x_s[pool.unlabeled]))
        else:
            u = np.zeros(0)
        rows.append({
            "round": rnd,
            "labeled_fraction": pool.labeled.size / pool.size,
            "test_accuracy": test_acc,
            "mean_pool_entropy": float(u.mean()) if u.size else math.nan,
            "topfrac_entropy_mean": _topfrac_mean(u, topfrac),
        })
        labeled_sets.append(pool.labeled.copy())
        if rnd == len(query_counts):
            break
        k = min(query_counts[rnd], pool.unlabeled.size)
        if strategy == "entropy":
            q = select_top_tau(u, 1.0, pool.unlabeled, k=k)
        else:
            pick = random_stream.sub_stream(rnd).permutation(pool.unlabeled.size)[:k]
            q = np.sort(pool.unlabeled[pick])
        pool = pool_update(pool, q, oracle)
    return AlHistory(rows, labeled_sets, config_echo or {}, seed)


def _ratio_counts(acq: AcquisitionConfig, pool_size, initial):
    counts, remaining = [], pool_size - initial
    for _ in range(acq.rounds):
        k = query_count(acq.ratio, remaining)
        counts.append(k)
        remaining -= k
    return counts


def run_al_loop(dataset: PairedDataset, model, acq: AcquisitionConfig, weights: AlWeights = None,
                seed=0, test_fraction=0.2, initial_fraction=0.1, oracle_noise=0.0,
                strategy="entropy", topfrac=0.05) -> AlHistory:
    """Iterate train / score / query / annotate for ``acq.rounds`` rounds.

    Each round queries ``floor(acq.ratio * |unlabeled|)`` samples (at least
    one while the pool is nonempty). The history has ``acq.rounds + 1`` rows;
    row 0 is the model trained on the initial labeled pool.
    """
    if weights is not None:
        model = clone(model).set_params(lambda_sim=weights.sim, lambda_rel=weights.rel,
                                        lambda_task=weights.task)
    pool_idx, _ = split_holdout(dataset.n, test_fraction, seed)
    n0 = initial_pool(pool_idx, initial_fraction, seed).size
    counts = _ratio_counts(acq, pool_idx.size, n0)
    echo = {"acquisition": asdict(acq), "model": _param_echo(model), "strategy": strategy,
            "test_fraction": test_fraction, "initial_fraction": initial_fraction,
            "oracle_noise": oracle_noise}
    return _active_loop(dataset, model, counts, strategy, seed, test_fraction, initial_fraction,
                        oracle_noise, topfrac=topfrac, config_echo=echo)


def run_random_baseline(dataset, model, acq, weights=None, **kw) -> AlHistory:
    """Same loop with uniform sampling (without replacement) from the unlabeled pool."""
    return run_al_loop(dataset, model, acq, weights, strategy="random", **kw)


def run_budget_schedule(dataset, model, budgets, strategy, seed, use_aux=True, **kw) -> AlHistory:
    """Grow the labeled pool through the given labeled fractions, e.g. (0.1, 0.3, 0.5, 0.7, 1.0)."""
    test_fraction = kw.pop("test_fraction", 0.2)
    pool_idx, _ = split_holdout(dataset.n, test_fraction, seed)
    targets = [max(2, int(math.floor(b * pool_idx.size + 1e-9))) for b in budgets]
    if any(b > a for a, b in zip(targets[1:], targets[:-1])):
        raise ValueError("budgets must be nondecreasing")
    counts = [b - a for a, b in zip(targets[:-1], targets[1:])]
    echo = {"budgets": list(budgets), "model": _param_echo(model), "strategy": strategy,
            "test_fraction": test_fraction, "use_aux": use_aux}
    return _active_loop(dataset, model, counts, strategy, seed, test_fraction,
                        initial_fraction=budgets[0], use_aux=use_aux, config_echo=echo, **kw)


def _param_echo(model):
    return {k: v for k, v in sorted(model.get_params().items())}
