"""Cross-modal knowledge distillation with prototype-evidence alignment.

A teacher (encoder + head) is trained on the clean-ish modality T and then
frozen. The student encoder on modality S is trained with four terms:

* ``sim``  - InfoNCE over the student/teacher embedding similarity matrix,
* ``unc``  - Dirichlet uncertainty from prototype similarity, matched to the
  mean off-diagonal similarity,
* ``kd``   - KL(teacher output || teacher head fed the student feature from
  layer ``l`` on),
* ``task`` - cross entropy (classification) or 1 - CCC (regression).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .alignment import LossValue, infonce_loss, off_diagonal_mean, similarity_with_vjp
from .datagen import CER, DEC
from .evidential import PrototypeBank, prototype_update, uncertainty_loss_from_embeddings
from .numcore import RandomStream, ShapeError, as_matrix
from .nn import Mlp

PROB_CLAMP = 1e-12
TERMS = ("sim", "unc", "kd", "task")

# sub-stream tags
_TAG_TEACHER, _TAG_STUDENT, _TAG_SPLIT, _TAG_TEACHER_BATCHES, _TAG_STUDENT_BATCHES = range(1, 6)


@dataclass(frozen=True)
class KdWeights:
    sim: float = 1.0
    unc: float = 1.0
    kd: float = 1.0
    task: float = 1.0

    def __post_init__(self):
        for name in TERMS:
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"weight {name} must be finite and >= 0, got {v}")

    def as_tuple(self):
        return tuple(getattr(self, t) for t in TERMS)


@dataclass
class KdConfig:
    beta: float = 10.0
    tau_temp: float = 1.0
    delta: float = 1.0
    injection_layer: int = 1
    hidden: int = 32
    embed_dim: int = 16
    lr: float = 1e-3
    lr_min: float = 1e-6
    epochs: int = 100
    teacher_epochs: int = 100
    batch_size: int = 32
    patience: int = 20
    prototype_momentum: float = 0.9
    cer_bins: int = 3
    monitor: str = "task"  # validation quantity for early stopping: "task" or "total"
    uncertainty_form: str = "complement"


@dataclass
class HeadOutputs:
    y_t: np.ndarray
    y_s: np.ndarray
    y_t_given_s: np.ndarray


# ---------------------------------------------------------------- losses


def kl_distill_loss(y_t, y_t_given_s) -> LossValue:
    """Mean over rows of KL(y_t || y_t_given_s); only the second argument gets a gradient."""
    p = as_matrix(y_t, "y_t")
    q = as_matrix(y_t_given_s, "y_t_given_s")
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {q.shape}")
    n = p.shape[0]
    pc = np.maximum(p, PROB_CLAMP)
    qc = np.maximum(q, PROB_CLAMP)
    value = np.sum(p * (np.log(pc) - np.log(qc))) / n
    dq = np.where(q > PROB_CLAMP, -p / qc, 0.0) / n
    return LossValue(max(value, 0.0), (np.zeros_like(p), dq))


def scalar_distill_loss(y_t, y_t_given_s) -> LossValue:
    """Regression stand-in for KL: mean squared gap between the scalar outputs."""
    a = as_matrix(y_t, "y_t")
    b = as_matrix(y_t_given_s, "y_t_given_s")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    r = b - a
    return LossValue(np.mean(r * r), (np.zeros_like(a), 2.0 * r / r.size))


def ce_loss(y_pred, labels) -> LossValue:
    p = as_matrix(y_pred, "y_pred")
    labels = np.asarray(labels, dtype=int).ravel()
    n, c = p.shape
    if labels.shape != (n,):
        raise ShapeError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    rows = np.arange(n)
    picked = p[rows, labels]
    value = -np.mean(np.log(np.maximum(picked, PROB_CLAMP)))
    grad = np.zeros_like(p)
    grad[rows, labels] = np.where(picked > PROB_CLAMP, -1.0 / np.maximum(picked, PROB_CLAMP), 0.0) / n
    return LossValue(value, (grad,))


def ccc_loss(y_pred, y_true) -> LossValue:
    """1 - CCC with population moments. Gradients for both arguments."""
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    y = np.asarray(y_true, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"length mismatch: {p.size} vs {y.size}")
    n = p.size
    if n < 2:
        raise ValueError("ccc_loss needs at least 2 samples")
    mp, my = p.mean(), y.mean()
    dp, dy = p - mp, y - my
    vp, vy, cov = np.mean(dp * dp), np.mean(dy * dy), np.mean(dp * dy)
    denom = vp + vy + (mp - my) ** 2
    if denom <= 0:
        raise ValueError("CCC undefined: both inputs are the same constant")
    ccc = 2 * cov / denom

    def grad(da, db, ma, mb):
        # d(1 - CCC)/d a_i
        return -(2 * db / (n * denom) - 2 * cov / denom ** 2 * (2 * da + 2 * (ma - mb)) / n)

    return LossValue(1.0 - ccc, (grad(dp, dy, mp, my), grad(dy, dp, my, mp)))


def kd_total_loss(parts: dict, w: KdWeights) -> LossValue:
    """Weighted sum; ``grads[k]`` holds part ``k``'s gradients scaled by its weight."""
    value, grads = 0.0, []
    for name, lam in zip(TERMS, w.as_tuple()):
        part = parts[name]
        value += lam * part.value
        grads.append(tuple(lam * g for g in part.grads))
    return LossValue(value, tuple(grads))


# ---------------------------------------------------------------- model bundle


@dataclass
class ModelBundle:
    teacher_encoder: Mlp
    teacher_head: Mlp
    student_encoder: Mlp
    student_head: Mlp
    task: str = DEC
    n_outputs: int = 2
    injection_layer: int = 1
    prototypes: PrototypeBank = None
    bin_edges: np.ndarray = field(default=None)

    @classmethod
    def create(cls, d_s, d_t, task, n_outputs, config: KdConfig, stream: RandomStream):
        h, e = config.hidden, config.embed_dim
        final = "softmax" if task == DEC else "identity"
        out = n_outputs if task == DEC else 1
        ts, ss = stream.sub_stream(_TAG_TEACHER), stream.sub_stream(_TAG_STUDENT)
        bundle = cls(
            teacher_encoder=Mlp.create([d_t, h, h, e], ts.sub_stream(1)),
            teacher_head=Mlp.create([h, h, h, out], ts.sub_stream(2), final_activation=final),
            student_encoder=Mlp.create([d_s, h, h, e], ss.sub_stream(1)),
            student_head=Mlp.create([h, h, h, out], ss.sub_stream(2), final_activation=final),
            task=task,
            n_outputs=out,
            injection_layer=config.injection_layer,
        )
        head_layers = bundle.teacher_head.spec.n_layers
        if not 0 <= config.injection_layer < head_layers:
            raise ValueError(f"injection_layer must lie in [0, {head_layers})")
        return bundle

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.teacher_encoder.copy(), self.teacher_head.copy(),
                           self.student_encoder.copy(), self.student_head.copy(),
                           self.task, self.n_outputs, self.injection_layer,
                           None if self.prototypes is None else PrototypeBank(
                               self.prototypes.phi.copy(), self.prototypes.tau_temp,
                               self.prototypes.update_momentum),
                           self.bin_edges)

    def proto_labels(self, y) -> np.ndarray:
        """Class index per sample; regression targets are bucketed by ``bin_edges``."""
        if self.task == DEC:
            return np.asarray(y, dtype=int)
        return np.searchsorted(self.bin_edges, np.asarray(y, dtype=np.float64), side="right")


def encode(encoder: Mlp, x):
    """Return ``(trace, f, e)``: the trace, the last hidden activation, and the output embedding."""
    trace = encoder.forward(x)
    return trace, trace.acts[-2], trace.final


def head_outputs(bundle: ModelBundle, f_s, f_t, l=None) -> HeadOutputs:
    l = bundle.injection_layer if l is None else l
    width = bundle.teacher_head.spec.layer_sizes[l]
    if np.shape(f_s)[1] != width:
        raise ShapeError(f"student feature width {np.shape(f_s)[1]} != teacher head width {width} at layer {l}")
    return HeadOutputs(
        y_t=bundle.teacher_head.forward(f_t).final,
        y_s=bundle.student_head.forward(f_s).final,
        y_t_given_s=bundle.teacher_head.forward_from_layer(l, f_s).final,
    )


def _task_loss(task, y_pred, y):
    if task == DEC:
        return ce_loss(y_pred, y)
    loss = ccc_loss(y_pred.ravel(), y)
    return LossValue(loss.value, (loss.grads[0].reshape(y_pred.shape), loss.grads[1]))


def student_objective(bundle: ModelBundle, x_s, x_t, y, w: KdWeights, config: KdConfig,
                      need_grads=True, h=None):
    """Evaluate all four terms on one batch.

    Returns ``(parts, total, enc_grads, head_grads)`` where ``parts`` maps term
    names to :class:`LossValue` and the gradients are w.r.t. the student
    encoder and student head parameters. Teacher, prototypes and the
    uncertainty target ``h`` are constants; pass ``h`` to pin the target
    (otherwise it is the off-diagonal mean of this batch's similarity).
    """
    if np.shape(x_s)[0] < 2:
        raise ValueError("batch must contain at least 2 paired samples")
    tr_s, f_s, e_s = encode(bundle.student_encoder, x_s)
    _, f_t, e_t = encode(bundle.teacher_encoder, x_t)
    q, sim_vjp = similarity_with_vjp(e_s, e_t, config.beta)
    parts = {"sim": infonce_loss(q)}
    if h is None:
        h = off_diagonal_mean(q)
    parts["unc"], _ = uncertainty_loss_from_embeddings(
        e_s, bundle.prototypes, h, config.beta, config.delta, config.uncertainty_form)
    y_t = bundle.teacher_head.forward(f_t).final
    tr_ts = bundle.teacher_head.forward_from_layer(bundle.injection_layer, f_s)
    distill = kl_distill_loss if bundle.task == DEC else scalar_distill_loss
    parts["kd"] = distill(y_t, tr_ts.final)
    tr_head = bundle.student_head.forward(f_s)
    parts["task"] = _task_loss(bundle.task, tr_head.final, y)
    total = kd_total_loss(parts, w)
    if not need_grads:
        return parts, total, None, None

    d_e = np.zeros_like(e_s)
    d_f = np.zeros_like(f_s)
    if w.sim:
        d_e += sim_vjp(w.sim * parts["sim"].grads[0])[0]
    if w.unc:
        d_e += w.unc * parts["unc"].grads[0]
    if w.kd:
        d_f += bundle.teacher_head.backward(tr_ts, w.kd * parts["kd"].grads[1]).input
    head_grads = bundle.student_head.backward(tr_head, w.task * parts["task"].grads[0])
    d_f += head_grads.input
    enc_grads = bundle.student_encoder.backward(
        tr_s, d_e, grad_acts={bundle.student_encoder.spec.n_layers - 1: d_f})
    return parts, total, enc_grads, head_grads


# ---------------------------------------------------------------- training


def cosine_lr(epoch, epochs, lr, lr_min):
    if epochs <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * epoch / (epochs - 1)))


def _batches(n, batch_size, stream):
    """Shuffled index batches of at least ``batch_size`` rows (remainder merged)."""
    order = stream.permutation(n)
    n_batches = max(1, n // batch_size)
    return np.array_split(order, n_batches)


def _snapshot(*mlps):
    return [m.copy() for m in mlps]


def train_teacher(bundle: ModelBundle, x_t, y, config: KdConfig, stream: RandomStream,
                  val=None) -> ModelBundle:
    """Fit the teacher encoder and head on the task loss alone, with optional early stopping."""
    x_t = as_matrix(x_t, "x_t")
    if x_t.shape[0] == 0:
        raise ValueError("cannot train the teacher on an empty dataset")
    enc, head = bundle.teacher_encoder, bundle.teacher_head
    epochs = config.teacher_epochs
    best, best_loss, since = None, np.inf, 0
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, config.lr, config.lr_min)
        for idx in _batches(x_t.shape[0], config.batch_size, stream.sub_stream(epoch)):
            tr_e, f, _ = encode(enc, x_t[idx])
            tr_h = head.forward(f)
            loss = _task_loss(bundle.task, tr_h.final, y[idx])
            hg = head.backward(tr_h, loss.grads[0])
            eg = enc.backward(tr_e, np.zeros_like(tr_e.final), grad_acts={enc.spec.n_layers - 1: hg.input})
            head.step(hg, lr)
            enc.step(eg, lr)
        if val is not None:
            _, f, _ = encode(enc, val[0])
            vloss = _task_loss(bundle.task, head.forward(f).final, val[1]).value
            if vloss < best_loss:
                best, best_loss, since = _snapshot(enc, head), vloss, 0
            else:
                since += 1
                if since >= config.patience:
                    break
    if best is not None:
        bundle.teacher_encoder, bundle.teacher_head = best
    return bundle


def init_prototypes(bundle: ModelBundle, x_s, y, config: KdConfig):
    n_classes = bundle.n_outputs if bundle.task == DEC else config.cer_bins
    if bundle.task == CER:
        qs = np.linspace(0, 1, config.cer_bins + 1)[1:-1]
        bundle.bin_edges = np.quantile(np.asarray(y, dtype=np.float64), qs)
    _, _, e_s = encode(bundle.student_encoder, x_s)
    bundle.prototypes = PrototypeBank.from_class_means(
        e_s, bundle.proto_labels(y), n_classes, config.tau_temp, config.prototype_momentum)
    return bundle


def train_student_step(bundle: ModelBundle, x_s, x_t, y, w: KdWeights, config: KdConfig, lr=None):
    """One Adam step on the student plus one prototype EMA update. Returns the loss parts."""
    parts, total, enc_g, head_g = student_objective(bundle, x_s, x_t, y, w, config)
    _, _, e_s = encode(bundle.student_encoder, x_s)
    bundle.student_encoder.step(enc_g, lr)
    bundle.student_head.step(head_g, lr)
    bundle.prototypes = prototype_update(bundle.prototypes, e_s, bundle.proto_labels(y))
    out = {k: v.value for k, v in parts.items()}
    out["total"] = total.value
    return out


def train_student_epoch(bundle: ModelBundle, batch, w: KdWeights, config: KdConfig,
                        stream: RandomStream = None, lr=None) -> dict:
    """One pass over ``batch = (x_s, x_t, y)`` in shuffled minibatches.

    Prototypes are reset to the class means of the current student embeddings
    before the pass and follow an EMA after every step. Returns the mean of each loss term over the minibatches.
    """
    x_s, x_t, y = batch
    x_s, x_t = as_matrix(x_s, "x_s"), as_matrix(x_t, "x_t")
    y = np.asarray(y)
    if x_s.shape[0] < 2:
        raise ValueError("batch must contain at least 2 paired samples")
    init_prototypes(bundle, x_s, y, config)
    stream = stream or RandomStream(0)
    logs = [train_student_step(bundle, x_s[i], x_t[i], y[i], w, config, lr)
            for i in _batches(x_s.shape[0], config.batch_size, stream)]
    return {k: float(np.mean([log[k] for log in logs])) for k in logs[0]}


def train_student(bundle: ModelBundle, train, w: KdWeights, config: KdConfig,
                  stream: RandomStream, val=None) -> list:
    """Run up to ``config.epochs`` epochs with cosine lr and early stopping on ``val``."""
    history = []
    best, best_loss, since = None, np.inf, 0
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr, config.lr_min)
        log = train_student_epoch(bundle, train, w, config, stream.sub_stream(epoch), lr)
        log["epoch"] = epoch
        if val is not None:
            parts, total, _, _ = student_objective(bundle, *val, w, config, need_grads=False)
            log["val_task"] = parts["task"].value
            log["val_total"] = total.value
            score = log["val_total"] if config.monitor == "total" else log["val_task"]
            if score < best_loss:
                best, best_loss, since = _snapshot(bundle.student_encoder, bundle.student_head), score, 0
            else:
                since += 1
        history.append(log)
        if val is not None and since >= config.patience:
            break
    if best is not None:
        bundle.student_encoder, bundle.student_head = best
    return history


def loss_curve_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "l_sim", "l_unc", "l_kd", "l_task", "total"])
    for row in history:
        writer.writerow([row["epoch"]] + [repr(row[k]) for k in ("sim", "unc", "kd", "task", "total")])
    return buf.getvalue()


def split_validation(n, fraction, stream: RandomStream):
    """Return ``(train_idx, val_idx)``; no validation split when it would leave < 2 rows on a side."""
    n_val = int(math.floor(fraction * n))
    if n_val < 2 or n - n_val < 2:
        return np.arange(n), None
    order = stream.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


# ---------------------------------------------------------------- estimators


class _CrossModalKD(BaseEstimator):
    _task = DEC

    def __init__(self, lambda_sim=1.0, lambda_unc=1.0, lambda_kd=1.0, lambda_task=1.0,
                 beta=10.0, tau_temp=1.0, delta=1.0, injection_layer=1, hidden=32,
                 embed_dim=16, lr=1e-3, lr_min=1e-6, epochs=100, teacher_epochs=100,
                 batch_size=32, patience=20, validation_fraction=0.2,
                 prototype_momentum=0.9, cer_bins=3, monitor="task",
                 uncertainty_form="complement", random_state=0):
        self.lambda_sim = lambda_sim
        self.lambda_unc = lambda_unc
        self.lambda_kd = lambda_kd
        self.lambda_task = lambda_task
        self.beta = beta
        self.tau_temp = tau_temp
        self.delta = delta
        self.injection_layer = injection_layer
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.lr = lr
        self.lr_min = lr_min
        self.epochs = epochs
        self.teacher_epochs = teacher_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.prototype_momentum = prototype_momentum
        self.cer_bins = cer_bins
        self.monitor = monitor
        self.uncertainty_form = uncertainty_form
        self.random_state = random_state

    def _weights(self):
        return KdWeights(self.lambda_sim, self.lambda_unc, self.lambda_kd, self.lambda_task)

    def _config(self):
        return KdConfig(beta=self.beta, tau_temp=self.tau_temp, delta=self.delta,
                        injection_layer=self.injection_layer, hidden=self.hidden,
                        embed_dim=self.embed_dim, lr=self.lr, lr_min=self.lr_min,
                        epochs=self.epochs, teacher_epochs=self.teacher_epochs,
                        batch_size=self.batch_size, patience=self.patience,
                        prototype_momentum=self.prototype_momentum, cer_bins=self.cer_bins,
                        monitor=self.monitor, uncertainty_form=self.uncertainty_form)

    def _encode_targets(self, y):
        raise NotImplementedError

    def fit(self, X, y, X_teacher=None):
        """Train the teacher on ``X_teacher`` then distil into a student on ``X``.

        ``X`` and ``X_teacher`` are row-aligned views of the same samples.
        """
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=self._task == CER)
        if X_teacher is None:
            raise ValueError("X_teacher (the paired teacher-modality features) is required")
        X_teacher = check_array(X_teacher, dtype=np.float64)
        if X_teacher.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but X_teacher has {X_teacher.shape[0]}")
        if X.shape[0] < 4:
            raise ValueError("need at least 4 samples")
        targets, n_out = self._encode_targets(y)
        config, w = self._config(), self._weights()
        root = RandomStream(self.random_state)
        tr, va = split_validation(X.shape[0], self.validation_fraction, root.sub_stream(_TAG_SPLIT))
        bundle = ModelBundle.create(X.shape[1], X_teacher.shape[1], self._task, n_out, config, root)
        t_val = None if va is None else (X_teacher[va], targets[va])
        train_teacher(bundle, X_teacher[tr], targets[tr], config,
                      root.sub_stream(_TAG_TEACHER_BATCHES), val=t_val)
        s_val = None if va is None else (X[va], X_teacher[va], targets[va])
        self.history_ = train_student(bundle, (X[tr], X_teacher[tr], targets[tr]), w, config,
                                      root.sub_stream(_TAG_STUDENT_BATCHES), val=s_val)
        self.bundle_ = bundle
        self.n_features_in_ = X.shape[1]
        return self

    def _student_output(self, X):
        check_is_fitted(self, "bundle_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        _, f, _ = encode(self.bundle_.student_encoder, X)
        return self.bundle_.student_head.forward(f).final

    def teacher_predict(self, X_teacher):
        check_is_fitted(self, "bundle_")
        _, f, _ = encode(self.bundle_.teacher_encoder, check_array(X_teacher, dtype=np.float64))
        return self.bundle_.teacher_head.forward(f).final

    def loss_curve_csv(self) -> str:
        check_is_fitted(self, "history_")
        return loss_curve_csv(self.history_)


class CrossModalKDClassifier(ClassifierMixin, _CrossModalKD):
    """Student classifier on modality S distilled from a modality-T teacher."""

    _task = DEC

    def _encode_targets(self, y):
        check_classification_targets(y)
        self.classes_, idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        return idx, len(self.classes_)

    def predict_proba(self, X):
        return self._student_output(X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class CrossModalKDRegressor(RegressorMixin, _CrossModalKD):
    """Student regressor on modality S trained with 1 - CCC and scalar distillation."""

    _task = CER

    def _encode_targets(self, y):
        return np.asarray(y, dtype=np.float64), 1

    def predict(self, X):
        return self._student_output(X).ravel()
