import hashlib
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from xmodal.alignment import LossValue
from xmodal.datagen import CER, DEC
from xmodal.distill import (
    CrossModalKDClassifier,
    CrossModalKDRegressor,
    KdConfig,
    KdWeights,
    ModelBundle,
    ccc_loss,
    ce_loss,
    cosine_lr,
    encode,
    head_outputs,
    kd_total_loss,
    kl_distill_loss,
    student_objective,
    train_student_epoch,
    train_teacher,
)
from xmodal.nn import Mlp
from xmodal.numcore import RandomStream, ShapeError, softmax_rows

from test_metrics import brute_ccc


def _bundle(task=DEC, l=1, seed=0, **kw):
    config = KdConfig(hidden=6, embed_dim=4, injection_layer=l, **kw)
    return ModelBundle.create(5, 4, task, 3, config, RandomStream(seed)), config


def _blobs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    centers = np.array([[3.0, 0, 0, 0], [0, 3.0, 0, 0], [0, 0, 3.0, 0]])
    x_t = centers[y] + 0.3 * rng.normal(size=(n, 4))
    x_s = np.hstack([x_t, np.zeros((n, 1))]) + rng.normal(size=(n, 5))
    return x_s, x_t, y


def _hash(*mlps):
    h = hashlib.sha256()
    for m in mlps:
        h.update(m.params.to_vector().tobytes())
    return h.hexdigest()


class TestHeadOutputs:
    @pytest.mark.parametrize("l", [0, 1, 2])
    def test_self_injection_bitwise(self, l):
        bundle, _ = _bundle(l=l)
        x_t = np.random.default_rng(0).normal(size=(7, 4))
        _, f_t, _ = encode(bundle.teacher_encoder, x_t)
        act = bundle.teacher_head.forward(f_t).acts[l]
        out = head_outputs(bundle, act, f_t, l)
        np.testing.assert_array_equal(out.y_t_given_s, out.y_t)

    def test_layer_zero_is_full_head(self):
        bundle, _ = _bundle(l=0)
        f = np.random.default_rng(1).normal(size=(3, 6))
        out = head_outputs(bundle, f, f, 0)
        np.testing.assert_array_equal(out.y_t_given_s, bundle.teacher_head.forward(f).final)

    def test_shapes_and_rows(self):
        bundle, _ = _bundle()
        rng = np.random.default_rng(2)
        f = rng.normal(size=(5, 6))
        out = head_outputs(bundle, f, f)
        for y in (out.y_t, out.y_s, out.y_t_given_s):
            assert y.shape == (5, 3)
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)

    def test_width_mismatch(self):
        bundle, _ = _bundle()
        with pytest.raises(ShapeError):
            head_outputs(bundle, np.ones((2, 5)), np.ones((2, 6)))

    def test_bad_injection_layer(self):
        with pytest.raises(ValueError):
            _bundle(l=3)


class TestKl:
    def test_identical(self):
        p = softmax_rows(np.random.default_rng(0).normal(size=(4, 3)))
        assert kl_distill_loss(p, p).value == 0.0

    def test_forced_single_term(self):
        assert kl_distill_loss([[1.0, 0.0]], [[0.5, 0.5]]).value == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_value(self):
        expect = 0.7 * math.log(1.4) + 0.3 * math.log(0.6)
        assert kl_distill_loss([[0.7, 0.3]], [[0.5, 0.5]]).value == pytest.approx(expect, abs=1e-12)
        assert expect == pytest.approx(0.08228, abs=1e-5)

    def test_teacher_gets_no_gradient(self):
        loss = kl_distill_loss([[0.7, 0.3]], [[0.5, 0.5]])
        np.testing.assert_array_equal(loss.grads[0], 0.0)
        np.testing.assert_allclose(loss.grads[1], [[-1.4, -0.6]], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kl_distill_loss(np.ones((1, 2)) / 2, np.ones((1, 3)) / 3)

    @given(st.integers(0, 2 ** 31), st.integers(1, 5), st.integers(2, 5))
    def test_nonnegative(self, seed, n, c):
        rng = np.random.default_rng(seed)
        p, q = softmax_rows(3 * rng.normal(size=(n, c))), softmax_rows(3 * rng.normal(size=(n, c)))
        assert kl_distill_loss(p, q).value >= 0.0

    def test_optimising_the_injected_head_drives_kl_to_zero(self):
        rng = np.random.default_rng(3)
        target = softmax_rows(rng.normal(size=(8, 3)))
        x = rng.normal(size=(8, 4))
        head = Mlp.create([4, 6, 3], RandomStream(0), final_activation="softmax")
        head.opt.lr = 0.05
        for _ in range(200):
            tr = head.forward(x)
            head.step(head.backward(tr, kl_distill_loss(target, tr.final).grads[1]))
        assert kl_distill_loss(target, head.forward(x).final).value < 1e-3


class TestTaskLosses:
    def test_ce_certain(self):
        assert ce_loss([[0.0, 1.0]], [1]).value == 0.0

    @pytest.mark.parametrize("c", [2, 3, 6])
    def test_ce_uniform(self, c):
        assert ce_loss(np.full((4, c), 1 / c), [0, 1, 1, 0]).value == pytest.approx(math.log(c), abs=1e-12)

    def test_ce_hand_value(self):
        assert ce_loss([[0.25, 0.75]], [1]).value == pytest.approx(-math.log(0.75), abs=1e-12)
        assert -math.log(0.75) == pytest.approx(0.28768, abs=1e-5)

    def test_ce_label_range(self):
        with pytest.raises(ValueError):
            ce_loss([[0.5, 0.5]], [2])

    def test_ccc_perfect(self):
        assert ccc_loss([1.0, 3.0, 2.0], [1.0, 3.0, 2.0]).value == pytest.approx(0.0, abs=1e-15)

    def test_ccc_constant_at_mean(self):
        assert ccc_loss([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]).value == pytest.approx(1.0, abs=1e-15)

    def test_ccc_brute_force(self):
        assert ccc_loss([1, 2, 3], [2, 4, 6]).value == pytest.approx(1 - brute_ccc([1, 2, 3], [2, 4, 6]),
                                                                     abs=1e-12)

    def test_ccc_symmetric(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = rng.normal(size=6), rng.normal(size=6)
            assert ccc_loss(a, b).value == pytest.approx(ccc_loss(b, a).value, abs=1e-12)

    def test_ccc_degenerate(self):
        with pytest.raises(ValueError, match="undefined"):
            ccc_loss([1.0, 1.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            ccc_loss([1.0], [2.0])


class TestTotal:
    parts = {k: LossValue(v, (np.array([v]),)) for k, v in zip(("sim", "unc", "kd", "task"),
                                                                (0.2, 0.4, 0.6, 0.8))}

    def test_all_zero(self):
        assert kd_total_loss(self.parts, KdWeights(0, 0, 0, 0)).value == 0.0

    def test_projection(self):
        assert kd_total_loss(self.parts, KdWeights(1, 0, 0, 0)).value == 0.2

    def test_hand_sum(self):
        total = kd_total_loss(self.parts, KdWeights(0.5, 0.5, 1, 1))
        assert total.value == pytest.approx(1.7, abs=1e-15)
        np.testing.assert_allclose(total.grads[0][0], [0.1])

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            KdWeights(-1, 0, 0, 0)


class TestTraining:
    def test_teacher_learns_separable_toy(self):
        x_s, x_t, y = _blobs(90)
        # 90 rows in batches of 32 is 2 steps per epoch, so 250 epochs stay within 500 steps
        bundle, config = _bundle(teacher_epochs=250, batch_size=32, lr=1e-2)
        train_teacher(bundle, x_t, y, config, RandomStream(0))
        _, f, _ = encode(bundle.teacher_encoder, x_t)
        acc = np.mean(bundle.teacher_head.forward(f).final.argmax(axis=1) == y)
        assert acc >= 0.95

    def test_teacher_zero_epochs(self):
        x_s, x_t, y = _blobs()
        bundle, config = _bundle(teacher_epochs=0)
        before = _hash(bundle.teacher_encoder, bundle.teacher_head)
        train_teacher(bundle, x_t, y, config, RandomStream(0))
        assert _hash(bundle.teacher_encoder, bundle.teacher_head) == before

    def test_teacher_deterministic(self):
        x_s, x_t, y = _blobs()
        hashes = []
        for _ in range(2):
            bundle, config = _bundle(teacher_epochs=5)
            train_teacher(bundle, x_t, y, config, RandomStream(1))
            hashes.append(_hash(bundle.teacher_encoder, bundle.teacher_head))
        assert hashes[0] == hashes[1]

    def test_teacher_frozen_during_distillation(self):
        x_s, x_t, y = _blobs()
        bundle, config = _bundle()
        before = _hash(bundle.teacher_encoder, bundle.teacher_head)
        for epoch in range(10):
            train_student_epoch(bundle, (x_s, x_t, y), KdWeights(), config, RandomStream(epoch))
        assert _hash(bundle.teacher_encoder, bundle.teacher_head) == before

    def test_task_only_reduces_to_cross_entropy(self):
        x_s, x_t, y = _blobs(8)
        bundle, config = _bundle()
        train_student_epoch(bundle, (x_s, x_t, y), KdWeights(0, 0, 0, 1), config, RandomStream(0), lr=0.0)
        parts, total, _, _ = student_objective(bundle, x_s, x_t, y, KdWeights(0, 0, 0, 1), config)
        _, f, _ = encode(bundle.student_encoder, x_s)
        assert total.value == ce_loss(bundle.student_head.forward(f).final, y).value

    def test_breakdown_has_all_terms(self):
        x_s, x_t, y = _blobs()
        bundle, config = _bundle()
        log = train_student_epoch(bundle, (x_s, x_t, y), KdWeights(), config, RandomStream(0))
        assert set(log) == {"sim", "unc", "kd", "task", "total"}
        assert all(np.isfinite(v) for v in log.values())

    def test_batch_of_one_rejected(self):
        x_s, x_t, y = _blobs()
        bundle, config = _bundle()
        with pytest.raises(ValueError, match="at least 2"):
            train_student_epoch(bundle, (x_s[:1], x_t[:1], y[:1]), KdWeights(), config)

    def test_regression_bundle(self):
        x_s, x_t, _ = _blobs()
        y = x_t[:, 0] - x_t[:, 1]
        bundle, config = _bundle(task=CER)
        log = train_student_epoch(bundle, (x_s, x_t, y), KdWeights(), config, RandomStream(0))
        assert np.isfinite(log["total"])
        assert bundle.prototypes.c == config.cer_bins

    def test_cosine_schedule_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-6) == pytest.approx(1e-3)
        assert cosine_lr(99, 100, 1e-3, 1e-6) == pytest.approx(1e-6)
        lrs = [cosine_lr(e, 100, 1e-3, 1e-6) for e in range(100)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestEstimators:
    def test_get_params_and_clone(self):
        clf = CrossModalKDClassifier(lambda_unc=0.5, beta=4.0, epochs=3)
        params = clf.get_params()
        assert params["lambda_unc"] == 0.5 and params["beta"] == 4.0
        assert clone(clf).get_params() == params

    def test_fit_predict(self):
        x_s, x_t, y = _blobs(80)
        labels = np.array(["a", "b", "c"])[y]
        clf = CrossModalKDClassifier(epochs=10, teacher_epochs=20, hidden=8, embed_dim=4, random_state=1)
        clf.fit(x_s, labels, X_teacher=x_t)
        proba = clf.predict_proba(x_s)
        assert proba.shape == (80, 3)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
        assert set(clf.predict(x_s)) <= {"a", "b", "c"}
        assert clf.loss_curve_csv().splitlines()[0] == "epoch,l_sim,l_unc,l_kd,l_task,total"
        assert clf.teacher_predict(x_t).shape == (80, 3)

    def test_deterministic(self):
        x_s, x_t, y = _blobs(40)
        kw = dict(epochs=5, teacher_epochs=5, hidden=6, embed_dim=3, random_state=3)
        a = CrossModalKDClassifier(**kw).fit(x_s, y, X_teacher=x_t).predict_proba(x_s)
        b = CrossModalKDClassifier(**kw).fit(x_s, y, X_teacher=x_t).predict_proba(x_s)
        np.testing.assert_array_equal(a, b)

    def test_regressor(self):
        x_s, x_t, _ = _blobs(60)
        y = np.tanh(x_t[:, 0] - x_t[:, 1])
        reg = CrossModalKDRegressor(epochs=5, teacher_epochs=5, hidden=6, embed_dim=3)
        reg.fit(x_s, y, X_teacher=x_t)
        assert reg.predict(x_s).shape == (60,)

    def test_input_validation(self):
        x_s, x_t, y = _blobs(20)
        clf = CrossModalKDClassifier(epochs=1, teacher_epochs=1)
        with pytest.raises(ValueError, match="X_teacher"):
            clf.fit(x_s, y)
        with pytest.raises(ValueError, match="rows"):
            clf.fit(x_s, y, X_teacher=x_t[:10])
        with pytest.raises(ValueError):
            clf.fit(x_s, np.zeros(20, dtype=int), X_teacher=x_t)
        clf.fit(x_s, y, X_teacher=x_t)
        with pytest.raises(ValueError, match="features"):
            clf.predict(x_s[:, :3])
