import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hrhf import segnet
from hrhf.dataset import IGNORE
from hrhf.distill import (DistillConfig, MixedSampler, Pool, SampleBatch, hrhf_train_step, kd_loss,
                          label_merge, make_batch, one_hot, probability_rearrange, random_crop,
                          rearrange_matrix, seg_loss, split_counts)
from hrhf.numcore import AdamState


def _simplex(rng, shape):
    e = rng.exponential(size=shape)
    return e / e.sum(axis=-1, keepdims=True)


def merge_oracle(teacher, labels, num_classes):
    """Per-pixel scan: concatenate, take the last index of the maximum."""
    h, w, old = teacher.shape
    out = np.zeros((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            if labels[i, j] == IGNORE:
                out[i, j] = IGNORE
                continue
            row = list(teacher[i, j]) + [1.0 if labels[i, j] == c else 0.0 for c in range(old, num_classes)]
            best = 0
            for c in range(1, len(row)):
                if row[c] >= row[best]:
                    best = c
            out[i, j] = best
    return out


class TestRearrange:
    def test_example(self):
        out = probability_rearrange(np.array([[0.2, 0.3, 0.5]]), 2)
        np.testing.assert_allclose(out, [[0.7, 0.3]], atol=1e-15)

    def test_identity_without_new(self):
        s = _simplex(np.random.default_rng(0), (3, 3, 4))
        assert probability_rearrange(s, 4).tobytes() == s.tobytes()

    def test_mass_conserved(self):
        s = _simplex(np.random.default_rng(1), (5, 5, 6))
        np.testing.assert_allclose(probability_rearrange(s, 3).sum(-1), s.sum(-1), atol=1e-12)

    def test_bad_count(self):
        with pytest.raises(ValueError):
            probability_rearrange(np.ones((2, 3)) / 3, 4)
        with pytest.raises(ValueError):
            rearrange_matrix(3, 0)

    def test_matrix_matches(self):
        s = _simplex(np.random.default_rng(2), (4, 4, 5))
        np.testing.assert_allclose(s @ rearrange_matrix(5, 3), probability_rearrange(s, 3), atol=1e-15)


class TestLabelMerge:
    def test_new_beats_teacher(self):
        assert label_merge(np.array([[[0.6, 0.4]]]), np.array([[2]]))[0, 0] == 2

    def test_background_when_unlabeled(self):
        assert label_merge(np.array([[[0.6, 0.4]]]), np.array([[0]]))[0, 0] == 0

    def test_saturated_teacher_loses_tie(self):
        assert label_merge(np.array([[[0.0, 1.0]]]), np.array([[2]]))[0, 0] == 2

    def test_ignore_kept(self):
        assert label_merge(np.array([[[0.6, 0.4]]]), np.array([[IGNORE]]))[0, 0] == IGNORE

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            label_merge(np.ones((2, 2, 3)) / 3, np.zeros((3, 2), dtype=int))

    def test_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            old, new = 3, 2
            teacher = _simplex(rng, (4, 4, old))
            labels = rng.choice([0, 3, 4], size=(4, 4))
            np.testing.assert_array_equal(label_merge(teacher, labels), merge_oracle(teacher, labels, old + new))

    def test_one_hot_valid(self):
        rng = np.random.default_rng(4)
        merged = label_merge(_simplex(rng, (4, 4, 3)), rng.choice([0, 3], size=(4, 4)))
        np.testing.assert_array_equal(one_hot(merged, 4).sum(-1), 1.0)


class TestLosses:
    def test_kd_uniform(self):
        p = np.full((2, 2, 2), 0.5)
        assert kd_loss(p, p) == pytest.approx(np.log(2), abs=1e-12)

    def test_kd_one_hot_match(self):
        p = np.zeros((2, 2, 3))
        p[..., 1] = 1.0
        assert kd_loss(p, p) == 0.0

    def test_kd_equals_entropy(self):
        p = _simplex(np.random.default_rng(5), (3, 3, 4))
        assert kd_loss(p, p) == pytest.approx(float(-(p * np.log(p)).sum(-1).mean()), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_gibbs(self, seed):
        rng = np.random.default_rng(seed)
        p, q = _simplex(rng, (2, 2, 3)), _simplex(rng, (2, 2, 3))
        assert kd_loss(p, q) >= kd_loss(p, p) - 1e-12

    def test_kd_minimized_at_teacher(self):
        rng = np.random.default_rng(6)
        p = _simplex(rng, (3, 3, 3))
        for _ in range(50):
            q = p + rng.normal(scale=0.01, size=p.shape)
            q = np.clip(q, 1e-6, None)
            q /= q.sum(-1, keepdims=True)
            assert kd_loss(p, q) >= kd_loss(p, p) - 1e-12

    def test_seg_single_pixel(self):
        assert seg_loss(np.array([[1]]), np.array([[[0.2, 0.5, 0.3]]])) == pytest.approx(np.log(2), abs=1e-12)

    def test_seg_perfect(self):
        labels = np.array([[0, 2], [1, 1]])
        assert seg_loss(labels, one_hot(labels, 3)) == 0.0

    def test_seg_ignore_excluded(self):
        s = np.array([[[0.2, 0.5, 0.3], [0.9, 0.05, 0.05]]])
        assert seg_loss(np.array([[1, IGNORE]]), s) == pytest.approx(np.log(2), abs=1e-12)


class TestBatching:
    def test_split_counts(self):
        assert split_counts(8, (1, 1)) == (4, 4)
        assert split_counts(9, (2, 1)) == (6, 3)

    def _pools(self, n_real=10, n_fake=10):
        rng = np.random.default_rng(7)
        real = Pool(rng.uniform(size=(n_real, 4, 4, 3)), np.zeros((n_real, 4, 4), dtype=int))
        fake = Pool(rng.uniform(size=(n_fake, 4, 4, 3)), np.zeros((n_fake, 4, 4), dtype=int))
        return real, fake

    def test_make_batch_ratio(self):
        real, fake = self._pools()
        b = make_batch(real, fake, DistillConfig(batch_size=8), np.random.default_rng(0))
        assert b.is_real.sum() == 4 and (~b.is_real).sum() == 4

    def test_empty_fake_pool_falls_back(self, caplog):
        real, _ = self._pools()
        with caplog.at_level(logging.WARNING):
            b = make_batch(real, None, DistillConfig(batch_size=8), np.random.default_rng(0))
        assert b.is_real.all() and len(b.images) == 8
        assert "empty" in caplog.text

    def test_make_batch_deterministic(self):
        real, fake = self._pools()
        a = make_batch(real, fake, DistillConfig(), np.random.default_rng(5))
        b = make_batch(real, fake, DistillConfig(), np.random.default_rng(5))
        assert a.images.tobytes() == b.images.tobytes()

    def test_sampler_epoch_without_replacement(self):
        sampler = MixedSampler(12, 5, DistillConfig(batch_size=8), np.random.default_rng(1))
        seen = [i for real, fake in sampler.epoch() for i in real]
        assert len(seen) == len(set(seen)) == 12
        fakes = [list(f) for _, f in sampler.epoch()]
        assert all(len(f) == 4 for f in fakes)

    def test_crop_consistent(self):
        rng = np.random.default_rng(2)
        imgs = rng.uniform(size=(3, 8, 8, 3))
        labels = rng.integers(0, 3, size=(3, 8, 8))
        x, y, _ = random_crop(imgs, labels, 4, np.random.default_rng(9))
        for i in range(3):
            found = [(a, b) for a in range(5) for b in range(5)
                     if np.array_equal(imgs[i, a:a + 4, b:b + 4], x[i])]
            assert len(found) == 1
            a, b = found[0]
            np.testing.assert_array_equal(labels[i, a:a + 4, b:b + 4], y[i])

    def test_bad_config(self):
        with pytest.raises(ValueError):
            DistillConfig(lam=-1)
        with pytest.raises(ValueError):
            DistillConfig(ratio=(1, 0))
        with pytest.raises(ValueError):
            DistillConfig(ratio=(1.5, 1))


class TestTrainStep:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(10)
        arch = segnet.Arch(width=4, blocks=1)
        teacher = segnet.init_model(arch, 3, rng)
        student = segnet.head_expand(teacher, 1, rng)
        x = rng.uniform(size=(2, 4, 4, 3))
        labels = np.zeros((2, 4, 4), dtype=int)
        labels[0, :2, :2] = 3
        batch = SampleBatch(x, np.array([True, False]), labels)
        return teacher, student, batch

    def test_teacher_untouched(self, setup):
        teacher, student, batch = setup
        before = teacher.copy()
        hrhf_train_step(teacher, student, batch, DistillConfig(), AdamState())
        assert teacher.equals(before)

    def test_student_changes(self, setup):
        teacher, student, batch = setup
        before = student.copy()
        res, opt = hrhf_train_step(teacher, student, batch, DistillConfig(), AdamState())
        assert res.accepted and opt.step == 1
        assert not student.equals(before)

    def test_lambda_zero_is_seg(self, setup):
        teacher, student, batch = setup
        res, _ = hrhf_train_step(teacher, student.copy(), batch, DistillConfig(lam=0.0), AdamState())
        assert res.loss == res.seg

    def test_linear_in_lambda(self, setup):
        teacher, student, batch = setup
        res, _ = hrhf_train_step(teacher, student.copy(), batch, DistillConfig(lam=1.0), AdamState())
        assert res.loss == pytest.approx(res.kd + res.seg, abs=1e-12)
        res3, _ = hrhf_train_step(teacher, student.copy(), batch, DistillConfig(lam=3.0), AdamState())
        assert res3.loss == pytest.approx(3 * res.kd + res.seg, abs=1e-12)

    def test_losses_match_numpy(self, setup):
        teacher, student, batch = setup
        t = segnet.forward(teacher, batch.images)
        s = segnet.forward(student.copy(), batch.images, mode="train")
        merged = label_merge(t, batch.new_labels)
        res, _ = hrhf_train_step(teacher, student, batch, DistillConfig(), AdamState())
        assert res.kd == pytest.approx(kd_loss(t, probability_rearrange(s, 3)), abs=1e-12)
        assert res.seg == pytest.approx(seg_loss(merged, s), abs=1e-12)

    def test_non_finite_rejected(self, setup):
        teacher, student, batch = setup
        student.params["head.w"] = student.params["head.w"] * 1e308
        before = student.copy()
        with np.errstate(all="ignore"):
            res, opt = hrhf_train_step(teacher, student, batch, DistillConfig(), AdamState())
        assert not res.accepted and opt.step == 0
        assert student.equals(before)
