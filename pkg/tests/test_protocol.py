import json

import numpy as np
import pytest

from hrhf import segnet
from hrhf.dataset import IGNORE, StepSpec, make_scenes
from hrhf.distill import DistillConfig
from hrhf.inversion import InversionConfig
from hrhf.protocol import (RunPlan, TrainConfig, config_hash, confusion_matrix, evaluate, evaluate_arrays,
                           iou_from_confusion, run_plan, run_step, step_data, train_initial, train_joint)

SPEC = StepSpec.preset("3-1")
TINY = segnet.Arch(width=4, blocks=1)


def _plan(method="HRHF", **kw):
    base = dict(step_spec=SPEC, method=method, arch=TINY, initial=TrainConfig(epochs=1, crop=16),
                incremental=DistillConfig(epochs=1), crop=16,
                inversion=InversionConfig(steps=2, resolution=16), fake_max=4)
    base.update(kw)
    return RunPlan(**base)


@pytest.fixture(scope="module")
def scenes():
    return make_scenes([5, 1], 24, SPEC.classes)


class TestIoU:
    def test_two_by_two_example(self):
        gt = np.array([[1, 1], [0, 0]])
        pred = np.array([[1, 0], [0, 0]])
        iou, groups = evaluate_arrays(pred, gt, 2, [], [1])
        assert iou[1] == pytest.approx(1 / 2) and iou[0] == pytest.approx(2 / 3)
        assert groups["all"] == pytest.approx(7 / 12)

    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).integers(0, 4, size=(10, 10))
        iou = iou_from_confusion(confusion_matrix(gt, gt, 5))
        for c in range(5):
            if (gt == c).any():
                assert iou[c] == 1.0
            else:
                assert np.isnan(iou[c])

    def test_ignore_excluded(self):
        cm = confusion_matrix(np.array([1, IGNORE]), np.array([1, 0]), 2)
        assert cm.sum() == 1 and cm[1, 1] == 1

    def test_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            iou = iou_from_confusion(confusion_matrix(rng.integers(0, 3, 50), rng.integers(0, 3, 50), 3))
            ok = iou[~np.isnan(iou)]
            assert np.all((ok >= 0) & (ok <= 1))

    def test_scene_order_invariant(self, scenes):
        model = segnet.init_model(TINY, 5, np.random.default_rng(2))
        model.step = 1
        a = evaluate(model, scenes, SPEC)
        b = evaluate(model, scenes[::-1], SPEC)
        assert a.to_json() == b.to_json()

    def test_groups_step_zero(self, scenes):
        model = segnet.init_model(TINY, 4, np.random.default_rng(3))
        rep = evaluate(model, scenes, SPEC)
        assert rep.step == 0 and np.isnan(rep.old)
        assert rep.class_ids == [0, 1, 2, 3]

    def test_channel_mismatch(self, scenes):
        with pytest.raises(ValueError):
            evaluate(segnet.init_model(TINY, 4, np.random.default_rng(0)), scenes, SPEC, step=1)

    def test_json_null_for_nan(self, scenes):
        doc = json.loads(evaluate(segnet.init_model(TINY, 4, np.random.default_rng(0)), scenes, SPEC).to_json())
        assert doc["groups"]["old"] is None


class TestTraining:
    def test_initial_deterministic(self, scenes):
        data = step_data(scenes, SPEC)[0]
        a, ha = train_initial(_plan(), data)
        b, hb = train_initial(_plan(), data)
        assert a.equals(b) and ha == hb

    def test_initial_reduces_loss(self, scenes):
        data = step_data(scenes, SPEC)[0]
        _, hist = train_initial(_plan(initial=TrainConfig(epochs=3, crop=16, lr=1e-2)), data)
        assert hist[-1]["seg"] < hist[0]["seg"]

    def test_empty_step_rejected(self):
        with pytest.raises(ValueError):
            train_initial(_plan(), [])

    def test_zero_epochs_equals_expanded(self, scenes):
        data = step_data(scenes, SPEC)
        teacher, _ = train_initial(_plan(), data[0])
        plan = _plan(incremental=DistillConfig(epochs=0))
        student, info = run_step(plan, teacher, data[1], 1)
        rng = np.random.default_rng(np.random.SeedSequence([0, 1]))
        assert student.equals(segnet.head_expand(teacher, 1, rng))
        assert info["history"] == []

    @pytest.mark.parametrize("method", ["FT", "HRHF", "NoiseReplay", "HRHF_noKD", "HRHF_noFake"])
    def test_every_method_runs(self, scenes, method):
        data = step_data(scenes, SPEC)
        teacher, _ = train_initial(_plan(), data[0])
        before = teacher.copy()
        student, info = run_step(_plan(method), teacher, data[1], 1)
        assert student.num_classes == 5 and student.step == 1
        assert teacher.equals(before)
        assert len(info["history"]) == 1
        assert info["fake"] == (4 if method in ("HRHF", "NoiseReplay", "HRHF_noKD") else 0)

    def test_joint(self, scenes):
        model, hist = train_joint(_plan("Joint"), scenes)
        assert model.num_classes == 5 and model.step == 1 and len(hist) == 1

    def test_run_plan_reports(self, scenes):
        _, reports = run_plan(_plan("FT"), scenes, scenes[:6])
        assert [r.step for r in reports] == [0, 1]
        assert all(r.method == "FT" and r.config_hash == config_hash(_plan("FT")) for r in reports)


class TestPlan:
    def test_unknown_method(self):
        with pytest.raises(ValueError):
            _plan("LwF")

    def test_inversion_required(self):
        with pytest.raises(ValueError):
            _plan("HRHF", inversion=None)

    def test_no_kd_zeroes_lambda(self):
        assert _plan("HRHF_noKD").distill_config().lam == 0.0
        assert _plan("HRHF").distill_config().lam == 1.0

    def test_hash_deterministic(self):
        assert config_hash(_plan()) == config_hash(_plan())
        assert config_hash(_plan()) != config_hash(_plan(seed=1))

    def test_train_config(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)


def test_default_step0_quality(toy_teacher):
    """Default settings on 200 scenes segment the three base classes well."""
    model, test = toy_teacher
    rep = evaluate(model, test, SPEC)
    assert rep.new >= 0.80
