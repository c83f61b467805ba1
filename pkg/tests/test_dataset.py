import numpy as np
import pytest

from hrhf.dataset import (BACKGROUND, CLASS_STYLES, IGNORE, Scene, StepSpec, draw_shape, full_label,
                          gen_scene, make_scenes, relabel_for_step, split_incremental)


def _scene(classes, size=8):
    label = np.zeros((size, size), dtype=np.uint8)
    for k, c in enumerate(classes):
        label[k, :2] = c
    return Scene(np.zeros((size, size, 3)), label, [(c, None) for c in classes])


class TestGenScene:
    def test_empty_subset(self):
        sc = gen_scene(np.random.default_rng(0), [])
        assert np.all(sc.label == BACKGROUND) and sc.instances == []

    def test_circle_area(self):
        img = np.zeros((64, 64, 3))
        label = np.zeros((64, 64), dtype=np.uint8)
        mask = draw_shape(img, label, 1, 32.0, 32.0, 8.0, np.random.default_rng(0))
        assert abs(mask.sum() - np.pi * 64) <= 8

    def test_deterministic(self):
        a = gen_scene(np.random.default_rng(5), [1, 2, 3])
        b = gen_scene(np.random.default_rng(5), [1, 2, 3])
        assert a.image.tobytes() == b.image.tobytes() and a.label.tobytes() == b.label.tobytes()

    def test_ranges_and_instances(self):
        for seed in range(10):
            sc = gen_scene(np.random.default_rng(seed), [1, 4, 6])
            assert sc.image.shape == (64, 64, 3) and sc.label.shape == (64, 64)
            assert sc.image.min() >= 0 and sc.image.max() <= 1
            listed = {c for c, _ in sc.instances}
            assert set(sc.classes()) <= listed

    def test_every_class_renders(self):
        for c in CLASS_STYLES:
            sc = gen_scene(np.random.default_rng(c), [c])
            assert (sc.label == c).sum() > 20

    def test_limits(self):
        with pytest.raises(ValueError):
            gen_scene(np.random.default_rng(0), [1, 2, 3, 4, 5])
        with pytest.raises(ValueError):
            gen_scene(np.random.default_rng(0), [1], canvas_size=16)
        with pytest.raises(ValueError):
            gen_scene(np.random.default_rng(0), [9])

    def test_make_scenes_deterministic(self):
        a = make_scenes(3, 5, (1, 2, 3))
        b = make_scenes(3, 5, (1, 2, 3))
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()


class TestStepSpec:
    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            StepSpec(((1, 2), (2, 3)))

    def test_background_rejected(self):
        with pytest.raises(ValueError):
            StepSpec(((0, 1),))

    def test_order(self):
        spec = StepSpec.preset("3-1-1-1")
        assert spec.class_order(0) == (0, 1, 2, 3)
        assert spec.class_order(2) == (0, 1, 2, 3, 4, 5)
        assert spec.num_classes(1) == 5 and spec.old_count(1) == 4 and spec.old_count(0) == 0


class TestSplit:
    spec = StepSpec(((1,), (2,)))

    def test_old_only_scene(self):
        for mode in ("disjoint", "overlapped"):
            assert split_incremental([_scene([1])], StepSpec(self.spec.steps, mode)) == [[0], []]

    def test_mixed_scene(self):
        assert split_incremental([_scene([1, 2])], self.spec) == [[], [0]]
        assert split_incremental([_scene([1, 2])], StepSpec(self.spec.steps, "overlapped")) == [[0], [0]]

    def test_outside_universe(self):
        with pytest.raises(ValueError):
            split_incremental([_scene([5])], self.spec)

    def test_disjoint_sets_disjoint(self):
        spec = StepSpec.preset("3-1-1-1")
        scenes = make_scenes(0, 60, spec.classes)
        parts = [set(p) for p in split_incremental(scenes, spec)]
        for i in range(len(parts)):
            for j in range(i + 1, len(parts)):
                assert not parts[i] & parts[j]

    def test_modes_agree_without_future_pixels(self):
        spec = StepSpec.preset("3-1")
        scenes = make_scenes(1, 40, (1, 2, 3))
        a = split_incremental(scenes, spec)
        b = split_incremental(scenes, StepSpec(spec.steps, "overlapped"))
        assert a[0] == b[0]


class TestRelabel:
    spec = StepSpec.preset("3-1")

    def test_all_in_step(self):
        label = np.array([[0, 1], [2, 3]])
        np.testing.assert_array_equal(relabel_for_step(label, self.spec, 0), label)

    def test_none_in_step(self):
        np.testing.assert_array_equal(relabel_for_step(np.array([[1, 2], [3, 0]]), self.spec, 1), 0)

    def test_new_class_channel(self):
        np.testing.assert_array_equal(relabel_for_step(np.array([[4, 1]]), self.spec, 1), [[4, 0]])

    def test_ignore_preserved(self):
        assert relabel_for_step(np.array([[IGNORE]]), self.spec, 1)[0, 0] == IGNORE

    def test_background_count_scan(self):
        rng = np.random.default_rng(2)
        label = rng.integers(0, 5, size=(6, 6))
        out = relabel_for_step(label, self.spec, 1)
        count = 0
        for v in label.ravel():
            if v not in self.spec.steps[1]:
                count += 1
        assert (out == BACKGROUND).sum() == count
        assert (out == BACKGROUND).sum() >= (label == BACKGROUND).sum()
        assert set(np.unique(out)) <= {0} | {self.spec.class_order(1).index(c) for c in np.unique(label)
                                            if c in self.spec.steps[1]}

    def test_full_label_maps_future_to_background(self):
        spec = StepSpec.preset("3-1-1-1")
        np.testing.assert_array_equal(full_label(np.array([[1, 4, 5, 6]]), spec, 1), [[1, 4, 0, 0]])
