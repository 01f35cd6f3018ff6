import os

import numpy as np
import pytest

from styletrojan.data import (DataBundle, DatasetSpec, LabeledImage, load_dataset,
                              make_poison_plan, save_image, select_poison_subset,
                              write_manifest)
from styletrojan.errors import CapacityError, ContractError
from styletrojan.synthdata import build_synthetic_bundle, generate_dataset


def tiny_bundle(per_class=50, n_classes=10, size=8, seed=0):
    rng = np.random.default_rng(seed)
    train = [
        LabeledImage(rng.random((3, size, size)).astype(np.float32), c, f"train/{c}/{i}")
        for c in range(n_classes) for i in range(per_class)
    ]
    test = [
        LabeledImage(rng.random((3, size, size)).astype(np.float32), c, f"test/{c}/{i}")
        for c in range(n_classes) for i in range(5)
    ]
    return DataBundle(train, test, [], n_classes, (3, size, size)).validate()


def write_png_tree(root, n_classes=2, per_class=3, size=8, value=None):
    rng = np.random.default_rng(1)
    for c in range(n_classes):
        for i in range(per_class):
            px = rng.random((3, size, size)).astype(np.float32)
            if value is not None:
                px[:] = value
            save_image(px, os.path.join(root, f"class{c}", f"img{i}.png"))
    return root


class TestLoadDataset:
    def test_count_preservation(self, tmp_path):
        write_png_tree(str(tmp_path), n_classes=2, per_class=3)
        bundle = load_dataset(str(tmp_path), DatasetSpec(image_size=8, split_fraction=0.5))
        assert bundle.n_classes == 2
        assert len(bundle.train) + len(bundle.test) == 6

    def test_8bit_scaling(self, tmp_path):
        write_png_tree(str(tmp_path), n_classes=2, per_class=1, value=1.0)
        bundle = load_dataset(str(tmp_path), DatasetSpec(image_size=8, split_fraction=0.5))
        images = bundle.train + bundle.test
        assert max(im.pixels.max() for im in images) == pytest.approx(1.0)

    def test_split_determinism(self, tmp_path):
        write_png_tree(str(tmp_path), n_classes=10, per_class=5)
        spec = DatasetSpec(image_size=8, split_fraction=0.8, seed=7)
        b1 = load_dataset(str(tmp_path), spec)
        b2 = load_dataset(str(tmp_path), spec)
        assert {im.sample_id for im in b1.train} == {im.sample_id for im in b2.train}
        assert {im.sample_id for im in b1.test} == {im.sample_id for im in b2.test}

    def test_presplit_layout(self, tmp_path):
        write_png_tree(str(tmp_path / "train"), n_classes=2, per_class=4)
        write_png_tree(str(tmp_path / "test"), n_classes=2, per_class=2)
        bundle = load_dataset(str(tmp_path), DatasetSpec(image_size=8))
        assert len(bundle.train) == 8 and len(bundle.test) == 4

    def test_missing_path(self, tmp_path):
        with pytest.raises(IOError):
            load_dataset(str(tmp_path / "nope"), DatasetSpec())

    def test_undecodable_image_names_file(self, tmp_path):
        write_png_tree(str(tmp_path), n_classes=2, per_class=1)
        bad = tmp_path / "class0" / "broken.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(IOError, match="broken.png"):
            load_dataset(str(tmp_path), DatasetSpec(image_size=8))

    def test_normalization_idempotence(self, tmp_path):
        bundle = build_synthetic_bundle(per_class_train=2, per_class_test=1, n_style=1, seed=3)
        im = bundle.train[0]
        path = str(tmp_path / "roundtrip.png")
        save_image(im.pixels, path)
        spec = DatasetSpec(image_size=32, split_fraction=0.5)
        save_image(im.pixels, str(tmp_path / "tree" / "c0" / "a.png"))
        save_image(im.pixels, str(tmp_path / "tree" / "c1" / "b.png"))
        again = load_dataset(str(tmp_path / "tree"), spec)
        loaded = (again.train + again.test)
        target = next(im2 for im2 in loaded if im2.sample_id.endswith("a.png"))
        assert np.abs(target.pixels - im.pixels).max() <= 1.0 / 255.0 + 1e-6


class TestBundleInvariants:
    def test_disjoint_splits(self):
        im = LabeledImage(np.zeros((3, 4, 4), np.float32), 0, "shared")
        with pytest.raises(ContractError, match="share"):
            DataBundle([im], [im], [], 1, (3, 4, 4)).validate()

    def test_pixel_range_enforced(self):
        bad = LabeledImage(np.full((3, 4, 4), 1.5, np.float32), 0, "x")
        with pytest.raises(ContractError, match=r"\[0,1\]"):
            DataBundle([bad], [], [], 1, (3, 4, 4)).validate()

    def test_label_range_enforced(self):
        bad = LabeledImage(np.zeros((3, 4, 4), np.float32), 5, "x")
        with pytest.raises(ContractError, match="label"):
            DataBundle([bad], [], [], 2, (3, 4, 4)).validate()

    def test_shape_enforced(self):
        bad = LabeledImage(np.zeros((3, 5, 5), np.float32), 0, "x")
        with pytest.raises(ContractError, match="shape"):
            DataBundle([bad], [], [], 1, (3, 4, 4)).validate()


class TestPoisonSelection:
    def test_two_percent_of_balanced_set(self):
        # 10 classes x 500 -> 100 picks, 10 per class
        bundle = tiny_bundle(per_class=500, size=4)
        plan = make_poison_plan(bundle, target_label=0, poison_fraction=0.02, seed=0)
        subset = select_poison_subset(bundle, plan)
        assert len(subset) == 100
        for c in range(10):
            assert sum(1 for im in subset if im.label == c) == 10

    def test_saturation(self):
        bundle = tiny_bundle(per_class=5)
        plan = make_poison_plan(bundle, 0, 1.0, seed=0)
        subset = select_poison_subset(bundle, plan)
        assert {im.sample_id for im in subset} == {im.sample_id for im in bundle.train}

    def test_seed_reproducibility_and_divergence(self):
        bundle = tiny_bundle(per_class=50)
        plan_a = make_poison_plan(bundle, 0, 0.1, seed=5)
        ids_1 = [im.sample_id for im in select_poison_subset(bundle, plan_a)]
        ids_2 = [im.sample_id for im in select_poison_subset(bundle, plan_a)]
        assert ids_1 == ids_2
        differing = 0
        for seed in range(6, 16):
            plan_b = make_poison_plan(bundle, 0, 0.1, seed=seed)
            other = [im.sample_id for im in select_poison_subset(bundle, plan_b)]
            differing += other != ids_1
        assert differing == 10

    def test_stratification_matches_plan(self):
        bundle = tiny_bundle(per_class=30)
        plan = make_poison_plan(bundle, 0, 0.07, seed=2)
        subset = select_poison_subset(bundle, plan)
        for c, want in plan.per_class_counts.items():
            assert sum(1 for im in subset if im.label == c) == want
        assert sum(plan.per_class_counts.values()) == int(np.ceil(0.07 * len(bundle.train)))

    def test_capacity_error_names_class(self):
        bundle = tiny_bundle(per_class=4, n_classes=3)
        plan = make_poison_plan(bundle, 0, 0.5, seed=0)
        plan.per_class_counts[1] = 99
        plan.per_class_counts[0] = 0
        with pytest.raises(CapacityError, match="class 1"):
            select_poison_subset(bundle, plan)

    def test_original_labels_kept(self):
        bundle = tiny_bundle(per_class=10)
        plan = make_poison_plan(bundle, target_label=3, poison_fraction=0.1, seed=1)
        subset = select_poison_subset(bundle, plan)
        by_id = {im.sample_id: im.label for im in bundle.train}
        assert all(im.label == by_id[im.sample_id] for im in subset)


class TestManifest:
    def test_manifest_contents(self, tmp_path):
        bundle = tiny_bundle(per_class=3, n_classes=2)
        path = write_manifest(bundle, str(tmp_path / "manifest.json"), seed=9)
        import json
        with open(path) as f:
            manifest = json.load(f)
        assert manifest["n_classes"] == 2
        assert manifest["seed"] == 9
        assert len(manifest["samples"]) == len(bundle.train) + len(bundle.test)
        assert "domain_a_sampling" in manifest["notes"]


class TestSyntheticDataset:
    def test_generate_tree_roundtrip(self, tmp_path):
        root = str(tmp_path / "toy")
        generate_dataset(root, per_class_train=3, per_class_test=2, n_style=4,
                         image_size=16, seed=0, n_classes=4)
        bundle = load_dataset(root, DatasetSpec(image_size=16))
        assert bundle.n_classes == 4
        assert len(bundle.train) == 12 and len(bundle.test) == 8
        assert len(bundle.style_set) == 4

    def test_classes_are_separable_by_pattern(self):
        bundle = build_synthetic_bundle(per_class_train=4, per_class_test=2, n_style=2, seed=1)
        assert len({im.label for im in bundle.train}) == 10
