"""Optimizer, augmentation, and the training/eval loop."""

import csv
import json

import numpy as np
import pytest

from patchmoe import backbone, expert_init, training
from patchmoe import tensor as T
from patchmoe.data import Dataset, LabeledImage
from patchmoe.tensor import Rng

from util_model import toy_config
from test_expert_init import make_router


def named(**arrays):
    return {k: T.parameter(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()}


def optim(**overrides):
    base = dict(epochs=1, batch_size=4)
    base.update(overrides)
    return training.OptimConfig(**base)


class TestAdamW:
    def test_zero_grad_zero_wd_unchanged(self):
        params = named(**{"layer0.mlp.w1": np.ones((3, 3))})
        opt = training.AdamW(params, optim())
        params["layer0.mlp.w1"].grad = np.zeros((3, 3))
        opt.step()
        assert np.array_equal(params["layer0.mlp.w1"].data, np.ones((3, 3)))

    def test_missing_grad_skipped(self):
        params = named(**{"layer0.mlp.w1": np.ones(2)})
        opt = training.AdamW(params, optim())
        opt.step()
        assert np.array_equal(params["layer0.mlp.w1"].data, np.ones(2))

    def test_first_step_approx_lr_times_sign(self):
        # bias-corrected first step: m_hat = g, v_hat = g^2, so the update is
        # lr * g / (|g| + eps), within eps of lr * sign(g)
        params = named(**{"layer0.mlp.w1": np.array([1.0, -2.0])})
        cfg = optim(lr_rest=0.01, eps=1e-8)
        opt = training.AdamW(params, cfg)
        params["layer0.mlp.w1"].grad = np.array([5.0, -3.0])
        opt.step()
        expected = np.array([1.0, -2.0]) - 0.01 * np.array([1.0, -1.0])
        assert np.allclose(params["layer0.mlp.w1"].data, expected, atol=1e-7)

    def test_decoupled_decay_only(self):
        # classifier group carries weight decay; zero gradient isolates it
        params = named(**{"head.w": np.array([2.0, -4.0])})
        cfg = optim(lr_classifier=0.1, wd_classifier=0.5)
        opt = training.AdamW(params, cfg)
        params["head.w"].grad = np.zeros(2)
        opt.step()
        expected = np.array([2.0, -4.0]) * (1 - 0.1 * 0.5)
        assert np.allclose(params["head.w"].data, expected)

    def test_gamma_clamped_to_unit_interval(self):
        params = named(**{"layer1.moe.expert0.gamma": np.asarray(0.99)})
        cfg = optim(lr_moe=1.0)
        opt = training.AdamW(params, cfg)
        params["layer1.moe.expert0.gamma"].grad = np.asarray(-5.0)
        opt.step()
        assert float(params["layer1.moe.expert0.gamma"].data) == 1.0
        params["layer1.moe.expert0.gamma"].grad = np.asarray(50.0)
        for _ in range(5):
            opt.step()
        assert float(params["layer1.moe.expert0.gamma"].data) >= 0.0

    def test_shape_mismatch_rejected(self):
        params = named(**{"layer0.mlp.w1": np.ones(3)})
        opt = training.AdamW(params, optim())
        params["layer0.mlp.w1"].grad = np.ones(4)
        with pytest.raises(ValueError):
            opt.step()

    def test_group_assignment(self):
        assert training.parameter_group("layer1.moe.expert0.w1") == "moe"
        assert training.parameter_group("layer1.moe.router.centroids") == "moe"
        assert training.parameter_group("head.w") == "classifier"
        assert training.parameter_group("head.b") == "classifier"
        assert training.parameter_group("embed.w") == "rest"
        assert training.parameter_group("layer0.mlp.w1") == "rest"

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            training.OptimConfig(lr_moe=-0.1)

    def test_zero_grad_clears(self):
        params = named(**{"embed.w": np.ones(2)})
        opt = training.AdamW(params, optim())
        params["embed.w"].grad = np.ones(2)
        opt.zero_grad()
        assert params["embed.w"].grad is None


class TestAugmentation:
    def test_hflip_p_zero_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (4, 4, 3), dtype=np.uint8)
        out = training.hflip(img, 0.0, Rng(0))
        assert np.array_equal(out, img)

    def test_hflip_forced_is_involution(self):
        img = np.random.default_rng(1).integers(0, 256, (4, 4, 3), dtype=np.uint8)
        once = training.hflip(img, 1.0, Rng(0))
        twice = training.hflip(once, 1.0, Rng(0))
        assert not np.array_equal(once, img)
        assert np.array_equal(twice, img)

    def test_hflip_hand_case(self):
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        img[:, 1, :] = 255  # left black, right white
        out = training.hflip(img, 1.0, Rng(0))
        assert np.all(out[:, 0, :] == 255)
        assert np.all(out[:, 1, :] == 0)

    def test_mixup_alpha_zero_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 2, 2, 3))
        y = training.one_hot(np.array([0, 1, 0, 1]), 2)
        mx, my, lam = training.mixup(x, y, 0.0, Rng(0))
        assert lam == 1.0
        assert np.array_equal(mx, x)
        assert np.array_equal(my, y)

    def test_mixup_identical_samples_unchanged(self):
        x = np.ones((3, 2, 2, 3)) * 7.0
        y = training.one_hot(np.array([1, 1, 1]), 2)
        mx, my, _ = training.mixup(x, y, 0.2, Rng(3))
        assert np.allclose(mx, x)
        assert np.allclose(my, y)

    @pytest.mark.parametrize("seed", range(8))
    def test_mixup_labels_stay_on_simplex(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(8, 2, 2, 3))
        y = training.one_hot(rng.integers(0, 5, 8), 5)
        _, my, lam = training.mixup(x, y, 0.2, Rng(seed))
        assert 0.0 <= lam <= 1.0
        assert np.allclose(my.sum(axis=1), 1.0)
        assert np.all(my >= 0)

    def test_one_hot(self):
        out = training.one_hot(np.array([2, 0]), 3)
        assert np.array_equal(out, [[0, 0, 1], [1, 0, 0]])


def make_two_class_dataset(n_per_class=16, image_size=8, noise=8, seed=0):
    """Class 0 dark, class 1 bright: linearly separable from mean intensity."""
    rng = np.random.default_rng(seed)
    images = []
    for c, base in ((0, 40), (1, 215)):
        for i in range(n_per_class):
            px = np.clip(base + rng.integers(-noise, noise + 1,
                                             (image_size, image_size, 3)),
                         0, 255).astype(np.uint8)
            split = "train" if i < int(0.75 * n_per_class) else "val"
            images.append(LabeledImage(px, c, split))
    return Dataset(images, ["dark", "bright"], seed=seed)


class TestEvaluate:
    def test_constant_logits_majority_class(self):
        cfg = toy_config(num_classes=2)
        model = backbone.Model(cfg, Rng(0))
        model.head_w.data[:] = 0.0
        model.head_b.data[:] = 0.0
        ds = make_two_class_dataset()
        images = ds.split("val")
        # ties in the logits resolve to class 0
        result = training.evaluate(model, images)
        freq0 = np.mean([im.class_id == 0 for im in images])
        assert result.top1 == pytest.approx(freq0)
        assert result.per_class[0] == 1.0
        assert result.per_class[1] == 0.0

    def test_routing_probs_collected(self):
        cfg = toy_config(num_classes=2, moe_layers=(1,), experts=3)
        model = backbone.Model(cfg, Rng(0))
        expert_init.moefy_layer(model, 1, make_router(cfg.d_model, 3))
        ds = make_two_class_dataset()
        images = ds.split("val")
        result = training.evaluate(model, images, batch_size=3)
        probs = result.routing_probs[1]
        assert probs.shape == (len(images), cfg.num_patches, 3)
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        assert result.expert_counts[1].sum() == len(images) * cfg.num_patches

    def test_empty_split_rejected(self):
        model = backbone.Model(toy_config(), Rng(0))
        with pytest.raises(ValueError):
            training.evaluate(model, [])


class TestTrain:
    def augment_off(self):
        return training.AugmentConfig(hflip_p=0.0, mixup_alpha=0.0)

    def test_zero_lr_bit_exact(self):
        cfg = toy_config(num_classes=2)
        model = backbone.Model(cfg, Rng(0))
        before = {k: v.data.copy() for k, v in model.named_parameters().items()}
        ds = make_two_class_dataset()
        training.train(model, ds,
                       optim(lr_moe=0.0, lr_classifier=0.0, lr_rest=0.0, epochs=2),
                       training.AugmentConfig(), seed=0)
        for k, v in model.named_parameters().items():
            assert np.array_equal(v.data, before[k]), k

    def test_same_seed_identical_metrics(self):
        ds = make_two_class_dataset()
        rows = []
        for _ in range(2):
            model = backbone.Model(toy_config(num_classes=2), Rng(7))
            result = training.train(model, ds, optim(epochs=2),
                                    training.AugmentConfig(), seed=5)
            rows.append(result.rows)
        assert rows[0] == rows[1]

    def test_separable_toy_reaches_high_accuracy(self):
        ds = make_two_class_dataset()
        model = backbone.Model(toy_config(num_classes=2), Rng(1))
        result = training.train(
            model, ds, optim(epochs=30, batch_size=8, lr_rest=3e-3,
                             lr_classifier=3e-3),
            self.augment_off(), seed=0)
        train_rows = [r for r in result.rows if r["split"] == "train"]
        assert train_rows[-1]["top1"] >= 0.99
        assert train_rows[-1]["loss"] < train_rows[0]["loss"]

    def test_divergence_raises(self):
        ds = make_two_class_dataset()
        model = backbone.Model(toy_config(num_classes=2), Rng(0))
        model.head_w.data[0, 0] = np.nan
        with pytest.raises(training.DivergenceError):
            training.train(model, ds, optim(), training.AugmentConfig(), seed=0)

    def test_metrics_csv_and_manifest(self, tmp_path):
        cfg = toy_config(num_classes=2, moe_layers=(1,), experts=2)
        model = backbone.Model(cfg, Rng(0))
        expert_init.moefy_layer(model, 1, make_router(cfg.d_model, 2))
        ds = make_two_class_dataset()
        metrics = tmp_path / "metrics.csv"
        manifest = tmp_path / "run.json"
        result = training.train(model, ds, optim(epochs=2), training.AugmentConfig(),
                                seed=0, metrics_path=metrics, manifest_path=manifest)
        with open(metrics) as f:
            read = list(csv.reader(f))
        assert read[0] == ["epoch", "split", "loss", "top1",
                           "expert_entropy_layer_1"]
        assert len(read) == 1 + len(result.rows)
        run = json.loads(manifest.read_text())
        assert run["seed"] == 0
        assert run["optim"]["lr_moe"] == 0.005
        assert run["moe_layers"] == [1]
        assert run["stage"] == "moe"

    def test_val_rows_interleaved(self):
        ds = make_two_class_dataset()
        model = backbone.Model(toy_config(num_classes=2), Rng(0))
        result = training.train(model, ds, optim(epochs=3),
                                training.AugmentConfig(), seed=0)
        assert [r["split"] for r in result.rows] == ["train", "val"] * 3
        assert result.final_val is not None

    def test_split_is_partition(self):
        ds = make_two_class_dataset()
        train_set = {id(im) for im in ds.split("train")}
        val_set = {id(im) for im in ds.split("val")}
        assert train_set.isdisjoint(val_set)
        assert len(train_set) + len(val_set) == len(ds.images)
