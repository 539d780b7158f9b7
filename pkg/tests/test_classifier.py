import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pipestyle.classifier import (
    ClassifierTrainConfig,
    ConditionVector,
    LabelDistribution,
    init_classifier,
    latent_length,
    load_classifier,
    save_classifier,
    softmax_distribution,
    train_classifier,
)
from pipestyle.errors import NoWeights, ShapeMismatch, SingleDomainDataset
from pipestyle.volume import DomainLabel, StatMap

DOMS = [DomainLabel(i, n) for i, n in enumerate(["alpha-0", "alpha-1", "beta-1", "beta-0"])]


def random_map(shape, domain, seed=0, group="g0"):
    rng = np.random.default_rng(seed)
    return StatMap(
        voxels=rng.uniform(-1, 1, size=shape).astype(np.float32),
        domain=domain,
        group_id=group,
        task_id="t",
        normalized=True,
    )


def tiny_dataset(shape=(8, 8, 8), n_per_domain=6, separation=0.8):
    """Linearly separable toy maps: domain k gets a distinct mean offset."""
    maps = []
    rng = np.random.default_rng(0)
    for d in DOMS:
        for i in range(n_per_domain):
            vox = rng.normal(0, 0.2, size=shape) + separation * (d.index - 1.5) / 3.0
            maps.append(
                StatMap(
                    voxels=np.clip(vox, -1, 1).astype(np.float32),
                    domain=d,
                    group_id=f"g{d.index}_{i}",
                    task_id="t",
                    normalized=True,
                )
            )
    return maps


class TestLatentLength:
    def test_paper_shape_gives_4096(self):
        assert latent_length((48, 56, 48)) == 4096

    def test_desk_shape_gives_512(self):
        assert latent_length((24, 28, 24)) == 512

    @settings(max_examples=20, deadline=None)
    @given(st.tuples(*[st.integers(8, 64)] * 3))
    def test_formula_property(self, shape):
        expected = 512 * int(np.prod([math.ceil(d / 2**5) for d in shape]))
        assert latent_length(shape) == expected

    def test_forward_latent_matches_formula(self):
        handle = init_classifier((24, 28, 24), DOMS, seed=0)
        _, latent = handle.forward(random_map((24, 28, 24), DOMS[0]))
        assert latent.shape == (512,)
        assert handle.latent_dim == 512

    def test_forward_latent_4096_at_paper_shape(self):
        handle = init_classifier((48, 56, 48), DOMS, seed=0)
        _, latent = handle.forward(random_map((48, 56, 48), DOMS[0]))
        assert latent.shape == (4096,)


class TestInference:
    def test_deterministic(self):
        handle = init_classifier((12, 12, 12), DOMS, seed=1)
        smap = random_map((12, 12, 12), DOMS[1], seed=5)
        l1, z1 = handle.forward(smap)
        l2, z2 = handle.forward(smap)
        assert np.array_equal(l1, l2)
        assert np.array_equal(z1, z2)

    def test_shape_mismatch(self):
        handle = init_classifier((12, 12, 12), DOMS, seed=1)
        with pytest.raises(ShapeMismatch):
            handle.forward(random_map((8, 8, 8), DOMS[0]))

    def test_stage_features_shapes(self):
        handle = init_classifier((16, 16, 16), DOMS, seed=0)
        feats = handle.stage_features(random_map((16, 16, 16), DOMS[0]))
        assert len(feats) == 5
        assert feats[0].shape == (32, 8, 8, 8)
        assert feats[4].shape == (512, 1, 1, 1)


class TestSoftmax:
    def test_zeros_give_uniform(self):
        dist = softmax_distribution(np.zeros(4))
        assert np.allclose(dist.probs, 0.25)

    def test_confident_logit(self):
        dist = softmax_distribution(np.array([10.0, 0.0, 0.0, 0.0]))
        expected = math.exp(10.0) / (math.exp(10.0) + 3.0)  # 0.99986...
        assert dist.probs[0] == pytest.approx(expected, abs=1e-12)
        assert dist.probs[0] >= 0.9998

    def test_random_logits_sum_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            dist = softmax_distribution(rng.normal(0, 5, size=4))
            assert abs(dist.probs.sum() - 1.0) <= 1e-6

    def test_invalid_distribution_rejected(self):
        with pytest.raises(ValueError):
            LabelDistribution(np.array([0.5, 0.4]))


class TestConditionVector:
    def test_one_hot_validated(self):
        ConditionVector(payload=np.array([0.0, 1.0, 0.0]), kind="one_hot", source="test")
        with pytest.raises(ValueError):
            ConditionVector(payload=np.array([0.5, 0.5]), kind="one_hot", source="bad")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            ConditionVector(payload=np.zeros(3), kind="other", source="bad")


class TestTraining:
    def test_single_domain_rejected(self):
        maps = [random_map((8, 8, 8), DOMS[0], seed=i, group=f"g{i}") for i in range(4)]
        with pytest.raises(SingleDomainDataset):
            train_classifier(maps, DOMS, ClassifierTrainConfig(epochs=1))

    def test_zero_epochs_keeps_initialization(self):
        maps = tiny_dataset()
        trained = train_classifier(maps, DOMS, ClassifierTrainConfig(epochs=0, seed=3))
        reference = init_classifier(maps[0].shape, DOMS, seed=3)
        for p_trained, p_ref in zip(trained.net.parameters(), reference.net.parameters()):
            assert torch.equal(p_trained, p_ref)

    def test_untrained_accuracy_near_chance(self):
        maps = tiny_dataset(n_per_domain=10)
        accs = []
        for seed in range(5):
            handle = train_classifier(maps, DOMS, ClassifierTrainConfig(epochs=0, seed=seed))
            logits = handle.batch_logits(maps)
            accs.append(float((logits.argmax(axis=1) == [m.domain.index for m in maps]).mean()))
        assert 0.10 <= np.mean(accs) <= 0.40

    def test_training_reduces_cross_entropy(self):
        maps = tiny_dataset(n_per_domain=8)
        handle = train_classifier(maps, DOMS, ClassifierTrainConfig(epochs=5, lr=1e-3, batch_size=8, seed=0))
        losses = handle.metrics["epoch_loss"]
        assert losses[-1] < losses[0]

    def test_learns_separable_toy_data(self):
        maps = tiny_dataset(n_per_domain=8)
        handle = train_classifier(maps, DOMS, ClassifierTrainConfig(epochs=8, lr=1e-3, batch_size=8, seed=0))
        assert handle.metrics["train_accuracy"] >= 0.9


class TestLatentExtraction:
    def test_identical_maps_identical_latents(self):
        handle = init_classifier((10, 10, 10), DOMS, seed=0)
        smap = random_map((10, 10, 10), DOMS[2], seed=9)
        v1 = handle.extract_latent(smap)
        v2 = handle.extract_latent(smap)
        assert v1.kind == "latent"
        assert np.array_equal(v1.payload, v2.payload)

    def test_latent_length_matches_handle(self):
        handle = init_classifier((10, 10, 10), DOMS, seed=0)
        vec = handle.extract_latent(random_map((10, 10, 10), DOMS[0]))
        assert vec.payload.shape == (handle.latent_dim,)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        maps = tiny_dataset(n_per_domain=4)
        handle = train_classifier(maps, DOMS, ClassifierTrainConfig(epochs=1, batch_size=8, seed=0))
        path = str(tmp_path / "clf.pt")
        save_classifier(handle, path)
        loaded = load_classifier(path)
        assert loaded.K == 4
        assert loaded.input_shape == handle.input_shape
        smap = maps[3]
        l1, z1 = handle.forward(smap)
        l2, z2 = loaded.forward(smap)
        assert np.allclose(l1, l2, atol=0)
        assert np.allclose(z1, z2, atol=0)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(NoWeights):
            load_classifier(str(tmp_path / "nope.pt"))
