import csv
import math

import numpy as np
import pytest

from pipestyle.classifier import LabelDistribution
from pipestyle.errors import ConstantInput, EmptySet, InsufficientTestData, ShapeMismatch
from pipestyle.evaluation import (
    MetricReport,
    TransferCase,
    TransferHandle,
    evaluate_transfers,
    inception_score,
    layerwise_feature_correlation,
    mse,
    pearson,
    standard_error,
    transfer_accuracy,
)
from pipestyle.volume import DomainLabel, Mask, StatMap

DOMS = [DomainLabel(i, n) for i, n in enumerate(["alpha-0", "alpha-1", "beta-1", "beta-0"])]


def flat_map(values, domain=DOMS[0], group="g0"):
    arr = np.asarray(values, dtype=np.float64).reshape(-1, 1, 1)
    return StatMap(voxels=arr, domain=domain, group_id=group, task_id="t")


def pearson_oracle(x, y):
    """Direct textbook formula, independent of the implementation route."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    num = n * np.sum(x * y) - np.sum(x) * np.sum(y)
    den = math.sqrt((n * np.sum(x * x) - np.sum(x) ** 2) * (n * np.sum(y * y) - np.sum(y) ** 2))
    return num / den


class TestPearson:
    def test_self_correlation(self):
        a = flat_map(np.random.default_rng(0).normal(size=50))
        assert pearson(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_anticorrelation(self):
        assert pearson(flat_map([1, 2, 3]), flat_map([3, 2, 1])) == pytest.approx(-1.0, abs=1e-12)

    def test_against_oracle(self):
        a = flat_map([1, 2, 3, 4])
        b = flat_map([1, 2, 4, 3])
        assert pearson(a, b) == pytest.approx(pearson_oracle([1, 2, 3, 4], [1, 2, 4, 3]), abs=1e-12)

    def test_oracle_on_random_inputs(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            x = rng.normal(size=64)
            y = rng.normal(size=64)
            assert pearson(flat_map(x), flat_map(y)) == pytest.approx(pearson_oracle(x, y), abs=1e-10)

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        a, b = flat_map(rng.normal(size=40)), flat_map(rng.normal(size=40))
        shifted = flat_map(2.0 * b.voxels.ravel() + 3.0)
        assert abs(pearson(a, shifted) - pearson(a, b)) <= 1e-10

    def test_constant_rejected(self):
        with pytest.raises(ConstantInput):
            pearson(flat_map([1, 1, 1]), flat_map([1, 2, 3]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            pearson(flat_map([1, 2]), flat_map([1, 2, 3]))

    def test_masked(self):
        a = flat_map([1, 2, 3, 99])
        b = flat_map([1, 2, 3, -50])
        mask = Mask(np.array([True, True, True, False]).reshape(-1, 1, 1))
        assert pearson(a, b, mask) == pytest.approx(1.0, abs=1e-12)


class TestMse:
    def test_zero_on_self(self):
        a = flat_map([1.5, -2.0, 0.25])
        assert mse(a, a) == 0.0

    def test_constant_offset(self):
        a = flat_map(np.zeros(10))
        b = flat_map(np.full(10, 0.1))
        assert mse(a, b) == pytest.approx(0.01, abs=1e-9)

    def test_oracle_on_random_inputs(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            x = rng.normal(size=32)
            y = rng.normal(size=32)
            assert mse(flat_map(x), flat_map(y)) == pytest.approx(float(np.mean((x - y) ** 2)), abs=1e-12)


class TestStandardError:
    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            vals = rng.normal(size=rng.integers(2, 30))
            expected = np.std(vals, ddof=1) / math.sqrt(len(vals))
            assert standard_error(vals) == pytest.approx(expected, abs=1e-12)

    def test_single_value(self):
        assert standard_error([4.2]) == 0.0


class StubClassifier:
    """predict_domain returns canned distributions keyed by group_id."""

    def __init__(self, dists):
        self.dists = dists
        self.calls = 0

    def predict_domain(self, smap):
        self.calls += 1
        probs = np.asarray(self.dists[smap.group_id], dtype=np.float64)
        return DOMS[int(np.argmax(probs))], LabelDistribution(probs)


class TestInceptionScore:
    def test_identical_distributions_give_one(self):
        maps = [flat_map([1, 2, 3], group=f"g{i}") for i in range(5)]
        clf = StubClassifier({f"g{i}": [0.4, 0.3, 0.2, 0.1] for i in range(5)})
        assert inception_score(maps, clf) == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_diverse_gives_k(self):
        k = 4
        maps = [flat_map([1], group=f"g{i}") for i in range(k)]
        dists = {f"g{i}": np.eye(k)[i] for i in range(k)}
        assert inception_score(maps, StubClassifier(dists)) == pytest.approx(k, abs=1e-9)

    def test_against_kl_oracle(self):
        rng = np.random.default_rng(5)
        raw = rng.uniform(0.05, 1.0, size=(9, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        maps = [flat_map([1], group=f"g{i}") for i in range(9)]
        clf = StubClassifier({f"g{i}": probs[i] for i in range(9)})
        marginal = probs.mean(axis=0)
        kls = [float(np.sum(p * (np.log(p) - np.log(marginal)))) for p in probs]
        assert inception_score(maps, clf) == pytest.approx(math.exp(float(np.mean(kls))), abs=1e-10)

    def test_bounds_on_random_stubs(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n, k = int(rng.integers(2, 12)), 4
            raw = rng.uniform(0.01, 1.0, size=(n, k))
            probs = raw / raw.sum(axis=1, keepdims=True)
            maps = [flat_map([1], group=f"g{i}") for i in range(n)]
            score = inception_score(maps, StubClassifier({f"g{i}": probs[i] for i in range(n)}))
            assert 1.0 - 1e-9 <= score <= k + 1e-9

    def test_empty_rejected(self):
        with pytest.raises(EmptySet):
            inception_score([], StubClassifier({}))


def make_case(group, source_dom, target_dom, gen_probs_key=None):
    src = flat_map([1, 2, 3], domain=source_dom, group=group)
    truth = flat_map([1, 2, 4], domain=target_dom, group=group)
    gen = flat_map([1, 2, 3.5], domain=target_dom, group=gen_probs_key or group)
    return TransferCase(source_domain=source_dom, target_domain=target_dom, generated=gen, truth=truth, source=src)


class TestTransferAccuracy:
    def test_always_target(self):
        cases = [make_case(f"g{i}", DOMS[0], DOMS[2]) for i in range(5)]
        clf = StubClassifier({f"g{i}": np.eye(4)[2] for i in range(5)})
        assert transfer_accuracy(cases, clf) == 1.0

    def test_always_source(self):
        cases = [make_case(f"g{i}", DOMS[0], DOMS[2]) for i in range(5)]
        clf = StubClassifier({f"g{i}": np.eye(4)[0] for i in range(5)})
        assert transfer_accuracy(cases, clf) == 0.0

    def test_partial(self):
        cases = [make_case(f"g{i}", DOMS[0], DOMS[2]) for i in range(10)]
        dists = {f"g{i}": np.eye(4)[2 if i < 7 else 1] for i in range(10)}
        assert transfer_accuracy(cases, StubClassifier(dists)) == pytest.approx(0.7)

    def test_empty_rejected(self):
        with pytest.raises(EmptySet):
            transfer_accuracy([], StubClassifier({}))


class FakeManifest:
    """In-memory manifest over synthetic random maps for evaluation tests."""

    def __init__(self, n_groups=25, shape=(6, 6, 6), seed=0):
        rng = np.random.default_rng(seed)
        self.domains = DOMS
        self.group_ids = [f"g{i:03d}" for i in range(n_groups)]
        self._maps = {}
        for g in self.group_ids:
            base = rng.normal(size=shape)
            for d in DOMS:
                vox = np.clip(base + 0.3 * rng.normal(size=shape), -1, 1).astype(np.float32)
                self._maps[(g, d.name)] = StatMap(
                    voxels=vox, domain=d, group_id=g, task_id="t", normalized=True
                )
        self.shape = shape

    def load_map(self, group_id, domain_name):
        return self._maps[(group_id, domain_name)]

    def load_mask(self):
        return Mask.full(self.shape)

    def domain_by_name(self, name):
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)


DIRECTIONS = [("alpha-1", "beta-0"), ("beta-0", "alpha-1")]


class TestEvaluateTransfers:
    def test_identity_model_reproduces_initial(self):
        manifest = FakeManifest()
        report = evaluate_transfers(lambda s, t: s, manifest, DIRECTIONS, n_images=10)
        for d in report.directions:
            assert d.mean_r == pytest.approx(d.initial_r, abs=1e-9)
            assert d.mean_mse == pytest.approx(d.initial_mse, abs=1e-9)

    def test_oracle_model_is_perfect(self):
        manifest = FakeManifest()

        def oracle(source, target):
            return manifest.load_map(source.group_id, target.name)

        report = evaluate_transfers(oracle, manifest, DIRECTIONS, n_images=10)
        for d in report.directions:
            assert d.mean_r == pytest.approx(100.0, abs=1e-6)
            assert d.mean_mse == pytest.approx(0.0, abs=1e-12)
            assert d.se_r == pytest.approx(0.0, abs=1e-6)

    def test_insufficient_groups(self):
        manifest = FakeManifest(n_groups=5)
        with pytest.raises(InsufficientTestData):
            evaluate_transfers(lambda s, t: s, manifest, DIRECTIONS, n_images=10)

    def test_seeded_group_choice_is_stable(self):
        manifest = FakeManifest()
        r1 = evaluate_transfers(lambda s, t: s, manifest, DIRECTIONS, n_images=10, seed=3)
        r2 = evaluate_transfers(lambda s, t: s, manifest, DIRECTIONS, n_images=10, seed=3)
        assert [vars(a) for a in r1.directions] == [vars(b) for b in r2.directions]

    def test_csv_format(self, tmp_path):
        manifest = FakeManifest()
        report = evaluate_transfers(lambda s, t: s, manifest, DIRECTIONS, n_images=10)
        path = str(tmp_path / "metrics.csv")
        report.to_csv(path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["source", "target", "n", "mean_r", "se_r", "mean_mse", "se_mse", "initial_r", "initial_mse"]
        assert len(rows) == 1 + len(DIRECTIONS)
        assert rows[1][0] == "alpha-1" and rows[1][1] == "beta-0"

    def test_report_with_classifier_includes_is_and_accuracy(self):
        manifest = FakeManifest()

        class AlwaysTarget:
            def predict_domain(self, smap):
                return smap.domain, LabelDistribution(np.eye(4)[smap.domain.index])

        report = evaluate_transfers(
            lambda s, t: manifest.load_map(s.group_id, t.name),
            manifest,
            DIRECTIONS,
            n_images=10,
            classifier=AlwaysTarget(),
        )
        assert report.target_class_accuracy == 1.0
        assert report.inception_score is not None and report.inception_score >= 1.0


class TestLayerwise:
    def test_identical_pipelines_full_correlation(self):
        manifest = FakeManifest(n_groups=4)

        class FeatClassifier:
            def stage_features(self, smap):
                rng = np.random.default_rng(abs(hash((smap.group_id, smap.domain.name))) % 2**32)
                return [rng.normal(size=(3, 4, 4, 4)) for _ in range(5)]

        rows = layerwise_feature_correlation(
            FeatClassifier(), manifest, [("alpha-0", "alpha-0")], manifest.group_ids[:3]
        )
        assert len(rows) == 1
        assert len(rows[0]["layer_r"]) == 4
        for r in rows[0]["layer_r"]:
            assert r == pytest.approx(100.0, abs=1e-9)

    def test_table_shape(self):
        manifest = FakeManifest(n_groups=3)

        class FeatClassifier:
            def stage_features(self, smap):
                rng = np.random.default_rng(abs(hash((smap.group_id, smap.domain.name))) % 2**32)
                return [rng.normal(size=(2, 3, 3, 3)) for _ in range(5)]

        pairs = [("alpha-0", "alpha-1"), ("alpha-0", "beta-1"), ("beta-1", "beta-0")]
        rows = layerwise_feature_correlation(FeatClassifier(), manifest, pairs, manifest.group_ids)
        assert len(rows) == 3
        assert all(len(r["layer_r"]) == 4 for r in rows)
