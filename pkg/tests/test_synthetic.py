import hashlib
import itertools
import os
from dataclasses import replace

import numpy as np
import pytest

from pipestyle.errors import InvalidK
from pipestyle.evaluation import pearson
from pipestyle.synthetic import (
    ContentField,
    StyleParams,
    SyntheticConfig,
    ellipsoid_mask,
    generate_dataset,
    group_content,
    load_manifest,
    make_pipeline_styles,
    render_group,
    sum_of_blobs,
)
from pipestyle.volume import DomainLabel

IDENTITY = StyleParams(0.0, 1.0, 0.0, 0.0, DomainLabel(0, "id-0"))


def small_content():
    return ContentField(
        blobs=(((8.0, 8.0, 8.0), 1.0, 2.5), ((4.0, 11.0, 6.0), -0.5, 1.5), ((11.0, 4.0, 10.0), 0.6, 2.0)),
        group_id="g0",
    )


class TestStyles:
    def test_k1_rejected(self):
        with pytest.raises(InvalidK):
            make_pipeline_styles(1, 0)

    def test_deterministic(self):
        assert make_pipeline_styles(4, 7) == make_pipeline_styles(4, 7)

    @pytest.mark.parametrize("k", [2, 4, 6])
    def test_pairwise_distinct(self, k):
        styles = make_pipeline_styles(k, 7)
        assert len(styles) == k
        for a, b in itertools.combinations(styles, 2):
            dist = (
                abs(a.smoothing_sigma - b.smoothing_sigma)
                + abs(a.gamma - b.gamma)
                + abs(a.bias_amplitude - b.bias_amplitude)
                + abs(a.noise_sigma - b.noise_sigma)
            )
            assert dist > 0

    def test_style0_near_identity(self):
        s0 = make_pipeline_styles(4, 11)[0]
        assert s0.smoothing_sigma == 0.0
        assert s0.gamma == 1.0
        assert s0.bias_amplitude == 0.0
        assert s0.noise_sigma <= 0.05

    def test_adjacent_styles_differ_on_one_axis(self):
        styles = make_pipeline_styles(6, 3)
        for a, b in zip(styles, styles[1:]):
            smoothing_moved = a.smoothing_sigma != b.smoothing_sigma
            software_moved = (a.gamma != b.gamma) or (a.bias_amplitude != b.bias_amplitude)
            assert smoothing_moved != software_moved  # exactly one axis

    def test_domain_names_follow_software_derivative_pattern(self):
        names = [s.domain.name for s in make_pipeline_styles(4, 11)]
        assert names == ["alpha-0", "alpha-1", "beta-1", "beta-0"]


class TestRenderGroup:
    def test_identity_style_zero_noise_equals_blob_sum(self):
        content = small_content()
        rendered = render_group(content, IDENTITY, (16, 16, 16), noise_seed=0)
        expected = sum_of_blobs(content, (16, 16, 16))
        assert np.max(np.abs(rendered.voxels - expected)) <= 1e-6

    def test_smoothing_lowers_peak(self):
        content = ContentField(blobs=(((8.0, 8.0, 8.0), 1.0, 2.0),), group_id="g")
        sharp = render_group(content, IDENTITY, (16, 16, 16), 0)
        smoothed = render_group(content, replace(IDENTITY, smoothing_sigma=2.0), (16, 16, 16), 0)
        assert smoothed.voxels.max() < sharp.voxels.max()

    def test_byte_identical_given_seed(self):
        content = small_content()
        style = StyleParams(1.0, 0.5, 0.3, 0.05, DomainLabel(1, "beta-0"))
        a = render_group(content, style, (16, 16, 16), noise_seed=99)
        b = render_group(content, style, (16, 16, 16), noise_seed=99)
        assert a.voxels.tobytes() == b.voxels.tobytes()

    def test_signed_power_keeps_sign(self):
        content = ContentField(blobs=(((4.0, 8.0, 8.0), -1.0, 2.0), ((12.0, 8.0, 8.0), 1.0, 2.0)), group_id="g")
        out = render_group(content, replace(IDENTITY, gamma=0.5), (16, 16, 16), 0)
        assert out.voxels[4, 8, 8] < 0 < out.voxels[12, 8, 8]


def _tree_digest(root):
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            digest.update(rel.encode())
            digest.update(open(os.path.join(dirpath, name), "rb").read())
    return digest.hexdigest()


class TestGenerateDataset:
    CFG = SyntheticConfig(n_groups=10, shape=(16, 16, 16), K=4, n_blobs=4, style_seed=11, content_seed=101)

    def test_counts(self, tmp_path):
        manifest = generate_dataset(self.CFG, str(tmp_path / "ds"))
        assert len(manifest.entries) == 40
        vols = [f for f in os.listdir(tmp_path / "ds" / "volumes") if f.endswith(".json")]
        assert len(vols) == 40

    def test_byte_identical_trees(self, tmp_path):
        generate_dataset(self.CFG, str(tmp_path / "a"))
        generate_dataset(self.CFG, str(tmp_path / "b"))
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_manifest_round_trip(self, tmp_path):
        manifest = generate_dataset(self.CFG, str(tmp_path / "ds"))
        loaded = load_manifest(str(tmp_path / "ds"))
        assert loaded.config == self.CFG
        assert loaded.entries == manifest.entries
        assert [d.name for d in loaded.domains] == [d.name for d in manifest.domains]
        smap = loaded.load_map("g0003", "beta-1")
        assert smap.shape == self.CFG.shape
        assert smap.normalized

    def test_correlation_ordering_at_16cubed(self, tmp_path):
        manifest = generate_dataset(self.CFG, str(tmp_path / "ds"))
        mask = manifest.load_mask()
        names = [d.name for d in manifest.domains]
        groups = manifest.group_ids
        maps = {(g, n): manifest.load_map(g, n) for g in groups for n in names}
        same_group = [
            pearson(maps[(g, a)], maps[(g, b)], mask)
            for g in groups
            for a, b in itertools.combinations(names, 2)
        ]
        diff_group = [
            pearson(maps[(g1, n)], maps[(g2, n)], mask)
            for g1, g2 in itertools.combinations(groups, 2)
            for n in names
        ]
        diff_group_cross_style = [
            pearson(maps[(g1, a)], maps[(g2, b)], mask)
            for g1, g2 in itertools.combinations(groups[:6], 2)
            for a, b in itertools.permutations(names, 2)
        ]
        assert 0.0 < np.mean(same_group) < 1.0
        assert np.mean(same_group) > np.mean(diff_group)
        assert np.mean(same_group) > np.mean(diff_group_cross_style)

    def test_normalized_in_mask_range(self, tmp_path):
        manifest = generate_dataset(self.CFG, str(tmp_path / "ds"))
        mask = manifest.load_mask()
        smap = manifest.load_map("g0000", "alpha-0")
        inside = smap.voxels[mask.voxels]
        assert inside.min() == pytest.approx(-1.0, abs=1e-6)
        assert inside.max() == pytest.approx(1.0, abs=1e-6)
        assert np.all(smap.voxels[~mask.voxels] == 0.0)


class TestContentStyleSeparation:
    def test_largest_blob_peak_survives_style_change(self):
        cfg = SyntheticConfig(n_groups=4, shape=(24, 28, 24), K=4, n_blobs=5)
        styles = [replace(s, noise_sigma=0.0) for s in make_pipeline_styles(cfg.K, cfg.style_seed)]
        sigma_max = max(s.smoothing_sigma for s in styles)
        win = int(np.ceil(2.0 * sigma_max)) + 1
        for g in range(cfg.n_groups):
            content = group_content(cfg, g)
            center, _, _ = max(content.blobs, key=lambda blob: blob[1])
            lo = [max(0, int(c) - win) for c in center]
            hi = [min(n, int(c) + win + 1) for c, n in zip(center, cfg.shape)]
            peaks = []
            for style in styles:
                vox = render_group(content, style, cfg.shape, 0).voxels
                window = vox[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
                peaks.append(np.unravel_index(np.argmax(window), window.shape))
            for style, peak in zip(styles, peaks):
                budget = max(2.0 * style.smoothing_sigma, 2.0 * styles[0].smoothing_sigma)
                drift = np.linalg.norm(np.asarray(peak) - np.asarray(peaks[0]))
                assert drift <= budget + 1e-9

    def test_correlation_ordering_minimum_blobs(self, tmp_path):
        cfg = SyntheticConfig(n_groups=8, shape=(16, 16, 16), K=4, n_blobs=3, content_seed=77)
        manifest = generate_dataset(cfg, str(tmp_path / "ds"))
        mask = manifest.load_mask()
        names = [d.name for d in manifest.domains]
        groups = manifest.group_ids
        maps = {(g, n): manifest.load_map(g, n) for g in groups for n in names}
        same = np.mean(
            [
                pearson(maps[(g, a)], maps[(g, b)], mask)
                for g in groups
                for a, b in itertools.combinations(names, 2)
            ]
        )
        diff = np.mean(
            [
                pearson(maps[(g1, n)], maps[(g2, n)], mask)
                for g1, g2 in itertools.combinations(groups, 2)
                for n in names
            ]
        )
        assert same > diff


class TestCalibration:
    """The default config must land in the documented initial-r windows."""

    def test_near_and_far_pair_windows(self, tmp_path):
        cfg = SyntheticConfig(n_groups=16, shape=(24, 28, 24))
        manifest = generate_dataset(cfg, str(tmp_path / "ds"))
        mask = manifest.load_mask()
        groups = manifest.group_ids

        def mean_r(a, b):
            return np.mean([pearson(manifest.load_map(g, a), manifest.load_map(g, b), mask) for g in groups])

        near = mean_r("alpha-1", "alpha-0")
        far = mean_r("alpha-1", "beta-0")
        assert 0.88 <= near <= 0.95
        assert 0.70 <= far <= 0.82
