"""Deterministic multi-pipeline synthetic dataset generator.

Emulates the structure of a multi-pipeline group-level fMRI dataset at desk
scale: every group has one underlying activation content (a sum of Gaussian
blobs perturbed around a shared task archetype), rendered once per pipeline
style. A style is (smoothing, signed-power gamma, multiplicative low-frequency
bias, additive noise); the identity style is (0, 1, 0, 0).

Everything is a pure function of the config: generating a dataset twice
produces byte-identical trees.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import EmptyInput, InvalidK, IoFailure, ShapeMismatch
from .volume import (
    DomainLabel,
    Mask,
    StatMap,
    minmax_normalize,
    save_canonical,
    save_mask,
    load_canonical,
    load_mask,
)

_SOFTWARE_NAMES = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"]


@dataclass(frozen=True)
class StyleParams:
    """Rendering parameters of one synthetic pipeline."""

    smoothing_sigma: float
    gamma: float
    bias_amplitude: float
    noise_sigma: float
    domain: DomainLabel

    def __post_init__(self):
        if self.smoothing_sigma < 0 or self.gamma <= 0 or self.bias_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError(f"invalid style parameters: {self}")


@dataclass(frozen=True)
class ContentField:
    """Latent activation content of one group: blobs as (center, amplitude, radius)."""

    blobs: tuple[tuple[tuple[float, float, float], float, float], ...]
    group_id: str

    def validate_for(self, shape: tuple[int, int, int]) -> None:
        for center, _amp, radius in self.blobs:
            if radius <= 0:
                raise ValueError(f"blob radius must be > 0, got {radius}")
            for c, n in zip(center, shape):
                if not 0 <= c <= n - 1:
                    raise ValueError(f"blob center {center} outside volume of shape {shape}")


@dataclass(frozen=True)
class SyntheticConfig:
    n_groups: int = 200
    shape: tuple[int, int, int] = (24, 28, 24)
    K: int = 4
    n_blobs: int = 6
    style_seed: int = 11
    content_seed: int = 101

    def __post_init__(self):
        if self.n_groups < 2:
            raise ValueError("n_groups must be >= 2")
        if self.K < 2:
            raise InvalidK("K must be >= 2")
        if self.n_blobs < 1:
            raise ValueError("n_blobs must be >= 1")

    @property
    def task_id(self) -> str:
        return f"task-c{self.content_seed}"


def make_pipeline_styles(K: int, seed: int) -> list[StyleParams]:
    """K distinct styles laid out as a walk over a (software x derivatives) grid.

    Style 0 is near-identity. Consecutive styles differ on exactly one grid
    axis: the derivatives axis moves smoothing, the software axis moves
    gamma and bias. Step sizes carry a small seeded jitter.
    """
    if K < 2:
        raise InvalidK(f"K must be >= 2, got {K}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E1F]))

    def jit(x, rel=0.10):
        return float(x * (1.0 + rel * (2.0 * rng.random() - 1.0)))

    # Calibrated so that at 24x28x24 the derivative-axis pair lands at
    # initial r ~0.90 and the two-axis pair at ~0.78 (in-mask Pearson).
    smooth_step = jit(2.2)
    gamma_factor = jit(2.35)
    bias_step = jit(0.45)

    # Gray-code walk over the grid: (0,0) (0,1) (1,1) (1,0) (2,0) (2,1) ...
    sw, dv = 0, 0
    cells = [(sw, dv)]
    while len(cells) < K:
        if len(cells) % 2 == 1:
            dv = 1 - dv  # derivatives axis
        else:
            sw += 1  # software axis
        cells.append((sw, dv))

    styles = []
    for idx, (sw, dv) in enumerate(cells):
        software = _SOFTWARE_NAMES[sw] if sw < len(_SOFTWARE_NAMES) else f"soft{sw}"
        styles.append(
            StyleParams(
                smoothing_sigma=dv * smooth_step,
                gamma=gamma_factor**sw,
                bias_amplitude=sw * bias_step,
                noise_sigma=0.025 + 0.01 * dv,
                domain=DomainLabel(index=idx, name=f"{software}-{dv}"),
            )
        )
    return styles


def _bias_pattern(shape: tuple[int, int, int]) -> np.ndarray:
    """Fixed smooth spatial pattern in [-1, 1] shared by all bias fields.

    Deliberately low-frequency: its per-voxel gradient must stay well below
    the curvature of an activation peak so that bias alone cannot move peak
    locations.
    """
    u, v, w = [np.linspace(0.0, 1.0, n) for n in shape]
    uu, vv, ww = np.meshgrid(u, v, w, indexing="ij")
    p = (
        0.5 * np.cos(0.55 * np.pi * (uu - 0.15))
        + 0.3 * np.sin(0.55 * np.pi * (vv + 0.25))
        + 0.2 * np.cos(0.55 * np.pi * ww)
    )
    return p - p.mean()


def sum_of_blobs(content: ContentField, shape: tuple[int, int, int]) -> np.ndarray:
    """Rasterize the content as a sum of isotropic Gaussian bumps."""
    content.validate_for(shape)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    out = np.zeros(shape, dtype=np.float64)
    for (cx, cy, cz), amp, radius in content.blobs:
        d2 = (grid[0] - cx) ** 2 + (grid[1] - cy) ** 2 + (grid[2] - cz) ** 2
        out += amp * np.exp(-d2 / (2.0 * radius**2))
    return out


def render_group(
    content: ContentField,
    style: StyleParams,
    shape: tuple[int, int, int],
    noise_seed: int,
) -> StatMap:
    """Render one group's content under one pipeline style.

    volume = bias_field * signed_power(smooth(blobs), gamma) + noise
    """
    field = sum_of_blobs(content, shape)
    if style.smoothing_sigma > 0:
        field = gaussian_filter(field, sigma=style.smoothing_sigma, mode="constant")
    if style.gamma != 1.0:
        field = np.sign(field) * np.abs(field) ** style.gamma
    if style.bias_amplitude > 0:
        field = field * (1.0 + style.bias_amplitude * _bias_pattern(shape))
    if style.noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        field = field + style.noise_sigma * rng.standard_normal(shape)
    return StatMap(
        voxels=field.astype(np.float32),
        domain=style.domain,
        group_id=content.group_id,
        task_id="",
    )


def ellipsoid_mask(shape: tuple[int, int, int], fill: float = 0.92) -> Mask:
    """Brain-ish ellipsoid support inscribed in the volume."""
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    uu, vv, ww = np.meshgrid(*axes, indexing="ij")
    r2 = (uu / fill) ** 2 + (vv / fill) ** 2 + (ww / fill) ** 2
    return Mask(r2 <= 1.0)


def _task_archetype(config: SyntheticConfig) -> list[tuple[np.ndarray, float, float]]:
    """Task-level blob layout all groups of this content seed share.

    n_blobs macroscopic activation foci plus 4*n_blobs small texture blobs;
    the texture carries the fine spatial frequencies that distinguish smoothed
    from unsmoothed pipeline styles.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.content_seed, 0]))
    shape = np.asarray(config.shape, dtype=np.float64)
    scale = min(config.shape) / 24.0
    keep_out = 7.0 * scale  # clear neighborhood around the dominant blob
    spacing = 2.2 * scale  # pairwise separation, so tails cannot pile up

    def sample_center(placed):
        # rejection-sample centers well inside the ellipsoid mask, away from
        # the dominant blob and not too close to any already placed blob
        center = None
        for _ in range(400):
            rel = rng.uniform(-0.62, 0.62, size=3)
            if float(np.sum((rel / 0.92) ** 2)) > 0.55:
                continue
            center = (rel + 1.0) / 2.0 * (shape - 1)
            dists = [float(np.linalg.norm(center - p)) for p in placed]
            if dists[0] >= keep_out and all(d >= spacing for d in dists[1:]):
                return center
        return center

    dominant = None
    while dominant is None or float(np.sum(((2 * dominant / (shape - 1) - 1) / 0.92) ** 2)) > 0.55:
        rel = rng.uniform(-0.62, 0.62, size=3)
        dominant = (rel + 1.0) / 2.0 * (shape - 1)
    # tallest and widest by a clear margin, so its peak outvalues every
    # competitor under all styles (smoothing and contrast changes included)
    blobs = [(dominant, 1.35, float(rng.uniform(3.2, 3.6) * scale))]
    placed = [dominant]
    for _ in range(config.n_blobs - 1):
        amp = float(rng.uniform(0.30, 0.55))
        if rng.random() < 0.25:
            amp = -amp
        center = sample_center(placed)
        placed.append(center)
        blobs.append((center, amp, float(rng.uniform(2.0, 2.6) * scale)))
    for _ in range(5 * config.n_blobs):
        amp = float(rng.uniform(0.18, 0.42)) * (1.0 if rng.random() < 0.6 else -1.0)
        center = sample_center(placed)
        placed.append(center)
        blobs.append((center, amp, float(rng.uniform(0.8, 1.4) * scale)))
    return blobs


def group_content(config: SyntheticConfig, group_index: int) -> ContentField:
    """Perturb the task archetype into one group's content field.

    Blob centers are rounded to the voxel grid so each blob peak sits exactly
    on a grid point.
    """
    archetype = _task_archetype(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.content_seed, 1 + group_index]))
    shape = np.asarray(config.shape, dtype=np.float64)
    scale = min(config.shape) / 24.0
    keep_out = 7.0 * scale
    spacing = 2.2 * scale
    blobs = []
    placed: list[np.ndarray] = []
    for i, (center, amp, radius) in enumerate(archetype):
        if i == 0:
            c = center + rng.normal(0.0, 1.6, size=3) * scale
        else:
            # re-draw jitter until the keep-out and spacing constraints hold,
            # so group perturbation cannot pile blobs into a composite peak
            for _ in range(60):
                c = center + rng.normal(0.0, 1.6, size=3) * scale
                dists = [float(np.linalg.norm(c - p)) for p in placed]
                if dists[0] >= keep_out and all(d >= spacing for d in dists[1:]):
                    break
        placed.append(c)
        c = np.clip(np.round(c), 1, shape - 2)
        # the dominant blob varies less across groups, like a task's canonical focus
        amp_jitter = 0.10 if i == 0 else 0.22
        a = amp * float(1.0 + amp_jitter * rng.standard_normal())
        r = radius * float(np.clip(1.0 + 0.08 * rng.standard_normal(), 0.8, 1.2))
        blobs.append((tuple(float(x) for x in c), a, r))
    return ContentField(blobs=tuple(blobs), group_id=f"g{group_index:04d}")


@dataclass
class DatasetManifest:
    """Index of a generated dataset: config, styles, mask and volume paths."""

    root: str
    config: SyntheticConfig
    styles: list[StyleParams]
    mask_path: str
    entries: list[dict]

    @property
    def domains(self) -> list[DomainLabel]:
        return [s.domain for s in self.styles]

    @property
    def group_ids(self) -> list[str]:
        seen = dict.fromkeys(e["group_id"] for e in self.entries)
        return list(seen)

    def path_of(self, group_id: str, domain_name: str) -> str:
        for e in self.entries:
            if e["group_id"] == group_id and e["domain"] == domain_name:
                return os.path.join(self.root, e["path"])
        raise KeyError(f"no entry for ({group_id}, {domain_name})")

    def load_map(self, group_id: str, domain_name: str) -> StatMap:
        return load_canonical(self.path_of(group_id, domain_name))

    def load_mask(self) -> Mask:
        return load_mask(os.path.join(self.root, self.mask_path))

    def domain_by_name(self, name: str) -> DomainLabel:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(f"unknown domain {name!r}; known: {[d.name for d in self.domains]}")


def _style_dict(style: StyleParams) -> dict:
    return {
        "smoothing_sigma": style.smoothing_sigma,
        "gamma": style.gamma,
        "bias_amplitude": style.bias_amplitude,
        "noise_sigma": style.noise_sigma,
        "domain": {"index": style.domain.index, "name": style.domain.name},
    }


def generate_dataset(config: SyntheticConfig, out_dir: str) -> DatasetManifest:
    """Render and write the full dataset; returns the manifest.

    Layout: ``manifest.json``, ``mask.json``/``mask.f32`` and one canonical
    volume pair per (group, style) under ``volumes/``. Each volume is min-max
    normalized inside the mask, with the raw extrema kept in its header.
    """
    styles = make_pipeline_styles(config.K, config.style_seed)
    mask = ellipsoid_mask(config.shape)
    try:
        os.makedirs(os.path.join(out_dir, "volumes"), exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc

    save_mask(mask, os.path.join(out_dir, "mask.json"))
    entries = []
    for g in range(config.n_groups):
        content = group_content(config, g)
        for style in styles:
            noise_seed = int(
                np.random.SeedSequence(
                    [config.content_seed, 1 + g, style.domain.index, 0xA0]
                ).generate_state(1, dtype=np.uint32)[0]
            )
            smap = render_group(content, style, config.shape, noise_seed)
            smap.voxels[~mask.voxels] = 0.0
            smap.task_id = config.task_id
            smap, _ = minmax_normalize(smap, mask)
            rel = os.path.join("volumes", f"{content.group_id}__{style.domain.name}.json")
            save_canonical(smap, os.path.join(out_dir, rel))
            entries.append(
                {"group_id": content.group_id, "domain": style.domain.name, "path": rel}
            )

    manifest = DatasetManifest(
        root=out_dir,
        config=config,
        styles=styles,
        mask_path="mask.json",
        entries=entries,
    )
    doc = {
        "config": asdict(config),
        "styles": [_style_dict(s) for s in styles],
        "mask_path": manifest.mask_path,
        "entries": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return manifest


def load_manifest(path: str) -> DatasetManifest:
    """Read a manifest written by :func:`generate_dataset`."""
    manifest_path = path if path.endswith(".json") else os.path.join(path, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {manifest_path}: {exc}") from exc
    cfg_doc = dict(doc["config"])
    cfg_doc["shape"] = tuple(cfg_doc["shape"])
    config = SyntheticConfig(**cfg_doc)
    styles = [
        StyleParams(
            smoothing_sigma=s["smoothing_sigma"],
            gamma=s["gamma"],
            bias_amplitude=s["bias_amplitude"],
            noise_sigma=s["noise_sigma"],
            domain=DomainLabel(index=s["domain"]["index"], name=s["domain"]["name"]),
        )
        for s in doc["styles"]
    ]
    return DatasetManifest(
        root=os.path.dirname(os.path.abspath(manifest_path)),
        config=config,
        styles=styles,
        mask_path=doc["mask_path"],
        entries=doc["entries"],
    )
