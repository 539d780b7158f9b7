"""Metrics and study protocols for transfer quality.

Masked Pearson correlation and MSE against ground truth, Inception Score and
target-class accuracy through the auxiliary pipeline classifier, per-direction
transfer reports with standard errors, cross-task evaluation, and layer-wise
feature-map correlations.

A "model handle" is any callable ``(source: StatMap, target: DomainLabel) ->
StatMap``; :class:`TransferHandle` optionally carries the domain set and
training task id for cross-task checks.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ConstantInput,
    DomainSetMismatch,
    EmptySet,
    InsufficientTestData,
    ShapeMismatch,
)
from .volume import DomainLabel, Mask, StatMap


def _masked_values(a: StatMap, b: StatMap, mask: Mask | None):
    if a.shape != b.shape:
        raise ShapeMismatch(f"map shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        return a.voxels.ravel().astype(np.float64), b.voxels.ravel().astype(np.float64)
    if mask.shape != a.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} does not match maps {a.shape}")
    m = mask.voxels
    return a.voxels[m].astype(np.float64), b.voxels[m].astype(np.float64)


def pearson(a: StatMap, b: StatMap, mask: Mask | None = None) -> float:
    """Product-moment correlation over in-mask voxels."""
    x, y = _masked_values(a, b, mask)
    if x.size < 2:
        raise ConstantInput("need at least 2 in-mask voxels")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.dot(xc, xc)))
    sy = float(np.sqrt(np.dot(yc, yc)))
    if sx == 0.0 or sy == 0.0:
        raise ConstantInput("constant in-mask input")
    return float(np.dot(xc, yc) / (sx * sy))


def mse(a: StatMap, b: StatMap, mask: Mask | None = None) -> float:
    """Mean squared in-mask difference."""
    x, y = _masked_values(a, b, mask)
    return float(np.mean((x - y) ** 2))


def standard_error(values) -> float:
    """Sample standard deviation (ddof=1) over sqrt(n)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return 0.0
    return float(arr.std(ddof=1) / np.sqrt(arr.size))


def inception_score(maps: list[StatMap], classifier) -> float:
    """exp(mean KL(p(Y|x) || P(Y))) with P(Y) the mean per-image distribution.

    Computed over the whole set without split averaging; sets of ~20 images
    are too small for the conventional 10 splits.
    """
    if not maps:
        raise EmptySet("no maps given")
    probs = np.stack([np.asarray(classifier.predict_domain(m)[1].probs, dtype=np.float64) for m in maps])
    marginal = probs.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * (np.log(probs) - np.log(marginal)), 0.0)
    kl = terms.sum(axis=1)
    return float(np.exp(kl.mean()))


@dataclass
class TransferCase:
    """One evaluated transfer: the generated map plus its source and truth."""

    source_domain: DomainLabel
    target_domain: DomainLabel
    generated: StatMap
    truth: StatMap
    source: StatMap

    def __post_init__(self):
        if not (self.generated.shape == self.truth.shape == self.source.shape):
            raise ShapeMismatch("generated/truth/source shapes differ")
        if self.truth.domain.name != self.target_domain.name:
            raise ValueError("truth map is not in the target domain")


def transfer_accuracy(cases: list[TransferCase], classifier) -> float:
    """Fraction of generated maps classified into their target domain."""
    if not cases:
        raise EmptySet("no transfer cases")
    hits = 0
    for case in cases:
        predicted, _ = classifier.predict_domain(case.generated)
        hits += int(predicted.index == case.target_domain.index)
    return hits / len(cases)


@dataclass
class DirectionResult:
    source: str
    target: str
    n_images: int
    mean_r: float  # percent
    se_r: float
    mean_mse: float
    se_mse: float
    initial_r: float
    initial_se_r: float
    initial_mse: float
    initial_se_mse: float


@dataclass
class MetricReport:
    """Per-direction transfer metrics plus set-level IS and class accuracy."""

    directions: list[DirectionResult]
    inception_score: float | None = None
    initial_inception_score: float | None = None
    target_class_accuracy: float | None = None
    train_task: str | None = None
    eval_task: str | None = None

    def direction(self, source: str, target: str) -> DirectionResult:
        for d in self.directions:
            if d.source == source and d.target == target:
                return d
        raise KeyError(f"no direction {source}->{target} in report")

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["source", "target", "n", "mean_r", "se_r", "mean_mse", "se_mse", "initial_r", "initial_mse"]
            )
            for d in self.directions:
                writer.writerow(
                    [
                        d.source,
                        d.target,
                        d.n_images,
                        repr(d.mean_r),
                        repr(d.se_r),
                        repr(d.mean_mse),
                        repr(d.se_mse),
                        repr(d.initial_r),
                        repr(d.initial_mse),
                    ]
                )

    def to_json(self, path: str) -> None:
        doc = {
            "directions": [vars(d) for d in self.directions],
            "inception_score": self.inception_score,
            "initial_inception_score": self.initial_inception_score,
            "target_class_accuracy": self.target_class_accuracy,
            "train_task": self.train_task,
            "eval_task": self.eval_task,
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


@dataclass
class TransferHandle:
    """Uniform transfer interface over trained models."""

    fn: Callable[[StatMap, DomainLabel], StatMap]
    domains: list[DomainLabel] | None = None
    task_id: str | None = None
    name: str = "model"

    def __call__(self, source: StatMap, target: DomainLabel) -> StatMap:
        return self.fn(source, target)


def _pick_groups(manifest, groups, n_images: int, seed: int) -> list[str]:
    pool = list(groups) if groups is not None else list(manifest.group_ids)
    if len(pool) < n_images:
        raise InsufficientTestData(f"need {n_images} groups, have {len(pool)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xEAA]))
    idx = rng.choice(len(pool), size=n_images, replace=False)
    return [pool[i] for i in sorted(idx)]


def evaluate_transfers(
    model,
    manifest,
    directions: list[tuple[str, str]],
    n_images: int = 20,
    groups=None,
    classifier=None,
    seed: int = 0,
    mask: Mask | None = None,
) -> MetricReport:
    """Run the model over seeded test groups and report Table-style metrics.

    For each (source, target) direction, ``n_images`` groups are drawn
    seeded from ``groups`` (or the whole manifest); the generated map is
    compared to the ground-truth target map, and the source-vs-truth
    "Initial" baseline is reported next to it. With a classifier, the
    Inception Score over all generated maps and the target-class accuracy
    are added.
    """
    if mask is None:
        mask = manifest.load_mask()
    results = []
    all_cases: list[TransferCase] = []
    truth_maps: list[StatMap] = []
    for source_name, target_name in directions:
        chosen = _pick_groups(manifest, groups, n_images, seed)
        target_dom = manifest.domain_by_name(target_name)
        rs, mses, irs, imses = [], [], [], []
        for gid in chosen:
            source = manifest.load_map(gid, source_name)
            truth = manifest.load_map(gid, target_name)
            generated = model(source, target_dom)
            rs.append(pearson(generated, truth, mask))
            mses.append(mse(generated, truth, mask))
            irs.append(pearson(source, truth, mask))
            imses.append(mse(source, truth, mask))
            all_cases.append(
                TransferCase(
                    source_domain=manifest.domain_by_name(source_name),
                    target_domain=target_dom,
                    generated=generated,
                    truth=truth,
                    source=source,
                )
            )
            truth_maps.append(truth)
        results.append(
            DirectionResult(
                source=source_name,
                target=target_name,
                n_images=n_images,
                mean_r=100.0 * float(np.mean(rs)),
                se_r=100.0 * standard_error(rs),
                mean_mse=float(np.mean(mses)),
                se_mse=standard_error(mses),
                initial_r=100.0 * float(np.mean(irs)),
                initial_se_r=100.0 * standard_error(irs),
                initial_mse=float(np.mean(imses)),
                initial_se_mse=standard_error(imses),
            )
        )
    report = MetricReport(directions=results)
    if classifier is not None and all_cases:
        report.inception_score = inception_score([c.generated for c in all_cases], classifier)
        report.initial_inception_score = inception_score(truth_maps, classifier)
        report.target_class_accuracy = transfer_accuracy(all_cases, classifier)
    return report


def cross_task_evaluation(
    model,
    manifest,
    directions: list[tuple[str, str]],
    n_images: int = 20,
    groups=None,
    classifier=None,
    seed: int = 0,
    train_task: str | None = None,
) -> MetricReport:
    """Evaluate a model on a foreign task's manifest.

    Identical computation to :func:`evaluate_transfers`; the report is tagged
    with train/eval task ids. The foreign manifest must use the same domain
    set the model was trained on.
    """
    model_domains = getattr(model, "domains", None)
    if model_domains is not None:
        trained = sorted(d.name for d in model_domains)
        evaluated = sorted(d.name for d in manifest.domains)
        if trained != evaluated:
            raise DomainSetMismatch(f"model domains {trained} != manifest domains {evaluated}")
    report = evaluate_transfers(
        model, manifest, directions, n_images=n_images, groups=groups, classifier=classifier, seed=seed
    )
    report.train_task = train_task if train_task is not None else getattr(model, "task_id", None)
    report.eval_task = getattr(manifest, "config", None).task_id if hasattr(manifest, "config") else None
    return report


def layerwise_feature_correlation(
    classifier,
    manifest,
    pairs: list[tuple[str, str]],
    groups: list[str],
    layers: tuple[int, ...] = (1, 2, 3, 4),
) -> list[dict]:
    """Mean correlation between same-group feature maps of two pipelines.

    For each pipeline pair and each conv stage, the per-channel correlation of
    flattened feature maps is averaged over channels and groups. Returns one
    row per pair: ``{"pair": "a/b", "layer_r": [...percent per layer...]}``.
    """
    rows = []
    for dom_a, dom_b in pairs:
        per_layer = [[] for _ in layers]
        for gid in groups:
            feats_a = classifier.stage_features(manifest.load_map(gid, dom_a))
            feats_b = classifier.stage_features(manifest.load_map(gid, dom_b))
            for li, layer in enumerate(layers):
                fa = feats_a[layer - 1]
                fb = feats_b[layer - 1]
                chans = []
                for c in range(fa.shape[0]):
                    x = fa[c].ravel().astype(np.float64)
                    y = fb[c].ravel().astype(np.float64)
                    sx, sy = x.std(), y.std()
                    if sx == 0.0 or sy == 0.0:
                        continue
                    chans.append(float(np.corrcoef(x, y)[0, 1]))
                if chans:
                    per_layer[li].append(float(np.mean(chans)))
        rows.append(
            {
                "pair": f"{dom_a}/{dom_b}",
                "layer_r": [100.0 * float(np.mean(v)) if v else float("nan") for v in per_layer],
            }
        )
    return rows


def layer_correlation_csv(rows: list[dict], path: str, layers: tuple[int, ...] = (1, 2, 3, 4)) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair"] + [f"layer_{i}" for i in layers])
        for row in rows:
            writer.writerow([row["pair"]] + [repr(v) for v in row["layer_r"]])
