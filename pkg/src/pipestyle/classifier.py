"""Auxiliary CNN that tells pipelines apart.

Five stride-2 conv stages (channels 32..512, batch norm, leaky ReLU) and a
single fully connected head. The flattened pre-head activation is the latent
used both for diffusion conditioning and for layer-wise feature analysis; at
input 48x56x48 its length is 512*2*2*2 = 4096.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import NoWeights, ShapeMismatch, SingleDomainDataset
from .seeds import substream
from .volume import DomainLabel, StatMap

CHANNEL_PLAN = (32, 64, 128, 256, 512)
LEAKY_SLOPE = 0.2


@dataclass
class LabelDistribution:
    """Softmax output over the K pipeline classes."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if abs(float(self.probs.sum()) - 1.0) > 1e-6 or (self.probs < 0).any():
            raise ValueError("probs must be a distribution")


@dataclass
class ConditionVector:
    """Conditioning payload for the diffusion noise predictor."""

    payload: np.ndarray
    kind: str  # "one_hot" | "latent"
    source: str
    target_domain: DomainLabel | None = None

    def __post_init__(self):
        self.payload = np.asarray(self.payload, dtype=np.float32)
        if self.kind not in ("one_hot", "latent"):
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if self.kind == "one_hot":
            ones = np.isclose(self.payload, 1.0)
            if ones.sum() != 1 or not np.isclose(self.payload.sum(), 1.0):
                raise ValueError("one_hot payload must be an indicator vector")


def latent_length(input_shape: tuple[int, int, int], channels=CHANNEL_PLAN) -> int:
    """C_last * prod(ceil(dim / 2**n_stages))."""
    dims = list(input_shape)
    for _ in channels:
        dims = [math.ceil(d / 2) for d in dims]
    return channels[-1] * int(np.prod(dims))


class PipelineClassifierNet(nn.Module):
    """Conv trunk + linear head; kernel 3 / stride 2 / pad 1 per stage gives
    the ceil-division spatial reduction."""

    def __init__(self, input_shape: tuple[int, int, int], n_domains: int, channels=CHANNEL_PLAN):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.n_domains = n_domains
        self.channels = tuple(channels)
        stages = []
        cin = 1
        for c in channels:
            stages.append(
                nn.Sequential(
                    nn.Conv3d(cin, c, kernel_size=3, stride=2, padding=1),
                    nn.BatchNorm3d(c),
                    nn.LeakyReLU(LEAKY_SLOPE),
                )
            )
            cin = c
        self.stages = nn.ModuleList(stages)
        self.latent_dim = latent_length(input_shape, channels)
        self.head = nn.Linear(self.latent_dim, n_domains)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.latent(x))

    def latent(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x)
        return x.flatten(1)

    def stage_activations(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


@dataclass
class ClassifierTrainConfig:
    epochs: int = 150
    lr: float = 1e-4
    batch_size: int = 64
    seed: int = 0


def _to_tensor(maps: list[StatMap]) -> torch.Tensor:
    arr = np.stack([m.voxels for m in maps])[:, None].astype(np.float32)
    return torch.from_numpy(arr)


@dataclass
class ClassifierHandle:
    """Trained classifier plus its manifest metadata."""

    net: PipelineClassifierNet
    domains: list[DomainLabel]
    input_shape: tuple[int, int, int]
    seed: int
    metrics: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.domains)

    @property
    def latent_dim(self) -> int:
        return self.net.latent_dim

    def _check(self, smap: StatMap) -> torch.Tensor:
        if smap.shape != self.input_shape:
            raise ShapeMismatch(f"map shape {smap.shape} != classifier input {self.input_shape}")
        return torch.from_numpy(smap.voxels[None, None].astype(np.float32))

    def forward(self, smap: StatMap) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic inference pass: (logits, flattened pre-head latent)."""
        x = self._check(smap)
        self.net.eval()
        with torch.no_grad():
            latent = self.net.latent(x)
            logits = self.net.head(latent)
        return logits[0].numpy().astype(np.float64), latent[0].numpy().astype(np.float64)

    def predict_domain(self, smap: StatMap) -> tuple[DomainLabel, LabelDistribution]:
        logits, _ = self.forward(smap)
        probs = _softmax(logits)
        return self.domains[int(np.argmax(probs))], LabelDistribution(probs)

    def extract_latent(self, smap: StatMap) -> ConditionVector:
        _, latent = self.forward(smap)
        return ConditionVector(
            payload=latent,
            kind="latent",
            source=f"latent of ({smap.group_id}, {smap.domain.name})",
        )

    def stage_features(self, smap: StatMap) -> list[np.ndarray]:
        """Per-stage activations as [C, x, y, z] arrays (layers 1..5)."""
        x = self._check(smap)
        self.net.eval()
        with torch.no_grad():
            acts = self.net.stage_activations(x)
        return [a[0].numpy().astype(np.float64) for a in acts]

    def batch_logits(self, maps: list[StatMap]) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            return self.net(_to_tensor(maps)).numpy().astype(np.float64)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_distribution(logits: np.ndarray) -> LabelDistribution:
    return LabelDistribution(_softmax(np.asarray(logits, dtype=np.float64)))


def init_classifier(
    input_shape: tuple[int, int, int], domains: list[DomainLabel], seed: int = 0
) -> ClassifierHandle:
    torch.manual_seed(seed)
    net = PipelineClassifierNet(input_shape, len(domains))
    return ClassifierHandle(net=net, domains=list(domains), input_shape=tuple(input_shape), seed=seed)


def train_classifier(
    train_maps: list[StatMap],
    domains: list[DomainLabel],
    config: ClassifierTrainConfig = ClassifierTrainConfig(),
    val_maps: list[StatMap] | None = None,
    log=None,
) -> ClassifierHandle:
    """Cross-entropy training; returns the handle with final accuracies.

    epochs=0 returns the seeded initialization untouched.
    """
    present = {m.domain.index for m in train_maps}
    if len(present) < 2:
        raise SingleDomainDataset(f"training set covers {len(present)} domain(s)")
    handle = init_classifier(train_maps[0].shape, domains, seed=config.seed)
    net = handle.net
    x_all = _to_tensor(train_maps)
    y_all = torch.tensor([m.domain.index for m in train_maps], dtype=torch.long)
    order_rng = substream(config.seed, "classifier-batches")
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    n = len(train_maps)
    for epoch in range(config.epochs):
        net.train()
        perm = torch.from_numpy(order_rng.permutation(n))
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(net(x_all[idx]), y_all[idx])
            loss.backward()
            opt.step()
            loss_val = float(loss.detach())
            total += loss_val * len(idx)
            if log is not None:
                log(epoch=epoch, batch=start // config.batch_size, loss=loss_val)
        handle.metrics.setdefault("epoch_loss", []).append(total / n)
    handle.metrics["train_accuracy"] = _accuracy(handle, train_maps)
    if val_maps:
        handle.metrics["val_accuracy"] = _accuracy(handle, val_maps)
    return handle


def _accuracy(handle: ClassifierHandle, maps: list[StatMap]) -> float:
    logits = handle.batch_logits(maps)
    pred = logits.argmax(axis=1)
    truth = np.array([m.domain.index for m in maps])
    return float((pred == truth).mean())


def save_classifier(handle: ClassifierHandle, path: str) -> None:
    """``path`` is the weight blob; ``path + '.json'`` is the manifest."""
    torch.save(handle.net.state_dict(), path)
    manifest = {
        "arch": {"channels": list(handle.net.channels), "leaky_slope": LEAKY_SLOPE},
        "K": handle.K,
        "D": handle.latent_dim,
        "input_shape": list(handle.input_shape),
        "seed": handle.seed,
        "metrics": {k: v for k, v in handle.metrics.items() if not isinstance(v, list)},
        "domains": [{"index": d.index, "name": d.name} for d in handle.domains],
        "kind": "classifier",
    }
    with open(path + ".json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_classifier(path: str) -> ClassifierHandle:
    manifest_path = path + ".json"
    if not (os.path.exists(path) and os.path.exists(manifest_path)):
        raise NoWeights(f"missing checkpoint {path} (+.json)")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    domains = [DomainLabel(d["index"], d["name"]) for d in manifest["domains"]]
    handle = ClassifierHandle(
        net=PipelineClassifierNet(tuple(manifest["input_shape"]), manifest["K"]),
        domains=domains,
        input_shape=tuple(manifest["input_shape"]),
        seed=manifest["seed"],
        metrics=manifest.get("metrics", {}),
    )
    handle.net.load_state_dict(torch.load(path, weights_only=True))
    handle.net.eval()
    return handle
