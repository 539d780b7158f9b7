"""3D GAN baselines: Pix2Pix (supervised, one-to-one), CycleGAN (unsupervised,
one-to-one) and StarGAN (unsupervised, multi-domain).

The original 2D architectures are kept, with every convolution and
normalization replaced by its 3D counterpart; channel widths and residual
depth are scaled down for desk-size volumes via the config. Pix2Pix trains
with the vanilla adversarial loss plus L1 reconstruction; CycleGAN and
StarGAN use the least-squares adversarial loss with cycle (and, for StarGAN,
domain-classification) terms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import (
    DirectionMismatch,
    NoWeights,
    PairingUnavailable,
    UnknownLabel,
    UnpairedData,
)
from .seeds import substream
from .volume import DomainLabel, StatMap

GAN_KINDS = ("pix2pix", "cyclegan", "stargan")


@dataclass
class GanFrameworkConfig:
    kind: str
    lambda_rec: float = 100.0
    lambda_cyc: float = 10.0
    lambda_cls: float = 1.0
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    direction: tuple[str, str] | None = None  # one-to-one kinds
    base_channels: int = 16
    n_res_blocks: int = 2

    def __post_init__(self):
        if self.kind not in GAN_KINDS:
            raise ValueError(f"kind must be one of {GAN_KINDS}, got {self.kind!r}")
        if min(self.lambda_rec, self.lambda_cyc, self.lambda_cls) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.kind in ("pix2pix", "cyclegan") and self.direction is None:
            raise ValueError(f"{self.kind} needs a (source, target) direction")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class _ResBlock3D(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(ch, ch, 3, padding=1),
            nn.InstanceNorm3d(ch, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv3d(ch, ch, 3, padding=1),
            nn.InstanceNorm3d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator3D(nn.Module):
    """CycleGAN/StarGAN-style generator: wide conv, 2x down, residual trunk,
    2x up, tanh. StarGAN mode appends the broadcast target label as input
    channels."""

    def __init__(self, base: int = 16, n_blocks: int = 2, label_channels: int = 0):
        super().__init__()
        cin = 1 + label_channels
        self.label_channels = label_channels
        c = base
        self.head = nn.Sequential(
            nn.Conv3d(cin, c, 7, padding=3), nn.InstanceNorm3d(c, affine=True), nn.ReLU(inplace=True)
        )
        self.down1 = nn.Sequential(
            nn.Conv3d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm3d(2 * c, affine=True), nn.ReLU(inplace=True)
        )
        self.down2 = nn.Sequential(
            nn.Conv3d(2 * c, 4 * c, 3, stride=2, padding=1), nn.InstanceNorm3d(4 * c, affine=True), nn.ReLU(inplace=True)
        )
        self.trunk = nn.Sequential(*[_ResBlock3D(4 * c) for _ in range(n_blocks)])
        self.up1 = nn.Sequential(
            nn.Conv3d(4 * c, 2 * c, 3, padding=1), nn.InstanceNorm3d(2 * c, affine=True), nn.ReLU(inplace=True)
        )
        self.up2 = nn.Sequential(
            nn.Conv3d(2 * c, c, 3, padding=1), nn.InstanceNorm3d(c, affine=True), nn.ReLU(inplace=True)
        )
        self.tail = nn.Conv3d(c, 1, 7, padding=3)

    def forward(self, x, label_onehot: torch.Tensor | None = None):
        if self.label_channels:
            if label_onehot is None:
                raise UnknownLabel("StarGAN generator needs a target label")
            lab = label_onehot[:, :, None, None, None].expand(-1, -1, *x.shape[2:])
            x = torch.cat([x, lab], dim=1)
        s0 = x.shape[2:]
        h = self.head(x)
        s1 = h.shape[2:]
        h1 = self.down1(h)
        s2 = h1.shape[2:]
        h2 = self.down2(h1)
        h2 = self.trunk(h2)
        u1 = self.up1(F.interpolate(h2, size=s2, mode="trilinear", align_corners=False))
        u0 = self.up2(F.interpolate(u1, size=s1, mode="trilinear", align_corners=False))
        assert u0.shape[2:] == s0
        return torch.tanh(self.tail(u0))


def _gen_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class UNetGenerator3D(nn.Module):
    """Pix2Pix-style encoder/decoder with skip connections and tanh output."""

    def __init__(self, base: int = 16, depth: int = 2):
        super().__init__()
        cs = [base * (2**i) for i in range(depth + 1)]
        self.stem = _gen_block(1, cs[0])
        self.downs = nn.ModuleList(_gen_block(cs[i], cs[i + 1], stride=2) for i in range(depth))
        self.mid = _gen_block(cs[-1], cs[-1])
        self.ups = nn.ModuleList(
            _gen_block(cs[i + 1] + cs[i], cs[i]) for i in reversed(range(depth))
        )
        self.tail = nn.Conv3d(cs[0], 1, 3, padding=1)

    def forward(self, x):
        h = self.stem(x)
        skips = []
        for down in self.downs:
            skips.append(h)
            h = down(h)
        h = self.mid(h)
        for up in self.ups:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[2:], mode="trilinear", align_corners=False)
            h = up(torch.cat([h, skip], dim=1))
        return torch.tanh(self.tail(h))


class PatchDiscriminator3D(nn.Module):
    """3D PatchGAN: a stack of stride-2 convs ending in a realism score grid.
    StarGAN mode adds a K-way domain head pooled over space."""

    def __init__(self, in_channels: int = 1, base: int = 16, n_domains: int = 0):
        super().__init__()
        c = base
        self.trunk = nn.Sequential(
            nn.Conv3d(in_channels, c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(c, 2 * c, 3, stride=2, padding=1),
            nn.InstanceNorm3d(2 * c, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.InstanceNorm3d(4 * c, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.src_head = nn.Conv3d(4 * c, 1, 3, padding=1)
        self.cls_head = nn.Conv3d(4 * c, n_domains, 1) if n_domains else None

    def forward(self, x):
        h = self.trunk(x)
        src = self.src_head(h)
        if self.cls_head is None:
            return src
        cls = self.cls_head(h).mean(dim=(2, 3, 4))
        return src, cls


# ---------------------------------------------------------------------------
# Loss terms (stub-friendly: generators/discriminators are plain callables)
# ---------------------------------------------------------------------------

def _bce_with_target(scores: torch.Tensor, real: bool) -> torch.Tensor:
    target = torch.ones_like(scores) if real else torch.zeros_like(scores)
    return F.binary_cross_entropy_with_logits(scores, target)


def _lsgan(scores: torch.Tensor, real: bool) -> torch.Tensor:
    target = torch.ones_like(scores) if real else torch.zeros_like(scores)
    return F.mse_loss(scores, target)


def pix2pix_losses(G, D, source, target_truth, lambda_rec: float = 100.0) -> dict:
    """Generator-side Pix2Pix terms on one paired batch."""
    if source.shape != target_truth.shape:
        raise UnpairedData("source/target shapes differ; pix2pix needs paired data")
    fake = G(source)
    adv = _bce_with_target(D(torch.cat([source, fake], dim=1)), real=True)
    rec = F.l1_loss(fake, target_truth)
    return {"adv": adv, "rec": rec, "total": adv + lambda_rec * rec}


def cyclegan_losses(G_ab, G_ba, D_a, D_b, a, b, lambda_cyc: float = 10.0) -> dict:
    """Generator-side CycleGAN terms on unpaired batches a, b."""
    fake_b = G_ab(a)
    fake_a = G_ba(b)
    adv_a = _lsgan(D_a(fake_a), real=True)
    adv_b = _lsgan(D_b(fake_b), real=True)
    cyc = F.l1_loss(G_ba(fake_b), a) + F.l1_loss(G_ab(fake_a), b)
    return {"adv_a": adv_a, "adv_b": adv_b, "cyc": cyc, "total": adv_a + adv_b + lambda_cyc * cyc}


def stargan_losses(
    G,
    D,
    x,
    source_label: torch.Tensor,
    target_label: torch.Tensor,
    lambda_cls: float = 1.0,
    lambda_cyc: float = 10.0,
) -> dict:
    """Generator-side StarGAN terms; D returns (patch scores, domain logits)."""
    fake = G(x, target_label)
    src_fake, cls_fake_logits = D(fake)
    _, cls_real_logits = D(x)
    adv = _lsgan(src_fake, real=True)
    cls_real = F.cross_entropy(cls_real_logits, source_label.argmax(dim=1))
    cls_fake = F.cross_entropy(cls_fake_logits, target_label.argmax(dim=1))
    cyc = F.l1_loss(G(fake, source_label), x)
    total = adv + lambda_cls * (cls_real + cls_fake) + lambda_cyc * cyc
    return {"adv": adv, "cls_real": cls_real, "cls_fake": cls_fake, "cyc": cyc, "total": total}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class GanTrainingData:
    """Maps grouped by domain, aligned by group order within each domain."""

    maps_by_domain: dict[str, list[StatMap]]
    domains: list[DomainLabel]
    task_id: str = ""

    @classmethod
    def from_manifest(cls, manifest, groups: list[str]) -> "GanTrainingData":
        by_dom = {
            d.name: [manifest.load_map(g, d.name) for g in groups] for d in manifest.domains
        }
        return cls(maps_by_domain=by_dom, domains=list(manifest.domains), task_id=manifest.config.task_id)

    def tensor(self, domain: str) -> torch.Tensor:
        maps = self.maps_by_domain[domain]
        return torch.from_numpy(np.stack([m.voxels for m in maps])[:, None].astype(np.float32))


@dataclass
class GanHandle:
    kind: str
    nets: dict
    domains: list[DomainLabel]
    direction: tuple[str, str] | None
    config: GanFrameworkConfig
    input_shape: tuple[int, int, int]
    task_id: str = ""

    def _domain_by_name(self, name: str) -> DomainLabel:
        for d in self.domains:
            if d.name == name:
                return d
        raise UnknownLabel(f"unknown domain {name!r}")

    def transfer(self, source: StatMap, target: DomainLabel) -> StatMap:
        return gan_transfer(self, source, target)

    def transfer_fn(self):
        from .evaluation import TransferHandle

        return TransferHandle(
            fn=self.transfer, domains=self.domains, task_id=self.task_id, name=self.kind
        )


def _onehot(indices: torch.Tensor, k: int) -> torch.Tensor:
    return F.one_hot(indices, k).float()


def train_gan(config: GanFrameworkConfig, data: GanTrainingData, log=None) -> GanHandle:
    """Alternating discriminator/generator updates, Adam(0.5, 0.999)."""
    torch.manual_seed(config.seed)
    if config.kind == "pix2pix":
        handle = _train_pix2pix(config, data, log)
    elif config.kind == "cyclegan":
        handle = _train_cyclegan(config, data, log)
    else:
        handle = _train_stargan(config, data, log)
    return handle


def _check_direction(config: GanFrameworkConfig, data: GanTrainingData):
    src, tgt = config.direction
    for name in (src, tgt):
        if name not in data.maps_by_domain:
            raise PairingUnavailable(f"domain {name!r} missing from training data")
    if len(data.maps_by_domain[src]) != len(data.maps_by_domain[tgt]):
        raise PairingUnavailable("source/target pools differ in size; cannot align groups")
    return src, tgt


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999))


def _train_pix2pix(config, data, log) -> GanHandle:
    src, tgt = _check_direction(config, data)
    for a, b in zip(data.maps_by_domain[src], data.maps_by_domain[tgt]):
        if a.group_id != b.group_id:
            raise UnpairedData(f"group mismatch {a.group_id} vs {b.group_id}")
    G = UNetGenerator3D(base=config.base_channels)
    D = PatchDiscriminator3D(in_channels=2, base=config.base_channels)
    x_src = data.tensor(src)
    x_tgt = data.tensor(tgt)
    opt_g, opt_d = _adam(G.parameters(), config.lr), _adam(D.parameters(), config.lr)
    rng = substream(config.seed, "gan-batches")
    n = x_src.shape[0]
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(perm[start : start + config.batch_size].copy())
            s, t = x_src[idx], x_tgt[idx]
            # discriminator
            with torch.no_grad():
                fake = G(s)
            d_loss = 0.5 * (
                _bce_with_target(D(torch.cat([s, t], dim=1)), True)
                + _bce_with_target(D(torch.cat([s, fake], dim=1)), False)
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            # generator
            terms = pix2pix_losses(G, D, s, t, config.lambda_rec)
            opt_g.zero_grad()
            terms["total"].backward()
            opt_g.step()
            if log is not None:
                log(epoch=epoch, batch=bi, d=float(d_loss.detach()), adv=float(terms["adv"].detach()), rec=float(terms["rec"].detach()))
    return GanHandle(
        kind="pix2pix",
        nets={"G": G, "D": D},
        domains=data.domains,
        direction=(src, tgt),
        config=config,
        input_shape=data.maps_by_domain[src][0].shape,
        task_id=data.task_id,
    )


def _train_cyclegan(config, data, log) -> GanHandle:
    src, tgt = _check_direction(config, data)
    G_ab = ResnetGenerator3D(base=config.base_channels, n_blocks=config.n_res_blocks)
    G_ba = ResnetGenerator3D(base=config.base_channels, n_blocks=config.n_res_blocks)
    D_a = PatchDiscriminator3D(base=config.base_channels)
    D_b = PatchDiscriminator3D(base=config.base_channels)
    x_a, x_b = data.tensor(src), data.tensor(tgt)
    opt_g = _adam(list(G_ab.parameters()) + list(G_ba.parameters()), config.lr)
    opt_d = _adam(list(D_a.parameters()) + list(D_b.parameters()), config.lr)
    rng = substream(config.seed, "gan-batches")
    n = min(x_a.shape[0], x_b.shape[0])
    for epoch in range(config.epochs):
        perm_a, perm_b = rng.permutation(n), rng.permutation(n)  # unpaired
        for bi, start in enumerate(range(0, n, config.batch_size)):
            ia = torch.from_numpy(perm_a[start : start + config.batch_size].copy())
            ib = torch.from_numpy(perm_b[start : start + config.batch_size].copy())
            a, b = x_a[ia], x_b[ib]
            with torch.no_grad():
                fake_b, fake_a = G_ab(a), G_ba(b)
            d_loss = 0.5 * (
                _lsgan(D_a(a), True) + _lsgan(D_a(fake_a), False)
                + _lsgan(D_b(b), True) + _lsgan(D_b(fake_b), False)
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            terms = cyclegan_losses(G_ab, G_ba, D_a, D_b, a, b, config.lambda_cyc)
            opt_g.zero_grad()
            terms["total"].backward()
            opt_g.step()
            if log is not None:
                log(epoch=epoch, batch=bi, d=float(d_loss.detach()), cyc=float(terms["cyc"].detach()))
    return GanHandle(
        kind="cyclegan",
        nets={"G_ab": G_ab, "G_ba": G_ba, "D_a": D_a, "D_b": D_b},
        domains=data.domains,
        direction=(src, tgt),
        config=config,
        input_shape=data.maps_by_domain[src][0].shape,
        task_id=data.task_id,
    )


def _train_stargan(config, data, log) -> GanHandle:
    if len(data.domains) < 2:
        raise PairingUnavailable("StarGAN needs >= 2 domains")
    k = len(data.domains)
    G = ResnetGenerator3D(base=config.base_channels, n_blocks=config.n_res_blocks, label_channels=k)
    D = PatchDiscriminator3D(base=config.base_channels, n_domains=k)
    xs, ys = [], []
    for d in data.domains:
        t = data.tensor(d.name)
        xs.append(t)
        ys.append(torch.full((t.shape[0],), d.index, dtype=torch.long))
    x_all = torch.cat(xs)
    y_all = torch.cat(ys)
    opt_g, opt_d = _adam(G.parameters(), config.lr), _adam(D.parameters(), config.lr)
    rng = substream(config.seed, "gan-batches")
    n = x_all.shape[0]
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(perm[start : start + config.batch_size].copy())
            x, y_src = x_all[idx], y_all[idx]
            y_tgt = torch.from_numpy(rng.integers(0, k, size=len(idx)))
            src_oh, tgt_oh = _onehot(y_src, k), _onehot(y_tgt, k)
            # discriminator: real/fake + classify real
            with torch.no_grad():
                fake = G(x, tgt_oh)
            src_real, cls_real_logits = D(x)
            src_fake, _ = D(fake)
            d_loss = (
                0.5 * (_lsgan(src_real, True) + _lsgan(src_fake, False))
                + config.lambda_cls * F.cross_entropy(cls_real_logits, y_src)
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            # generator: fool D, classify fake as target, cycle back
            fake = G(x, tgt_oh)
            src_fake, cls_fake_logits = D(fake)
            g_loss = (
                _lsgan(src_fake, True)
                + config.lambda_cls * F.cross_entropy(cls_fake_logits, y_tgt)
                + config.lambda_cyc * F.l1_loss(G(fake, src_oh), x)
            )
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            if log is not None:
                log(epoch=epoch, batch=bi, d=float(d_loss.detach()), g=float(g_loss.detach()))
    return GanHandle(
        kind="stargan",
        nets={"G": G, "D": D},
        domains=data.domains,
        direction=None,
        config=config,
        input_shape=x_all.shape[2:],
        task_id=data.task_id,
    )


def gan_transfer(handle: GanHandle, source: StatMap, target: DomainLabel) -> StatMap:
    """Single forward pass; output labeled with the target domain."""
    known = {d.name for d in handle.domains}
    if target.name not in known:
        raise UnknownLabel(f"unknown domain {target.name!r}; known: {sorted(known)}")
    x = torch.from_numpy(source.voxels[None, None].astype(np.float32))
    if handle.kind == "pix2pix":
        if (source.domain.name, target.name) != handle.direction:
            raise DirectionMismatch(
                f"pix2pix trained for {handle.direction}, asked {source.domain.name}->{target.name}"
            )
        net = handle.nets["G"]
        net.eval()
        with torch.no_grad():
            out = net(x)
    elif handle.kind == "cyclegan":
        a, b = handle.direction
        if (source.domain.name, target.name) == (a, b):
            net = handle.nets["G_ab"]
        elif (source.domain.name, target.name) == (b, a):
            net = handle.nets["G_ba"]
        else:
            raise DirectionMismatch(
                f"cyclegan trained for {handle.direction}, asked {source.domain.name}->{target.name}"
            )
        net.eval()
        with torch.no_grad():
            out = net(x)
    else:
        net = handle.nets["G"]
        net.eval()
        oh = _onehot(torch.tensor([target.index]), len(handle.domains))
        with torch.no_grad():
            out = net(x, oh)
    voxels = np.clip(out[0, 0].numpy(), -1.0, 1.0)
    return StatMap(
        voxels=voxels,
        domain=target,
        group_id=source.group_id,
        task_id=source.task_id,
        normalized=True,
    )


def save_gan(handle: GanHandle, path: str) -> None:
    torch.save({name: net.state_dict() for name, net in handle.nets.items()}, path)
    manifest = {
        "kind": handle.kind,
        "direction": list(handle.direction) if handle.direction else None,
        "K": len(handle.domains),
        "lambdas": {
            "rec": handle.config.lambda_rec,
            "cyc": handle.config.lambda_cyc,
            "cls": handle.config.lambda_cls,
        },
        "epochs": handle.config.epochs,
        "lr": handle.config.lr,
        "seed": handle.config.seed,
        "arch": {"base_channels": handle.config.base_channels, "n_res_blocks": handle.config.n_res_blocks},
        "input_shape": list(handle.input_shape),
        "domains": [{"index": d.index, "name": d.name} for d in handle.domains],
        "task_id": handle.task_id,
    }
    with open(path + ".json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_gan(path: str) -> GanHandle:
    manifest_path = path + ".json"
    if not (os.path.exists(path) and os.path.exists(manifest_path)):
        raise NoWeights(f"missing checkpoint {path} (+.json)")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        m = json.load(fh)
    config = GanFrameworkConfig(
        kind=m["kind"],
        lambda_rec=m["lambdas"]["rec"],
        lambda_cyc=m["lambdas"]["cyc"],
        lambda_cls=m["lambdas"]["cls"],
        epochs=m["epochs"],
        lr=m["lr"],
        seed=m["seed"],
        direction=tuple(m["direction"]) if m["direction"] else None,
        base_channels=m["arch"]["base_channels"],
        n_res_blocks=m["arch"]["n_res_blocks"],
    )
    k = m["K"]
    base, blocks = config.base_channels, config.n_res_blocks
    if m["kind"] == "pix2pix":
        nets = {"G": UNetGenerator3D(base=base), "D": PatchDiscriminator3D(in_channels=2, base=base)}
    elif m["kind"] == "cyclegan":
        nets = {
            "G_ab": ResnetGenerator3D(base=base, n_blocks=blocks),
            "G_ba": ResnetGenerator3D(base=base, n_blocks=blocks),
            "D_a": PatchDiscriminator3D(base=base),
            "D_b": PatchDiscriminator3D(base=base),
        }
    else:
        nets = {
            "G": ResnetGenerator3D(base=base, n_blocks=blocks, label_channels=k),
            "D": PatchDiscriminator3D(base=base, n_domains=k),
        }
    states = torch.load(path, weights_only=True)
    for name, net in nets.items():
        net.load_state_dict(states[name])
        net.eval()
    return GanHandle(
        kind=m["kind"],
        nets=nets,
        domains=[DomainLabel(d["index"], d["name"]) for d in m["domains"]],
        direction=tuple(m["direction"]) if m["direction"] else None,
        config=config,
        input_shape=tuple(m["input_shape"]),
        task_id=m.get("task_id", ""),
    )
