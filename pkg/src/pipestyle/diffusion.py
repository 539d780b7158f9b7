"""Conditional DDPM for pipeline transfer.

The forward process, epsilon-prediction objective and ancestral sampler
follow the standard DDPM formulation with a linear beta schedule; sampling
combines conditional and unconditional noise predictions classifier-free
style. Pipeline transfer does not start from pure noise: the source map is
pushed to ``t_start`` with the closed-form forward process and then denoised
under the target-domain condition, which preserves the source content while
restyling it.

A noise-prediction "model" anywhere in this module is a callable
``model(x_t, t, cond) -> eps_hat`` on numpy arrays, where ``x_t`` may carry a
leading batch axis and ``cond=None`` requests the unconditional (null)
prediction. Stub callables work; :class:`DiffusionHandle` wraps the trained
3D U-Net behind the same interface.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .classifier import ClassifierHandle, ConditionVector
from .errors import (
    CondKindMismatch,
    EmptyPool,
    InvalidRange,
    NoWeights,
    NTooLarge,
    OutOfRangeT,
)
from .seeds import substream
from .volume import DomainLabel, StatMap

ALL_TARGETS = "all"


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-timestep beta/alpha tables; index t runs 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def _at(self, table: np.ndarray, t: int) -> float:
        if not 1 <= t <= self.T:
            raise OutOfRangeT(f"t={t} outside [1, {self.T}]")
        return float(table[t - 1])

    def beta_at(self, t: int) -> float:
        return self._at(self.beta, t)

    def alpha_at(self, t: int) -> float:
        return self._at(self.alpha, t)

    def alpha_bar_at(self, t: int) -> float:
        return self._at(self.alpha_bar, t)

    def posterior_var_at(self, t: int) -> float:
        return self._at(self.posterior_var, t)


@dataclass
class NoiseSample:
    """An i.i.d. standard-normal draw with its seed lineage."""

    eps: np.ndarray
    seed: int | None = None


@dataclass
class NoisyVolume:
    x_t: np.ndarray
    t: int


@dataclass(frozen=True)
class GuidanceConfig:
    """Sampling/training knobs the paper leaves unstated (all configurable)."""

    w: float = 2.0
    p_uncond: float = 0.1
    t_start: int | None = None  # None -> schedule.T

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance scale w must be >= 0")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ValueError("p_uncond must be in [0, 1)")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule with the DDPM posterior variance table."""
    if T < 2:
        raise InvalidRange(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise InvalidRange(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    i = np.arange(T, dtype=np.float64)
    beta = beta_start + i / (T - 1) * (beta_end - beta_start)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=posterior_var)


def _voxels(x) -> np.ndarray:
    if isinstance(x, StatMap):
        return x.voxels
    if isinstance(x, NoisyVolume):
        return x.x_t
    return np.asarray(x)


def forward_diffuse(x0, t: int, eps: NoiseSample, schedule: DiffusionSchedule) -> NoisyVolume:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    ab = schedule.alpha_bar_at(t)
    x = _voxels(x0).astype(np.float64)
    e = np.asarray(eps.eps, dtype=np.float64)
    return NoisyVolume(x_t=np.sqrt(ab) * x + np.sqrt(1.0 - ab) * e, t=t)


def invert_forward(x_t: NoisyVolume, eps: NoiseSample, schedule: DiffusionSchedule) -> np.ndarray:
    """Algebraic inversion x0 = (x_t - sqrt(1-abar_t) eps) / sqrt(abar_t)."""
    ab = schedule.alpha_bar_at(x_t.t)
    return (x_t.x_t - np.sqrt(1.0 - ab) * np.asarray(eps.eps)) / np.sqrt(ab)


def guided_noise(x_t, t: int, cond: ConditionVector | None, w: float, model) -> np.ndarray:
    """Classifier-free combination (1+w) eps(cond) - w eps(null)."""
    x = _voxels(x_t)
    cond_pred = np.asarray(model(x, t, cond), dtype=np.float64)
    if w == 0.0:
        return cond_pred
    null_pred = np.asarray(model(x, t, None), dtype=np.float64)
    return (1.0 + w) * cond_pred - w * null_pred


def reverse_step(
    x_t,
    t: int,
    eps_hat: np.ndarray,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral step; posterior variance, no noise at t=1."""
    x = _voxels(x_t).astype(np.float64)
    a = schedule.alpha_at(t)
    ab = schedule.alpha_bar_at(t)
    b = schedule.beta_at(t)
    mean = (x - b / np.sqrt(1.0 - ab) * np.asarray(eps_hat, dtype=np.float64)) / np.sqrt(a)
    if t == 1:
        return mean
    sigma = np.sqrt(schedule.posterior_var_at(t))
    return mean + sigma * rng.standard_normal(x.shape)


def training_step(
    model,
    x0,
    cond: ConditionVector | None,
    schedule: DiffusionSchedule,
    guidance: GuidanceConfig,
    rng: np.random.Generator,
) -> float:
    """One epsilon-prediction objective evaluation (stub-friendly, no grads).

    Samples t uniform on [1, T] and fresh standard normal noise; with
    probability p_uncond the condition is dropped to the null embedding.
    """
    x = _voxels(x0).astype(np.float64)
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(x.shape)
    x_t = forward_diffuse(x, t, NoiseSample(eps), schedule).x_t
    use_null = rng.random() < guidance.p_uncond
    pred = np.asarray(model(x_t, t, None if use_null else cond), dtype=np.float64)
    return float(np.mean((pred - eps) ** 2))


def sample_transfer(
    source: StatMap,
    cond: ConditionVector,
    guidance: GuidanceConfig,
    schedule: DiffusionSchedule,
    model,
    rng: np.random.Generator,
) -> StatMap:
    """Restyle one source map into the condition's target domain."""
    out = sample_transfer_batch(
        source.voxels[None].astype(np.float64), cond, guidance, schedule, model, rng
    )[0]
    target = cond.target_domain if cond.target_domain is not None else source.domain
    return StatMap(
        voxels=out.astype(np.float32),
        domain=target,
        group_id=source.group_id,
        task_id=source.task_id,
        normalized=True,
    )


def sample_transfer_batch(
    sources: np.ndarray,
    cond: ConditionVector,
    guidance: GuidanceConfig,
    schedule: DiffusionSchedule,
    model,
    rng: np.random.Generator,
) -> np.ndarray:
    """Batched transfer sampler over [B, nx, ny, nz] arrays."""
    t_start = guidance.t_start if guidance.t_start is not None else schedule.T
    if not 1 <= t_start <= schedule.T:
        raise OutOfRangeT(f"t_start={t_start} outside [1, {schedule.T}]")
    eps0 = rng.standard_normal(sources.shape)
    x = forward_diffuse(sources, t_start, NoiseSample(eps0), schedule).x_t
    for t in range(t_start, 0, -1):
        eps_hat = guided_noise(x, t, cond, guidance.w, model)
        x = reverse_step(x, t, eps_hat, schedule, rng)
    return np.clip(x, -1.0, 1.0)


def make_condition(
    target: DomainLabel,
    mode: str,
    K: int | None = None,
    n_targets: int | str = 1,
    target_pool: list[StatMap] | None = None,
    classifier: ClassifierHandle | None = None,
    rng: np.random.Generator | None = None,
) -> ConditionVector:
    """Build the conditioning payload for a transfer into ``target``.

    one_hot: indicator of the target index over K classes. latent: mean
    classifier latent of n_targets images sampled from the target pool
    (``n_targets="all"`` averages the whole pool, i.e. the domain centroid).
    """
    if mode == "one_hot":
        k = K if K is not None else (classifier.K if classifier is not None else None)
        if k is None:
            raise ValueError("one_hot mode needs K (or a classifier)")
        payload = np.zeros(k, dtype=np.float32)
        payload[target.index] = 1.0
        return ConditionVector(
            payload=payload, kind="one_hot", source=f"one-hot of domain {target.name}", target_domain=target
        )
    if mode != "latent":
        raise CondKindMismatch(f"unknown condition mode {mode!r}")
    if classifier is None:
        raise ValueError("latent mode needs a trained classifier")
    if not target_pool:
        raise EmptyPool("latent mode needs a non-empty target pool")
    if n_targets == ALL_TARGETS:
        chosen = list(range(len(target_pool)))
    else:
        n = int(n_targets)
        if not 1 <= n <= len(target_pool):
            raise NTooLarge(f"n_targets={n} with pool of {len(target_pool)}")
        if rng is None:
            rng = np.random.default_rng(0)
        chosen = sorted(rng.choice(len(target_pool), size=n, replace=False).tolist())
    latents = [classifier.extract_latent(target_pool[i]).payload for i in chosen]
    payload = np.mean(np.stack(latents), axis=0)
    ids = "all" if n_targets == ALL_TARGETS else ",".join(str(i) for i in chosen)
    return ConditionVector(
        payload=payload,
        kind="latent",
        source=f"mean latent of {len(chosen)} images [{ids}] from domain {target.name}",
        target_domain=target,
    )


# ---------------------------------------------------------------------------
# Noise-prediction network
# ---------------------------------------------------------------------------

def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1))
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ConvBlock(nn.Module):
    """Two convs with group norm; the (time + condition) embedding enters as a
    per-channel bias between them."""

    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, cout), cout)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None, None]
        return self.act(self.norm2(self.conv2(h)))


class ConditionalUNet3D(nn.Module):
    """Small 3D U-Net: two downsampling and two upsampling blocks with skip
    connections; condition embedding is added to the timestep embedding."""

    def __init__(self, cond_dim: int, base_channels: int = 32, emb_dim: int = 128):
        super().__init__()
        c = base_channels
        self.cond_dim = cond_dim
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_proj = nn.Linear(cond_dim, emb_dim)
        self.null_embedding = nn.Parameter(torch.randn(emb_dim) * 0.02)

        self.enc0 = _ConvBlock(1, c, emb_dim)
        self.down1 = nn.Conv3d(c, c, 3, stride=2, padding=1)
        self.enc1 = _ConvBlock(c, 2 * c, emb_dim)
        self.down2 = nn.Conv3d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = _ConvBlock(2 * c, 4 * c, emb_dim)
        self.dec1 = _ConvBlock(4 * c + 2 * c, 2 * c, emb_dim)
        self.dec0 = _ConvBlock(2 * c + c, c, emb_dim)
        self.out = nn.Conv3d(c, 1, 3, padding=1)

    def forward(self, x, t, cond_payload, null_mask):
        """x: [B,1,...]; t: [B] int; cond_payload: [B, cond_dim];
        null_mask: [B] bool selecting the learned null embedding."""
        emb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim))
        cond_emb = self.cond_proj(cond_payload)
        cond_emb = torch.where(null_mask[:, None], self.null_embedding[None, :], cond_emb)
        emb = emb + cond_emb

        h0 = self.enc0(x, emb)
        h1 = self.enc1(self.down1(h0), emb)
        hm = self.mid(self.down2(h1), emb)
        u1 = nn.functional.interpolate(hm, size=h1.shape[2:], mode="trilinear", align_corners=False)
        d1 = self.dec1(torch.cat([u1, h1], dim=1), emb)
        u0 = nn.functional.interpolate(d1, size=h0.shape[2:], mode="trilinear", align_corners=False)
        d0 = self.dec0(torch.cat([u0, h0], dim=1), emb)
        return self.out(d0)


@dataclass
class DiffusionTrainConfig:
    T: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cond_mode: str = "one_hot"  # or "latent"
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 8
    base_channels: int = 32
    seed: int = 0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)


@dataclass
class DiffusionHandle:
    """Trained noise predictor behind the numpy model-callable interface."""

    net: ConditionalUNet3D
    schedule: DiffusionSchedule
    cond_mode: str
    cond_dim: int
    domains: list[DomainLabel]
    guidance: GuidanceConfig
    input_shape: tuple[int, int, int]
    seed: int
    config: dict = field(default_factory=dict)

    def __call__(self, x_t: np.ndarray, t: int, cond: ConditionVector | None) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float32)
        batched = x.ndim == 4
        if not batched:
            x = x[None]
        if cond is not None and cond.kind != self.cond_mode:
            raise CondKindMismatch(f"model trained with {self.cond_mode}, got {cond.kind}")
        b = x.shape[0]
        xt = torch.from_numpy(x[:, None])
        tt = torch.full((b,), int(t), dtype=torch.long)
        if cond is None:
            payload = torch.zeros(b, self.cond_dim)
            null_mask = torch.ones(b, dtype=torch.bool)
        else:
            payload = torch.from_numpy(np.tile(cond.payload.astype(np.float32), (b, 1)))
            null_mask = torch.zeros(b, dtype=torch.bool)
        self.net.eval()
        with torch.no_grad():
            eps = self.net(xt, tt, payload, null_mask)
        out = eps[:, 0].numpy().astype(np.float64)
        return out if batched else out[0]


def _condition_payloads(
    maps: list[StatMap], cond_mode: str, K: int, classifier: ClassifierHandle | None
) -> np.ndarray:
    """Training-time conditions: each map is paired with its own domain's
    condition (its one-hot index, or its own classifier latent)."""
    if cond_mode == "one_hot":
        out = np.zeros((len(maps), K), dtype=np.float32)
        for i, m in enumerate(maps):
            out[i, m.domain.index] = 1.0
        return out
    if cond_mode != "latent":
        raise CondKindMismatch(f"unknown cond_mode {cond_mode!r}")
    if classifier is None:
        raise ValueError("latent conditioning needs a trained classifier")
    return np.stack([classifier.extract_latent(m).payload for m in maps]).astype(np.float32)


def train_diffusion(
    train_maps: list[StatMap],
    domains: list[DomainLabel],
    config: DiffusionTrainConfig = DiffusionTrainConfig(),
    classifier: ClassifierHandle | None = None,
    log=None,
) -> DiffusionHandle:
    """Epsilon-prediction training with conditioning dropout."""
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    K = len(domains)
    payloads = _condition_payloads(train_maps, config.cond_mode, K, classifier)
    cond_dim = payloads.shape[1]
    torch.manual_seed(config.seed)
    net = ConditionalUNet3D(cond_dim, base_channels=config.base_channels)
    handle = DiffusionHandle(
        net=net,
        schedule=schedule,
        cond_mode=config.cond_mode,
        cond_dim=cond_dim,
        domains=list(domains),
        guidance=config.guidance,
        input_shape=train_maps[0].shape,
        seed=config.seed,
        config={
            "T": config.T,
            "beta_start": config.beta_start,
            "beta_end": config.beta_end,
            "epochs": config.epochs,
            "lr": config.lr,
            "batch_size": config.batch_size,
            "base_channels": config.base_channels,
        },
    )
    x_all = torch.from_numpy(np.stack([m.voxels for m in train_maps])[:, None].astype(np.float32))
    c_all = torch.from_numpy(payloads)
    sqrt_ab = torch.from_numpy(np.sqrt(schedule.alpha_bar).astype(np.float32))
    sqrt_1mab = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bar).astype(np.float32))
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = substream(config.seed, "diffusion-train")
    n = len(train_maps)
    for epoch in range(config.epochs):
        net.train()
        perm = rng.permutation(n)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(perm[start : start + config.batch_size].copy())
            x0 = x_all[idx]
            b = x0.shape[0]
            t_idx = torch.from_numpy(rng.integers(0, config.T, size=b))  # 0-based
            eps = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
            x_t = sqrt_ab[t_idx][:, None, None, None, None] * x0 + sqrt_1mab[t_idx][:, None, None, None, None] * eps
            null_mask = torch.from_numpy(rng.random(b) < config.guidance.p_uncond)
            pred = net(x_t, t_idx + 1, c_all[idx], null_mask)
            loss = nn.functional.mse_loss(pred, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if log is not None:
                log(epoch=epoch, batch=bi, loss=float(loss.detach()))
    return handle


def transfer_handle(
    dm: DiffusionHandle,
    target_pools: dict[str, list[StatMap]] | None = None,
    classifier: ClassifierHandle | None = None,
    n_targets: int | str = ALL_TARGETS,
    seed: int = 0,
    task_id: str | None = None,
):
    """Wrap a trained DM as a uniform ``(source, target) -> StatMap`` callable.

    Latent-mode handles draw their condition from the target pool (fresh
    seeded draw per call unless n_targets="all", which uses the centroid).
    """
    from .evaluation import TransferHandle

    call_rng = substream(seed, "dm-transfer")

    def fn(source: StatMap, target: DomainLabel) -> StatMap:
        if dm.cond_mode == "one_hot":
            cond = make_condition(target, "one_hot", K=len(dm.domains))
        else:
            pool = (target_pools or {}).get(target.name)
            if not pool:
                raise EmptyPool(f"no target pool for domain {target.name}")
            cond = make_condition(
                target, "latent", n_targets=n_targets, target_pool=pool,
                classifier=classifier, rng=call_rng,
            )
        return sample_transfer(source, cond, dm.guidance, dm.schedule, dm, call_rng)

    return TransferHandle(fn=fn, domains=dm.domains, task_id=task_id, name=f"ddpm-{dm.cond_mode}")


def save_diffusion(handle: DiffusionHandle, path: str) -> None:
    torch.save(handle.net.state_dict(), path)
    manifest = {
        "kind": "ddpm",
        "T": handle.schedule.T,
        "beta_start": float(handle.schedule.beta[0]),
        "beta_end": float(handle.schedule.beta[-1]),
        "cond_kind": handle.cond_mode,
        "cond_dim": handle.cond_dim,
        "w": handle.guidance.w,
        "p_uncond": handle.guidance.p_uncond,
        "t_start": handle.guidance.t_start,
        "arch": {"base_channels": handle.config.get("base_channels", 32), "blocks": 2},
        "seed": handle.seed,
        "input_shape": list(handle.input_shape),
        "domains": [{"index": d.index, "name": d.name} for d in handle.domains],
        "train_config": handle.config,
    }
    with open(path + ".json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_diffusion(path: str) -> DiffusionHandle:
    manifest_path = path + ".json"
    if not (os.path.exists(path) and os.path.exists(manifest_path)):
        raise NoWeights(f"missing checkpoint {path} (+.json)")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        m = json.load(fh)
    net = ConditionalUNet3D(m["cond_dim"], base_channels=m["arch"]["base_channels"])
    net.load_state_dict(torch.load(path, weights_only=True))
    net.eval()
    return DiffusionHandle(
        net=net,
        schedule=make_schedule(m["T"], m["beta_start"], m["beta_end"]),
        cond_mode=m["cond_kind"],
        cond_dim=m["cond_dim"],
        domains=[DomainLabel(d["index"], d["name"]) for d in m["domains"]],
        guidance=GuidanceConfig(w=m["w"], p_uncond=m["p_uncond"], t_start=m["t_start"]),
        input_shape=tuple(m["input_shape"]),
        seed=m["seed"],
        config=m.get("train_config", {}),
    )
