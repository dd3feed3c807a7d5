"""Toy conditional diffusion backbone.

Cosine noise schedule, a three-level UNet denoiser with decoupled
cross-attention over text / image-semantic / identity token streams at the
8x8 level, a deterministic DDIM sampler with classifier-free guidance, and the
pixel <-> latent codec (identity scaling or a small convolutional autoencoder).

Timesteps are 1-based: ``t`` in 1..T indexes ``alphas_bar[t - 1]`` and t = 0 is
the clean signal with alpha_bar = 1.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .mmic import D_COND

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedule and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alphas_bar: np.ndarray  # alphas_bar[t - 1] for t = 1..T
    sigmas: np.ndarray  # guidance step size sqrt(1 - alpha_bar(t - 1)) for t = 1..T

    def __post_init__(self):
        ab = np.asarray(self.alphas_bar, dtype=np.float64)
        if len(ab) != self.T or len(self.sigmas) != self.T:
            raise ValueError("schedule vectors must have length T")
        if not np.all((ab > 0) & (ab <= 1)):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(np.asarray(self.sigmas) < 0):
            raise ValueError("sigmas must be non-negative")

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        betas = np.array([min(1 - f((t + 1) / T) / f(t / T), max_beta) for t in range(T)])
        ab = np.cumprod(1.0 - betas)
        prev = np.concatenate([[1.0], ab[:-1]])
        return cls(T, ab, np.sqrt(1.0 - prev))

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alphas_bar[t - 1])

    def guidance_sigma(self, t_prev: int) -> float:
        """Step size of the identity-guidance update applied to a state at ``t_prev``."""
        return math.sqrt(1.0 - self.alpha_bar(t_prev))

    def sampling_timesteps(self, steps: int) -> list[int]:
        """``steps`` evenly spaced timesteps from T down to T/steps."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}]")
        return [int(round(k * self.T / steps)) for k in range(steps, 0, -1)]


@dataclass
class LatentState:
    z: torch.Tensor  # B x C x H x W
    t: int


def predict_x0(state: LatentState, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x0 estimate (z - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    if not 1 <= state.t <= schedule.T:
        raise ValueError(f"predict_x0 needs 1 <= t <= {schedule.T}, got {state.t}")
    ab = schedule.alpha_bar(state.t)
    return (state.z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def q_sample(x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    ab = torch.as_tensor(schedule.alphas_bar, dtype=x0.dtype)[t - 1].view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


def ddim_update(z: torch.Tensor, eps: torch.Tensor, t: int, next_t: int, schedule: NoiseSchedule,
                clip_x0: float | None = None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM move from ``t`` to ``next_t``."""
    ab, ab_next = schedule.alpha_bar(t), schedule.alpha_bar(next_t)
    x0 = (z - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    if clip_x0 is not None:
        x0 = x0.clamp(-clip_x0, clip_x0)
        eps = (z - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
    return math.sqrt(ab_next) * x0 + math.sqrt(1 - ab_next) * eps


# ---------------------------------------------------------------------------
# conditioning and decoupled attention
# ---------------------------------------------------------------------------


@dataclass
class ConditionBundle:
    """Text, image-semantic and identity token streams (B x N x D_c each).

    A stream of ``None`` or with zero rows is absent and contributes nothing.
    """

    text: torch.Tensor | None = None
    image: torch.Tensor | None = None
    identity: torch.Tensor | None = None
    lambda_image: float = 1.0
    lambda_id: float = 1.0
    text_mask: torch.Tensor | None = None  # B x N_t, False on pad tokens

    def with_text(self, text, text_mask=None) -> "ConditionBundle":
        return replace(self, text=text, text_mask=text_mask)

    def index(self, idx) -> "ConditionBundle":
        pick = lambda x: None if x is None else x[idx]  # noqa: E731
        return replace(self, text=pick(self.text), image=pick(self.image), identity=pick(self.identity),
                       text_mask=pick(self.text_mask))


def _present(x) -> bool:
    return x is not None and x.shape[-2] > 0


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None):
    """softmax(q k^T / sqrt(d)) v with an optional key validity mask (B x N_k)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
    return scores.softmax(dim=-1) @ v


def decoupled_attention(q: torch.Tensor, bundle: ConditionBundle, weights) -> torch.Tensor:
    """Attn(q, text) + lambda_image * Attn(q, image) + lambda_id * Attn(q, identity).

    ``weights`` provides bias-free linear maps ``to_k``/``to_v`` (text),
    ``to_k_img``/``to_v_img`` and ``to_k_id``/``to_v_id``.
    """
    out = torch.zeros(*q.shape[:-1], weights.to_v.out_features, dtype=q.dtype)
    streams = (
        (bundle.text, weights.to_k, weights.to_v, 1.0, bundle.text_mask),
        (bundle.image, weights.to_k_img, weights.to_v_img, bundle.lambda_image, None),
        (bundle.identity, getattr(weights, "to_k_id", None), getattr(weights, "to_v_id", None),
         bundle.lambda_id, None),
    )
    for c, to_k, to_v, lam, mask in streams:
        if not _present(c) or lam == 0:
            continue
        if to_k is None:
            raise ValueError("identity stream given but the model has no identity projections")
        if c.shape[-1] != to_k.in_features:
            raise ValueError(f"stream width {c.shape[-1]} != projection width {to_k.in_features}")
        a = attention(q, to_k(c), to_v(c), mask)
        out = out + (a if lam == 1.0 else lam * a)
    return out


class CrossAttention(nn.Module):
    def __init__(self, channels: int, d_cond: int = D_COND, d_attn: int = 64, identity: bool = True):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, d_attn, bias=False)
        self.to_k = nn.Linear(d_cond, d_attn, bias=False)
        self.to_v = nn.Linear(d_cond, d_attn, bias=False)
        self.to_k_img = nn.Linear(d_cond, d_attn, bias=False)
        self.to_v_img = nn.Linear(d_cond, d_attn, bias=False)
        if identity:
            self.to_k_id = nn.Linear(d_cond, d_attn, bias=False)
            self.to_v_id = nn.Linear(d_cond, d_attn, bias=False)
        self.to_out = nn.Linear(d_attn, channels)

    def forward(self, h: torch.Tensor, bundle: ConditionBundle) -> torch.Tensor:
        b, c, hh, ww = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)
        out = self.to_out(decoupled_attention(self.to_q(x), bundle, self))
        return h + out.transpose(1, 2).reshape(b, c, hh, ww)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


DEFAULT_DENOISER = {"in_channels": 3, "channels": (24, 48, 96), "d_cond": D_COND, "d_attn": 64,
                    "t_dim": 128, "identity": True}


class Denoiser(nn.Module):
    """Three-level UNet; decoupled cross-attention sits at the lowest resolution."""

    def __init__(self, config: dict | None = None):
        super().__init__()
        cfg = dict(DEFAULT_DENOISER, **(config or {}))
        cfg["channels"] = tuple(cfg["channels"])
        self.config = cfg
        c1, c2, c3 = cfg["channels"]
        cin, td = cfg["in_channels"], cfg["t_dim"]
        self.t_mlp = nn.Sequential(nn.Linear(64, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cin, c1, 3, padding=1)
        self.rb1 = ResBlock(c1, c1, td)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.rb2 = ResBlock(c2, c2, td)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.rb3 = ResBlock(c3, c3, td)
        self.attn = CrossAttention(c3, cfg["d_cond"], cfg["d_attn"], cfg["identity"])
        self.rb4 = ResBlock(c3, c3, td)
        self.up2 = nn.Conv2d(c3, c2, 3, padding=1)
        self.rb5 = ResBlock(2 * c2, c2, td)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.rb6 = ResBlock(2 * c1, c1, td)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, cin, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z: torch.Tensor, t: torch.Tensor, bundle: ConditionBundle) -> torch.Tensor:
        temb = self.t_mlp(timestep_embedding(t, 64))
        h1 = self.rb1(self.conv_in(z), temb)
        h2 = self.rb2(self.down1(h1), temb)
        h = self.rb3(self.down2(h2), temb)
        h = self.rb4(self.attn(h, bundle), temb)
        h = self.rb5(torch.cat([self.up2(F.interpolate(h, scale_factor=2.0)), h2], 1), temb)
        h = self.rb6(torch.cat([self.up1(F.interpolate(h, scale_factor=2.0)), h1], 1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))

    def init_identity_from_image(self) -> None:
        """Identity-stream projections start as copies of the image-stream ones."""
        with torch.no_grad():
            self.attn.to_k_id.weight.copy_(self.attn.to_k_img.weight)
            self.attn.to_v_id.weight.copy_(self.attn.to_v_img.weight)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _cat_bundles(a: ConditionBundle, b: ConditionBundle) -> ConditionBundle:
    def cat(x, y):
        if x is None and y is None:
            return None
        return torch.cat([x, y])

    return ConditionBundle(cat(a.text, b.text), cat(a.image, b.image), cat(a.identity, b.identity),
                           a.lambda_image, a.lambda_id, cat(a.text_mask, b.text_mask))


def unconditional(bundle: ConditionBundle) -> ConditionBundle:
    """Same image / identity streams with the text stream replaced by zeros."""
    return bundle.with_text(torch.zeros_like(bundle.text), torch.ones_like(bundle.text_mask))


def guided_eps(model: Denoiser, z: torch.Tensor, t: int, bundle: ConditionBundle, cfg_scale: float) -> torch.Tensor:
    """eps_uncond + cfg_scale * (eps_cond - eps_uncond), uncond = zeroed text stream."""
    tt = torch.full((z.shape[0],), t, dtype=torch.long)
    with torch.no_grad():
        if cfg_scale == 1.0:
            return model(z, tt, bundle)
        if cfg_scale == 0.0:
            return model(z, tt, unconditional(bundle))
        both = model(torch.cat([z, z]), torch.cat([tt, tt]), _cat_bundles(bundle, unconditional(bundle)))
        eps_c, eps_u = both.chunk(2)
        return eps_u + cfg_scale * (eps_c - eps_u)


def ddim_step(state: LatentState, model: Denoiser, bundle: ConditionBundle, cfg_scale: float, next_t: int,
              schedule: NoiseSchedule, clip_x0: float | None = None) -> tuple[LatentState, torch.Tensor]:
    """One guided DDIM step; returns the new state and the guided eps used."""
    if not next_t < state.t:
        raise ValueError(f"next_t ({next_t}) must be below t ({state.t})")
    eps = guided_eps(model, state.z, state.t, bundle, cfg_scale)
    return LatentState(ddim_update(state.z, eps, state.t, next_t, schedule, clip_x0), next_t), eps


def ddim_sample(model: Denoiser, bundle: ConditionBundle, schedule: NoiseSchedule, z_T: torch.Tensor,
                steps: int = 50, cfg_scale: float = 5.0, clip_x0: float | None = 1.0) -> torch.Tensor:
    ts = schedule.sampling_timesteps(steps)
    state = LatentState(z_T, ts[0])
    for i, t in enumerate(ts):
        next_t = ts[i + 1] if i + 1 < len(ts) else 0
        state, _ = ddim_step(state, model, bundle, cfg_scale, next_t, schedule, clip_x0)
    return state.z


# ---------------------------------------------------------------------------
# pixel <-> latent codec
# ---------------------------------------------------------------------------


class AutoEncoder(nn.Module):
    """3 x 32 x 32 <-> 4 x 16 x 16."""

    def __init__(self, latent_channels: int = 4, width: int = 64):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2.0, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )


@dataclass
class LatentCodec:
    """``pixel`` mode maps [0, 1] <-> [-1, 1]; ``autoencoder`` mode uses a trained AE."""

    mode: str = "pixel"
    autoencoder: AutoEncoder | None = None

    def __post_init__(self):
        if self.mode not in ("pixel", "autoencoder"):
            raise ValueError(f"unknown latent mode {self.mode!r}")
        if self.mode == "autoencoder" and self.autoencoder is None:
            raise ValueError("autoencoder mode needs a trained autoencoder")

    def latent_shape(self, image_size: int = 32) -> tuple[int, int, int]:
        if self.mode == "pixel":
            return (3, image_size, image_size)
        return (self.autoencoder.latent_channels, image_size // 2, image_size // 2)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        if self.mode == "pixel":
            return images * 2.0 - 1.0
        return self.autoencoder.encoder(images * 2.0 - 1.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """Differentiable decode without the [0, 1] clamp (used for identity gradients)."""
        expected = self.latent_shape(z.shape[-1] * (1 if self.mode == "pixel" else 2))
        if z.dim() != 4 or tuple(z.shape[1:]) != expected:
            raise ValueError(f"latent of shape {tuple(z.shape)} does not match codec {expected}")
        if self.mode == "pixel":
            return (z + 1.0) * 0.5
        return (self.autoencoder.decoder(z) + 1.0) * 0.5

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)


def train_autoencoder(images: torch.Tensor, seed: int, steps: int = 3000, batch_size: int = 64,
                      lr: float = 2e-3) -> AutoEncoder:
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    ae = AutoEncoder()
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    x_all = images * 2.0 - 1.0
    for step in range(steps):
        idx = torch.randint(len(x_all), (batch_size,), generator=g)
        x = x_all[idx]
        loss = F.mse_loss(ae.decoder(ae.encoder(x)), x)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"autoencoder loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0:
            logger.info("autoencoder step %d loss %.5f", step, loss.item())
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    return ae


# ---------------------------------------------------------------------------
# EMA helper and checkpoint io
# ---------------------------------------------------------------------------


class EMA:
    def __init__(self, module: nn.Module, decay: float):
        self.decay = decay
        self.shadow = copy.deepcopy(module)
        for p in self.shadow.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, module: nn.Module, decay: float | None = None):
        d = self.decay if decay is None else decay
        for s, p in zip(self.shadow.parameters(), module.parameters()):
            s.mul_(d).add_(p.detach(), alpha=1 - d)
        for s, b in zip(self.shadow.buffers(), module.buffers()):
            s.copy_(b)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def save_denoiser(path: str, model: Denoiser, manifest: dict) -> None:
    cfg = dict(model.config, channels=list(model.config["channels"]))
    save_checkpoint(path, model.state_dict(), dict(manifest, kind="denoiser", config=cfg))


def load_denoiser(path: str) -> tuple[Denoiser, dict]:
    state, manifest = load_checkpoint(path)
    model = Denoiser(manifest["config"])
    model.load_state_dict(state)
    return freeze(model), manifest


def save_autoencoder(path: str, ae: AutoEncoder, manifest: dict) -> None:
    save_checkpoint(path, ae.state_dict(), dict(manifest, kind="autoencoder",
                                                latent_channels=ae.latent_channels))


def load_autoencoder(path: str) -> AutoEncoder:
    state, manifest = load_checkpoint(path)
    ae = AutoEncoder(manifest["latent_channels"])
    ae.load_state_dict(state)
    return freeze(ae)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    text_drop: float = 0.1
    image_drop: float = 0.1
    augmented_prob: float = 0.5
    background_fraction: float = 0.5
    background_prob: float = 0.25
    ema_decay: float = 0.999
    denoiser: dict = field(default_factory=dict)
    log_every: int = 200


@dataclass
class PretrainResult:
    denoiser: Denoiser
    text_encoder: nn.Module
    image_head: nn.Module
    losses: list[float]
    stats: dict


class ReferenceSampler:
    """Draws same-identity reference images (another sample when one exists)."""

    def __init__(self, corpus):
        ids = np.array([s.attrs.identity_id for s in corpus])
        self.groups = {c: np.flatnonzero(ids == c) for c in np.unique(ids)}
        self.ids = ids

    def __call__(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = np.empty_like(idx)
        for j, i in enumerate(idx):
            g = self.groups[self.ids[i]]
            others = g[g != i]
            out[j] = rng.choice(others) if len(others) else i
        return out


def training_prompts(samples, rng: np.random.Generator, augmented_prob: float):
    """Scene prompt matching each sample's background, with its face description appended
    with probability ``augmented_prob``.  Returns (prompts, augmented flags)."""
    from .mmic import augment_prompt, describe_face, sample_training_prompt, tokenize, wrap_prompt

    prompts, flags = [], []
    for s in samples:
        p = tokenize(wrap_prompt(sample_training_prompt(s.attrs.background_id, rng)))
        aug = rng.random() < augmented_prob
        prompts.append(augment_prompt(p, describe_face(s.attrs)) if aug else p)
        flags.append(aug)
    return prompts, flags


def reference_images(corpus, idx, rng, fraction: float, prob: float) -> tuple[torch.Tensor, int]:
    from .frzoo import to_tensor
    from .synthface import background_dropout

    out, dropped = [], 0
    for i in idx:
        s = background_dropout(corpus[i], fraction, prob, rng)
        dropped += s is not corpus[i]
        out.append(s.image)
    return to_tensor(np.stack(out)), dropped


def pretrain_backbone(corpus, schedule: NoiseSchedule, config: PretrainConfig, seed: int, semantic_model,
                      codec: LatentCodec | None = None, on_batch=None) -> PretrainResult:
    """Train denoiser, text encoder and image-semantic head jointly on the eps-prediction loss.

    Per sample: the text stream is zeroed with probability ``text_drop`` and the
    image stream with ``image_drop``; the reference face feeding the image
    stream is a same-identity sample with background dropout applied with
    probability ``background_prob``.  ``on_batch(bundle, info)`` observes every
    training batch.
    """
    from .frzoo import to_tensor
    from .mmic import ImageSemanticHead, TextEncoder, encode_text

    codec = codec or LatentCodec("pixel")
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)

    den_cfg = dict(config.denoiser)
    den_cfg.setdefault("in_channels", codec.latent_shape()[0])
    model = Denoiser(den_cfg)
    text_enc = TextEncoder()
    head = ImageSemanticHead(semantic_model.net.feature_dim)
    modules = nn.ModuleList([model, text_enc, head])
    opt = torch.optim.AdamW(modules.parameters(), lr=config.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=config.steps, pct_start=0.05)
    ema = EMA(modules, config.ema_decay)

    with torch.no_grad():
        x0_all = codec.encode(to_tensor(np.stack([s.image for s in corpus])))
    refs = ReferenceSampler(corpus)
    losses: list[float] = []
    stats = {"samples": 0, "text_dropped": 0, "image_dropped": 0, "background_dropped": 0, "augmented": 0}
    modules.train()
    for step in range(config.steps):
        idx = rng.integers(len(corpus), size=config.batch_size)
        ref_idx = refs(idx, rng)
        ref_img, n_bg = reference_images(corpus, ref_idx, rng, config.background_fraction, config.background_prob)
        prompts, aug = training_prompts([corpus[i] for i in idx], rng, config.augmented_prob)
        text, mask = encode_text(prompts, text_enc)
        with torch.no_grad():
            fmap = semantic_model.net.feature_map(ref_img)
        image = head(fmap)
        drop_t = torch.as_tensor(rng.random(len(idx)) < config.text_drop)
        drop_i = torch.as_tensor(rng.random(len(idx)) < config.image_drop)
        text = torch.where(drop_t[:, None, None], torch.zeros_like(text), text)
        mask = torch.where(drop_t[:, None], torch.ones_like(mask), mask)
        image = torch.where(drop_i[:, None, None], torch.zeros_like(image), image)
        bundle = ConditionBundle(text=text, image=image, text_mask=mask)

        stats["samples"] += len(idx)
        stats["text_dropped"] += int(drop_t.sum())
        stats["image_dropped"] += int(drop_i.sum())
        stats["background_dropped"] += n_bg
        stats["augmented"] += int(sum(aug))
        if on_batch is not None:
            on_batch(bundle, {"step": step, "text_dropped": drop_t, "background_dropped": n_bg})

        x0 = x0_all[torch.as_tensor(idx)]
        t = torch.randint(1, schedule.T + 1, (len(idx),), generator=g)
        noise = torch.randn(x0.shape, generator=g)
        loss = F.mse_loss(model(q_sample(x0, t, noise, schedule), t, bundle), noise)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"pretraining loss is {loss.item()} at step {step} (lr {sched.get_last_lr()[0]:.2e})")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(modules.parameters(), 1.0)
        opt.step()
        sched.step()
        ema.update(modules, min(config.ema_decay, (1 + step) / (10 + step)))
        losses.append(loss.item())
        if config.log_every and step % config.log_every == 0:
            logger.info("pretrain step %d loss %.4f", step, float(np.mean(losses[-config.log_every:])))

    model, text_enc, head = ema.shadow
    if model.config["identity"]:
        model.init_identity_from_image()
    return PretrainResult(freeze(model), freeze(text_enc), freeze(head), losses, stats)
