"""Protected portrait generation: a scene-prompt stage followed by a
description-augmented stage, with identity injection and per-step identity
guidance, plus training of the identity projector on a frozen backbone."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (ConditionBundle, Denoiser, LatentCodec, LatentState, NoiseSchedule, ReferenceSampler,
                       ddim_update, guided_eps, q_sample, reference_images, training_prompts)
from .checkpoint import derive_seed, module_checksum
from .encryptor import EncryptedIdentity, IdProjector, fuse_identity, project_identity
from .enhancer import GuidanceConfig, GuidanceTrace, guidance_step
from .frzoo import FRModel, to_tensor
from .mmic import (VOCABULARY, augment_prompt, describe_images, encode_image_semantic, encode_text, tokenize,
                   unknown_words, wrap_prompt)

logger = logging.getLogger(__name__)

ORIGINAL, AUGMENTED = "original", "augmented"


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class ProtectionConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_s: float = 1.0
    lambda_image: float = 1.0
    lambda_id: float = 4.0
    cfg_scale: float = 5.0
    steps: int = 50
    stage2_step: int = 30
    seed: int = 0
    latent_mode: str = "pixel"
    enhancer: bool = True

    def __post_init__(self):
        for k in ("alpha", "beta", "lambda_s", "lambda_image", "lambda_id", "cfg_scale"):
            if not np.isfinite(getattr(self, k)):
                raise ValueError(f"{k} must be finite")
        if min(self.lambda_s, self.lambda_image, self.lambda_id) < 0:
            raise ValueError("attention and guidance weights must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 <= self.stage2_step <= self.steps:
            raise ValueError(f"stage2_step must lie in [0, {self.steps}]")
        if self.latent_mode not in ("pixel", "autoencoder"):
            raise ValueError(f"unknown latent mode {self.latent_mode!r}")

    def without_enhancer(self) -> "ProtectionConfig":
        return replace(self, enhancer=False)

    def without_encryptor(self) -> "ProtectionConfig":
        return replace(self, alpha=0.0, beta=0.0, lambda_id=0.0)

    def unprotected(self) -> "ProtectionConfig":
        return replace(self, alpha=0.0, beta=0.0, lambda_id=0.0, lambda_s=0.0)

    def scaled(self, k: float) -> "ProtectionConfig":
        """Encryption degree: alpha, beta and lambda_s multiplied by ``k``."""
        return replace(self, alpha=self.alpha * k, beta=self.beta * k, lambda_s=self.lambda_s * k)


@dataclass
class ModelBundle:
    schedule: NoiseSchedule
    codec: LatentCodec
    denoiser: Denoiser
    text_encoder: nn.Module
    image_head: nn.Module
    semantic: FRModel
    zoo: list[FRModel]
    surrogates: list[str]
    blackbox: list[str]
    projector: IdProjector | None = None

    @property
    def zoo_by_name(self) -> dict[str, FRModel]:
        return {m.name: m for m in self.zoo}

    @property
    def surrogate_models(self) -> list[FRModel]:
        return [self.zoo_by_name[n] for n in self.surrogates]

    @property
    def blackbox_models(self) -> list[FRModel]:
        return [self.zoo_by_name[n] for n in self.blackbox]

    def frozen_modules(self) -> dict[str, nn.Module]:
        mods = {"denoiser": self.denoiser, "text_encoder": self.text_encoder, "image_head": self.image_head,
                "semantic": self.semantic.net}
        mods.update({f"fr:{m.name}": m.net for m in self.zoo})
        if self.codec.autoencoder is not None:
            mods["autoencoder"] = self.codec.autoencoder
        return mods

    def checksums(self) -> dict[str, str]:
        out = {k: module_checksum(m) for k, m in self.frozen_modules().items()}
        if self.projector is not None:
            out["projector"] = module_checksum(self.projector)
        return out


@dataclass
class GenerationResult:
    adversarial: np.ndarray  # H x W x 3 in [0, 1]
    trace: GuidanceTrace
    conditions_used: list[str]
    config: ProtectionConfig
    seed: int
    description: str = ""
    stage_boundary: int = field(default=0)  # iteration index of the first augmented step


@dataclass
class PairFailure:
    index: int
    error: str

    def __str__(self) -> str:
        return self.error


def stage_schedule(steps: int, stage2_step: int) -> list[str]:
    """Prompt stream per iteration: the counter runs steps..1 and the scene-only
    prompt is used while it exceeds ``stage2_step``."""
    return [ORIGINAL if t > stage2_step else AUGMENTED for t in range(steps, 0, -1)]


def initial_noise(seed: int, shape: tuple[int, ...]) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g)


def check_prompt(prompt: str) -> None:
    bad = unknown_words(prompt)
    if bad:
        raise VocabularyError(f"prompt contains out-of-vocabulary words {bad}; vocabulary: "
                              + " ".join(w for w in VOCABULARY if not w.startswith("<")))


def _as_tensor(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return to_tensor(arr)


def encrypt_targets(targets: torch.Tensor, cfg: ProtectionConfig, models: ModelBundle) -> EncryptedIdentity:
    with torch.no_grad():
        enc = fuse_identity(targets, models.surrogate_models, cfg.alpha, cfg.beta, models.semantic)
        if models.projector is not None:
            project_identity(enc, models.projector)
    return enc


def build_conditions(originals: torch.Tensor, targets: torch.Tensor, prompts: list[str], cfg: ProtectionConfig,
                     models: ModelBundle):
    """(bundle with the scene-only text, augmented text stream, descriptions)."""
    for p in prompts:
        check_prompt(p)
    with torch.no_grad():
        base = [tokenize(wrap_prompt(p)) for p in prompts]
        descriptions = describe_images(originals, models.semantic)
        aug = [augment_prompt(b, d) for b, d in zip(base, descriptions)]
        text_o, mask_o = encode_text(base, models.text_encoder)
        text_a, mask_a = encode_text(aug, models.text_encoder)
        image = encode_image_semantic(originals, models.semantic, models.image_head)
    identity = None
    if cfg.lambda_id != 0:
        if models.projector is None:
            raise ValueError("identity injection requested but no projector is loaded")
        identity = encrypt_targets(targets, cfg, models).tokens
    bundle = ConditionBundle(text_o, image, identity, cfg.lambda_image, cfg.lambda_id, mask_o)
    return bundle, (text_a, mask_a), descriptions


def generate_batch(originals, targets, prompts: list[str], cfg: ProtectionConfig, models: ModelBundle,
                   seeds: list[int]) -> list[GenerationResult]:
    """Run the two-stage protected sampler on a batch; sample i uses noise from ``seeds[i]``."""
    if cfg.latent_mode != models.codec.mode:
        raise ValueError(f"config latent mode {cfg.latent_mode!r} but models use {models.codec.mode!r}")
    orig = _as_tensor(originals)
    tgt = _as_tensor(targets)
    b = len(orig)
    if not (len(tgt) == len(prompts) == len(seeds) == b):
        raise ValueError("originals, targets, prompts and seeds must align")
    bundle_o, (text_a, mask_a), descriptions = build_conditions(orig, tgt, prompts, cfg, models)
    bundle_a = bundle_o.with_text(text_a, mask_a)

    schedule, codec = models.schedule, models.codec
    shape = codec.latent_shape(orig.shape[-1])
    z = torch.stack([initial_noise(s, shape) for s in seeds])
    ts = schedule.sampling_timesteps(cfg.steps)
    stages = stage_schedule(cfg.steps, cfg.stage2_step)
    guide = GuidanceConfig(cfg.lambda_s, models.surrogate_models, cfg.enhancer)
    traces = [GuidanceTrace() for _ in range(b)]
    clip = 1.0 if codec.mode == "pixel" else None

    for i, t in enumerate(ts):
        next_t = ts[i + 1] if i + 1 < len(ts) else 0
        bundle = bundle_o if stages[i] == ORIGINAL else bundle_a
        try:
            eps = guided_eps(models.denoiser, z, t, bundle, cfg.cfg_scale)
            z = ddim_update(z, eps, t, next_t, schedule, clip)
            if guide.active:
                # x0 estimate of the updated latent, with the noise prediction taken at
                # the current timestep index
                eps_prev = guided_eps(models.denoiser, z, t, bundle, cfg.cfg_scale)
                state = guidance_step(LatentState(z, next_t), eps_prev, tgt, guide, schedule, t_coef=t,
                                      codec=codec, trace=traces)
                z = state.z
        except Exception as exc:
            raise RuntimeError(f"generation failed at iteration {i} (t={t}): {exc}") from exc

    with torch.no_grad():
        images = codec.decode(z).permute(0, 2, 3, 1).numpy()
    boundary = cfg.steps - cfg.stage2_step
    return [GenerationResult(images[k], traces[k], list(stages), cfg, seeds[k], descriptions[k], boundary)
            for k in range(b)]


def generate(original, target, scene_prompt: str, cfg: ProtectionConfig, models: ModelBundle,
             seed: int | None = None) -> GenerationResult:
    return generate_batch(original, target, [scene_prompt], cfg, models, [cfg.seed if seed is None else seed])[0]


def pair_seed(base_seed: int, index: int) -> int:
    return derive_seed(base_seed, index)


def protect_batch(pairs, cfg: ProtectionConfig, models: ModelBundle, chunk: int = 50) -> list:
    """Generate for every (original, target, prompt); pair i uses seed ``pair_seed(cfg.seed, i)``.

    Failed pairs appear in the output as PairFailure entries; order follows input.
    """
    results: list = [None] * len(pairs)
    for start in range(0, len(pairs), chunk):
        idx = list(range(start, min(start + chunk, len(pairs))))
        try:
            out = generate_batch(np.stack([pairs[i][0] for i in idx]), np.stack([pairs[i][1] for i in idx]),
                                 [pairs[i][2] for i in idx], cfg, models, [pair_seed(cfg.seed, i) for i in idx])
            for i, r in zip(idx, out):
                results[i] = r
        except Exception:
            for i in idx:  # isolate the failing pairs
                try:
                    results[i] = generate(pairs[i][0], pairs[i][1], pairs[i][2], cfg, models, pair_seed(cfg.seed, i))
                except Exception as exc:
                    logger.warning("pair %d failed: %s", i, exc)
                    results[i] = PairFailure(i, f"{type(exc).__name__}: {exc}")
    return results


# ---------------------------------------------------------------------------
# projector training
# ---------------------------------------------------------------------------


@dataclass
class ProjectorTrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 3e-3
    text_drop: float = 0.1
    image_drop: float = 1.0
    augmented_prob: float = 0.0
    background_fraction: float = 0.5
    background_prob: float = 0.25
    alpha: float = 1.0
    beta: float = 1.0
    hidden: int = 256
    max_timestep: int | None = 600  # train on t <= max_timestep, where conditioning affects the loss most


@dataclass
class ProjectorTrainResult:
    projector: IdProjector
    epoch_losses: list[float]
    stats: dict
    checksums_before: dict
    checksums_after: dict


def train_projector(corpus, models: ModelBundle, config: ProjectorTrainConfig, seed: int,
                    on_batch=None) -> ProjectorTrainResult:
    """Fit the identity projector on the denoising loss with every other module frozen.

    The identity condition of each sample is encrypted from another image of
    the same identity; the image-semantic stream is dropped with probability
    ``image_drop`` so that identity has to come through the projector.
    """
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    before = {k: module_checksum(m) for k, m in models.frozen_modules().items()}
    for m in models.frozen_modules().values():
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)

    d_in = models.semantic.net.feature_dim
    proj = IdProjector(d_in, hidden=config.hidden)
    opt = torch.optim.AdamW(proj.parameters(), lr=config.lr, weight_decay=0.0)
    steps_per_epoch = max(1, len(corpus) // config.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=config.epochs * steps_per_epoch,
                                                pct_start=0.1)
    images = to_tensor(np.stack([s.image for s in corpus]))
    with torch.no_grad():
        x0_all = models.codec.encode(images)
        raw_all = torch.cat([fuse_identity(images[i:i + 256], models.surrogate_models, config.alpha, config.beta,
                                           models.semantic).raw for i in range(0, len(images), 256)])
    refs = ReferenceSampler(corpus)
    stats = {"samples": 0, "batches": 0, "text_dropped": 0, "image_dropped": 0, "background_dropped": 0}
    epoch_losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            ref_idx = refs(idx, rng)
            id_idx = refs(idx, rng)
            ref_img, n_bg = reference_images(corpus, ref_idx, rng, config.background_fraction,
                                             config.background_prob)
            prompts, _ = training_prompts([corpus[i] for i in idx], rng, config.augmented_prob)
            with torch.no_grad():
                text, mask = encode_text(prompts, models.text_encoder)
                image = encode_image_semantic(ref_img, models.semantic, models.image_head)
            drop_t = torch.as_tensor(rng.random(len(idx)) < config.text_drop)
            drop_i = torch.as_tensor(rng.random(len(idx)) < config.image_drop)
            text = torch.where(drop_t[:, None, None], torch.zeros_like(text), text)
            mask = torch.where(drop_t[:, None], torch.ones_like(mask), mask)
            image = torch.where(drop_i[:, None, None], torch.zeros_like(image), image)
            identity = proj(raw_all[torch.as_tensor(id_idx)])
            bundle = ConditionBundle(text, image, identity, 1.0, 1.0, mask)
            stats["samples"] += len(idx)
            stats["batches"] += 1
            stats["text_dropped"] += int(drop_t.sum())
            stats["image_dropped"] += int(drop_i.sum())
            stats["background_dropped"] += n_bg
            if on_batch is not None:
                on_batch(bundle, {"epoch": epoch, "text_dropped": drop_t, "background_dropped": n_bg})

            x0 = x0_all[torch.as_tensor(idx)]
            t = torch.randint(1, (config.max_timestep or models.schedule.T) + 1, (len(idx),), generator=g)
            noise = torch.randn(x0.shape, generator=g)
            loss = F.mse_loss(models.denoiser(q_sample(x0, t, noise, models.schedule), t, bundle), noise)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"projector loss is {loss.item()} at epoch {epoch} step {s}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        logger.info("projector epoch %d loss %.5f", epoch, epoch_losses[-1])
    proj.eval()
    for p in proj.parameters():
        p.requires_grad_(False)
    after = {k: module_checksum(m) for k, m in models.frozen_modules().items()}
    if after != before:
        changed = sorted(k for k in before if before[k] != after[k])
        raise RuntimeError(f"frozen modules changed during projector training: {changed}")
    return ProjectorTrainResult(proj, epoch_losses, stats, before, after)


def config_snapshot(cfg: ProtectionConfig) -> dict:
    return asdict(cfg)
