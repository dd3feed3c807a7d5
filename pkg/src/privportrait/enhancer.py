"""Per-step identity guidance: nudge the latent along the gradient of identity
similarity between the decoded x0-prediction and the target face."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbone import LatentCodec, LatentState, NoiseSchedule, predict_x0


@dataclass
class GuidanceConfig:
    lambda_s: float = 1.0
    guide_models: list = field(default_factory=list)
    enabled: bool = True

    def __post_init__(self):
        if not torch.isfinite(torch.tensor(float(self.lambda_s))) or self.lambda_s < 0:
            raise ValueError(f"lambda_s must be finite and >= 0, got {self.lambda_s}")

    @property
    def active(self) -> bool:
        return self.enabled and self.lambda_s != 0


class FlattenEmbedder:
    """Embeds an image as its flattened, unit-normalised pixels (a transparent F for checks)."""

    name = "flatten"

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(images.flatten(1), dim=-1)


def identity_similarity_loss(x0_hat: torch.Tensor, target: torch.Tensor, guide_models) -> torch.Tensor:
    """Per-image mean over guide models of cos(embed(x0_hat), embed(target)) (shape B)."""
    if not guide_models:
        raise ValueError("identity_similarity_loss needs at least one guide model")
    if x0_hat.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(x0_hat.shape)} vs {tuple(target.shape)}")
    total = 0.0
    for m in guide_models:
        total = total + (m.embed(x0_hat) * m.embed(target)).sum(-1)
    return total / len(guide_models)


@dataclass
class StepRecord:
    t: int
    grad_norm: float
    f_before: float
    f_after: float


@dataclass
class GuidanceTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "grad_norm", "f_before", "f_after"])
            for r in self.records:
                w.writerow([r.t, repr(r.grad_norm), repr(r.f_before), repr(r.f_after)])


def _similarity_and_grad(z0: torch.Tensor, target: torch.Tensor, models, codec: LatentCodec):
    z0 = z0.detach().requires_grad_(True)
    with torch.enable_grad():
        f = identity_similarity_loss(codec.decode_raw(z0), target, models)
        (grad,) = torch.autograd.grad(f.sum(), z0)
    return f.detach(), grad


def guidance_step(state_prev: LatentState, eps: torch.Tensor, target: torch.Tensor, cfg: GuidanceConfig,
                  schedule: NoiseSchedule, t_coef: int, codec: LatentCodec | None = None,
                  sigma_t: int | None = None, trace=None) -> LatentState:
    """z_hat = z_prev + sigma * lambda_s * grad_{z0} F(decode(z0), target).

    ``z0`` is the x0-prediction from ``state_prev.z`` with ``eps`` at coefficient
    index ``t_coef``; the gradient is not propagated through that prediction.
    ``sigma`` is the guidance step size at ``state_prev.t`` unless ``sigma_t``
    overrides the index.  Returns ``state_prev`` itself when guidance is inactive.
    """
    if not cfg.active:
        return state_prev
    codec = codec or LatentCodec("pixel")
    z0 = predict_x0(LatentState(state_prev.z, t_coef), eps, schedule)
    f_before, grad = _similarity_and_grad(z0, target, cfg.guide_models, codec)
    if not torch.isfinite(grad).all():
        raise FloatingPointError(
            f"non-finite identity gradient at t={state_prev.t} (t_coef={t_coef}, "
            f"|z0|max={z0.abs().max().item():.3g}, F={f_before.tolist()})")
    g = cfg.lambda_s * grad
    sigma = schedule.guidance_sigma(state_prev.t if sigma_t is None else sigma_t)
    z_new = state_prev.z + sigma * g
    if trace is not None:
        record_trace(trace, state_prev.t, g, f_before, z_new, eps, target, cfg, schedule, t_coef, codec)
    return LatentState(z_new, state_prev.t)


def record_trace(trace, t: int, g: torch.Tensor, f_before: torch.Tensor, z_new: torch.Tensor,
                 eps: torch.Tensor, target: torch.Tensor, cfg: GuidanceConfig, schedule: NoiseSchedule,
                 t_coef: int, codec: LatentCodec):
    """Append one record; F-after comes from a fresh x0-prediction of the updated latent.

    ``trace`` is either one GuidanceTrace (batch values are averaged) or a list
    with one GuidanceTrace per batch element.
    """
    z0_after = predict_x0(LatentState(z_new, t_coef), eps, schedule)
    with torch.no_grad():
        f_after = identity_similarity_loss(codec.decode_raw(z0_after), target, cfg.guide_models)
    grad_norm = g.flatten(1).norm(dim=1)
    if isinstance(trace, GuidanceTrace):
        trace.records.append(StepRecord(t, float(grad_norm.mean()), float(f_before.mean()), float(f_after.mean())))
    else:
        if len(trace) != len(g):
            raise ValueError(f"{len(trace)} traces for a batch of {len(g)}")
        for tr, gn, fb, fa in zip(trace, grad_norm.tolist(), f_before.tolist(), f_after.tolist()):
            tr.records.append(StepRecord(t, gn, fb, fa))
    return trace
