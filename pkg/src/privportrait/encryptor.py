"""Target-identity encryption: fuse a semantic encoding of the target face with
the surrogate FR embeddings and project the result into identity tokens."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .frzoo import FRModel
from .mmic import D_COND

N_ID_TOKENS = 4


@dataclass
class EncryptedIdentity:
    raw: torch.Tensor  # B x D fused vector, not renormalised
    alpha: float
    beta: float
    tokens: torch.Tensor | None = None  # B x N_id x D_c after projection


def semantic_encode(images: torch.Tensor, semantic_model: FRModel) -> torch.Tensor:
    """Unit-norm pooled penultimate features of the semantic model (B x D)."""
    return F.normalize(semantic_model.net.pooled(images), dim=-1)


def fuse_identity(target: torch.Tensor, zoo: list[FRModel], alpha: float, beta: float,
                  semantic_model: FRModel) -> EncryptedIdentity:
    """raw = alpha * semantic(target) + beta * sum_i FR_i(target)."""
    if not zoo:
        raise ValueError("fuse_identity needs at least one FR model")
    widths = {m.net.embed_dim for m in zoo} | {semantic_model.net.feature_dim}
    if len(widths) != 1:
        raise ValueError(f"semantic and FR embedding widths differ: {sorted(widths)}")
    sem = semantic_encode(target, semantic_model)
    fr_sum = zoo[0].embed(target)
    for m in zoo[1:]:
        fr_sum = fr_sum + m.embed(target)
    return EncryptedIdentity(alpha * sem + beta * fr_sum, alpha, beta)


class IdProjector(nn.Module):
    """Bias-free MLP D -> N_id x D_c.  The output layer starts at zero, and a zero
    input always maps to zero tokens."""

    def __init__(self, d_in: int = 64, n_tokens: int = N_ID_TOKENS, d_cond: int = D_COND, hidden: int = 256):
        super().__init__()
        self.n_tokens, self.d_cond = n_tokens, d_cond
        self.fc1 = nn.Linear(d_in, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, n_tokens * d_cond, bias=False)
        nn.init.zeros_(self.fc2.weight)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(raw))).view(-1, self.n_tokens, self.d_cond)

    def save(self, path: str, manifest: dict | None = None) -> None:
        save_checkpoint(path, self.state_dict(), dict(manifest or {}, kind="id_projector",
                                                      d_in=self.fc1.in_features, n_tokens=self.n_tokens,
                                                      d_cond=self.d_cond, hidden=self.fc1.out_features))

    @classmethod
    def load(cls, path: str) -> "IdProjector":
        state, m = load_checkpoint(path)
        proj = cls(m["d_in"], m["n_tokens"], m["d_cond"], m["hidden"])
        proj.load_state_dict(state)
        proj.eval()
        for p in proj.parameters():
            p.requires_grad_(False)
        return proj


def project_identity(enc: EncryptedIdentity, proj: IdProjector) -> torch.Tensor:
    enc.tokens = proj(enc.raw)
    return enc.tokens
