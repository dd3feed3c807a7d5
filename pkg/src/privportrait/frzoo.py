"""A zoo of small face-recognition embedders, cosine identity similarity and
FAR-calibrated verification thresholds."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .synthface import N_ATTRIBUTES, FaceSample, background_dropout, stack_images

logger = logging.getLogger(__name__)

EMBED_DIM = 64
UNIT_TOL = 1e-6

# FAR@0.01 thresholds reported for the real pretrained networks.  Documentation
# only: the toy models calibrate their own thresholds.
PUBLISHED_FAR01_THRESHOLDS = {"IR152": 0.167, "IRSE50": 0.241, "FaceNet": 0.409, "MobileFace": 0.302}

# architecture id -> (conv block widths, global pooling)
ARCHITECTURES = {
    "conv2_avg": ((32, 64), "avg"),
    "conv3_max": ((24, 48, 96), "max"),
    "conv3_avg": ((32, 64, 64), "avg"),
    "conv4_max": ((16, 32, 64, 128), "max"),
    "conv4_avg": ((16, 32, 64, 96), "avg"),
    # semantic encoder: final width equals EMBED_DIM so its pooled features fuse with FR embeddings
    "conv3_max64": ((24, 48, 64), "max"),
}


class TrainingError(RuntimeError):
    pass


class UncalibratedError(RuntimeError):
    pass


class FRNet(nn.Module):
    """Conv blocks (conv-GN-SiLU x2, 2x downsample) -> global pooling -> linear -> L2 norm.

    SiLU keeps the embedding smooth so identity gradients are well defined.
    ``attribute_head`` optionally regresses the renderer's shape parameters from
    the pooled features (used by the semantic encoder).
    """

    def __init__(self, architecture_id: str, embed_dim: int = EMBED_DIM, n_classes: int = 0,
                 attribute_head: bool = False):
        super().__init__()
        if architecture_id not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {architecture_id!r}; choose from {sorted(ARCHITECTURES)}")
        widths, pooling = ARCHITECTURES[architecture_id]
        self.architecture_id = architecture_id
        self.pooling = pooling
        self.embed_dim = embed_dim
        blocks = []
        c_in = 3
        for i, w in enumerate(widths):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, w, 3, padding=1),
                    nn.GroupNorm(8, w),
                    nn.SiLU(),
                    nn.Conv2d(w, w, 3, padding=1),
                    nn.GroupNorm(8, w),
                    nn.SiLU(),
                    nn.AvgPool2d(2) if pooling == "avg" else nn.MaxPool2d(2),
                )
            )
            c_in = w
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = c_in
        self.embed = nn.Linear(c_in, embed_dim)
        # margin-softmax class centres; only used during training
        self.centres = nn.Parameter(torch.randn(n_classes, embed_dim) * 0.1) if n_classes else None
        self.attribute_head = nn.Linear(c_in, N_ATTRIBUTES) if attribute_head else None

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks((x - 0.5) / 0.5)

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        fmap = self.feature_map(x)
        return fmap.mean(dim=(2, 3)) if self.pooling == "avg" else fmap.amax(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """N x 3 x H x W images in [0, 1] -> N x D unit-norm embeddings."""
        return F.normalize(self.embed(self.pooled(x)), dim=-1)


@dataclass
class FRModel:
    name: str
    net: FRNet
    seed: int = 0
    threshold_far01: float | None = None

    @property
    def architecture_id(self) -> str:
        return self.net.architecture_id

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images)

    def embed_numpy(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """N x H x W x 3 array -> N x D float64 embeddings (no gradient)."""
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.net(to_tensor(images[i : i + batch_size])).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.net.embed_dim))

    def save(self, path: str) -> None:
        state = {k: v for k, v in self.net.state_dict().items() if not k.startswith("centres")}
        save_checkpoint(
            path,
            state,
            {
                "kind": "fr_model",
                "name": self.name,
                "architecture_id": self.architecture_id,
                "embed_dim": self.net.embed_dim,
                "attribute_head": self.net.attribute_head is not None,
                "threshold_far01": self.threshold_far01,
                "seed": self.seed,
            },
        )

    @classmethod
    def load(cls, path: str) -> "FRModel":
        state, manifest = load_checkpoint(path)
        net = FRNet(manifest["architecture_id"], manifest["embed_dim"], attribute_head=manifest["attribute_head"])
        net.load_state_dict(state)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return cls(manifest["name"], net, manifest["seed"], manifest["threshold_far01"])


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """N x H x W x C numpy -> N x C x H x W tensor."""
    return torch.as_tensor(np.ascontiguousarray(images), dtype=dtype).permute(0, 3, 1, 2).contiguous()


def to_numpy(images: torch.Tensor) -> np.ndarray:
    return images.detach().permute(0, 2, 3, 1).double().cpu().numpy()


@dataclass(frozen=True)
class VerificationDecision:
    similarity: float
    threshold: float
    match: bool


def similarity(a, b) -> float:
    """Cosine similarity of two unit-norm embeddings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > 1e-5:
            raise ValueError(f"embedding is not unit-norm (|v| = {np.linalg.norm(v):.8f})")
    return float(np.clip(a @ b, -1.0, 1.0))


def far_threshold(impostor_similarities, far: float) -> float:
    """(1 - far) empirical quantile: the ceil((1 - far) n)-th order statistic."""
    s = np.sort(np.asarray(impostor_similarities, dtype=np.float64))
    if len(s) == 0:
        raise ValueError("no impostor similarities")
    k = int(math.ceil((1.0 - far) * len(s) - 1e-9))
    return float(s[min(max(k, 1), len(s)) - 1])


def pair_similarities(model: FRModel, images_a: np.ndarray, images_b: np.ndarray) -> np.ndarray:
    ea = model.embed_numpy(images_a)
    eb = model.embed_numpy(images_b)
    return np.sum(ea * eb, axis=1)


def calibrate_far(model: FRModel, impostor_pairs, far: float = 0.01, min_pairs: int = 1000) -> float:
    """Set and return the FAR-calibrated threshold from (images_a, images_b) impostor pairs."""
    images_a, images_b = impostor_pairs
    if len(images_a) != len(images_b):
        raise ValueError("impostor pair lists have different lengths")
    if len(images_a) < min_pairs:
        raise ValueError(f"need >= {min_pairs} impostor pairs, got {len(images_a)}")
    if not 0.0 < far < 0.5:
        raise ValueError("far must lie in (0, 0.5)")
    sims = pair_similarities(model, images_a, images_b)
    model.threshold_far01 = far_threshold(sims, far)
    logger.info("%s: FAR@%g threshold %.4f (measured FAR %.4f on %d pairs)", model.name, far,
                model.threshold_far01, np.mean(sims >= model.threshold_far01), len(sims))
    return model.threshold_far01


def verify(model: FRModel, a: np.ndarray, b: np.ndarray) -> VerificationDecision:
    if model.threshold_far01 is None:
        raise UncalibratedError(f"model {model.name!r} has no calibrated threshold")
    ea, eb = model.embed_numpy(np.stack([a, b]))
    sim = similarity(ea, eb)
    return VerificationDecision(sim, model.threshold_far01, sim >= model.threshold_far01)


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------


def sample_impostor_pairs(ids: np.ndarray, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """n_pairs x 2 index array of different-identity pairs."""
    ids = np.asarray(ids)
    out = np.empty((0, 2), dtype=int)
    while len(out) < n_pairs:
        cand = rng.integers(len(ids), size=(2 * n_pairs, 2))
        cand = cand[ids[cand[:, 0]] != ids[cand[:, 1]]]
        out = np.concatenate([out, cand])
    return out[:n_pairs]


def sample_genuine_pairs(ids: np.ndarray, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    ids = np.asarray(ids)
    out = []
    groups = [np.flatnonzero(ids == c) for c in np.unique(ids)]
    groups = [g for g in groups if len(g) >= 2]
    for _ in range(n_pairs):
        g = groups[rng.integers(len(groups))]
        out.append(rng.choice(g, 2, replace=False))
    return np.array(out, dtype=int)


def verification_accuracy(genuine: np.ndarray, impostor: np.ndarray) -> float:
    """Best-threshold accuracy on balanced genuine/impostor similarity sets."""
    scores = np.concatenate([genuine, impostor])
    labels = np.concatenate([np.ones(len(genuine)), np.zeros(len(impostor))])
    order = np.argsort(-scores, kind="stable")
    labels = labels[order]
    # accept the top-k for every k
    tp = np.concatenate([[0], np.cumsum(labels)])
    fp = np.concatenate([[0], np.cumsum(1 - labels)])
    tn = len(impostor) - fp
    return float(((tp + tn) / len(labels)).max())


def heldout_accuracy(model: FRModel, samples: list[FaceSample], n_pairs: int = 2000, seed: int = 0) -> float:
    ids = np.array([s.attrs.identity_id for s in samples])
    rng = np.random.default_rng(seed)
    emb = model.embed_numpy(stack_images(samples))
    gen = sample_genuine_pairs(ids, n_pairs, rng)
    imp = sample_impostor_pairs(ids, n_pairs, rng)
    return verification_accuracy(
        np.sum(emb[gen[:, 0]] * emb[gen[:, 1]], 1), np.sum(emb[imp[:, 0]] * emb[imp[:, 1]], 1)
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _augment(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """Shift by up to one pixel, random blur and noise: robustness to generated images."""
    n = x.shape[0]
    shifts = torch.randint(-1, 2, (2,), generator=g).tolist()
    x = torch.roll(x, shifts=shifts, dims=(2, 3))
    blur = torch.rand(n, 1, 1, 1, generator=g) < 0.3
    k = torch.tensor([0.25, 0.5, 0.25])
    kernel = (k[:, None] * k[None, :]).expand(3, 1, 3, 3)
    blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel, groups=3)
    x = torch.where(blur, blurred, x)
    sigma = torch.rand(n, 1, 1, 1, generator=g) * 0.06
    return x + sigma * torch.randn(x.shape, generator=g)


def train_fr(
    corpus: list[FaceSample],
    architecture_id: str,
    seed: int,
    name: str | None = None,
    heldout: list[FaceSample] | None = None,
    epochs: int = 25,
    batch_size: int = 128,
    lr: float = 2e-3,
    scale: float = 16.0,
    margin: float = 0.25,
    attribute_weight: float = 0.0,
    min_accuracy: float = 0.8,
) -> FRModel:
    """Train an embedder with an additive-margin (CosFace) softmax loss.

    With ``attribute_weight > 0`` an auxiliary head regresses the shape
    parameters.  Raises ``TrainingError`` if held-out verification accuracy
    stays below ``min_accuracy``.
    """
    ids = np.array([s.attrs.identity_id for s in corpus])
    labels_all, counts = np.unique(ids, return_counts=True)
    if len(labels_all) < 2 or counts.min() < 2:
        raise ValueError("corpus needs >= 2 identities with >= 2 samples each")
    label_of = {c: i for i, c in enumerate(labels_all)}

    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    net = FRNet(architecture_id, n_classes=len(labels_all), attribute_head=attribute_weight > 0)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n_batches = math.ceil(len(corpus) / batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=epochs * n_batches)
    np_rng = np.random.default_rng(seed)

    y_all = torch.tensor([label_of[i] for i in ids])
    attrs_all = torch.tensor(np.array([s.attrs.shape_params for s in corpus]), dtype=torch.float32)
    net.train()
    for epoch in range(epochs):
        dropped = np.stack([background_dropout(s, 0.5, 0.25, np_rng).image for s in corpus])
        x_all = to_tensor(dropped)
        perm = torch.randperm(len(corpus), generator=g)
        total = 0.0
        for b in range(n_batches):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            x = _augment(x_all[idx], g)
            pooled = net.pooled(x)
            emb = F.normalize(net.embed(pooled), dim=-1)
            cos = emb @ F.normalize(net.centres, dim=-1).T
            onehot = F.one_hot(y_all[idx], cos.shape[1]).float()
            loss = F.cross_entropy(scale * (cos - margin * onehot), y_all[idx])
            if net.attribute_head is not None:
                loss = loss + attribute_weight * F.mse_loss(net.attribute_head(pooled), attrs_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
        logger.debug("%s epoch %d loss %.4f", architecture_id, epoch, total / n_batches)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    model = FRModel(name or architecture_id, net, seed)
    if heldout is not None:
        acc = heldout_accuracy(model, heldout, seed=seed)
        logger.info("%s (%s): held-out verification accuracy %.4f", model.name, architecture_id, acc)
        if acc < min_accuracy:
            raise TrainingError(f"{model.name}: held-out verification accuracy {acc:.3f} < {min_accuracy}")
    return model


def predict_attributes(model: FRModel, images: torch.Tensor) -> torch.Tensor:
    if model.net.attribute_head is None:
        raise ValueError(f"model {model.name!r} has no attribute head")
    return model.net.attribute_head(model.net.pooled(images)).clamp(-1.0, 1.0)
