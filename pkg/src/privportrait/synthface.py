"""Procedural synthetic faces with ground-truth identity labels.

Every face is a composition of a few parametric shapes (hair, face oval, eyes,
nose, mouth, optional glasses and beard) drawn over one of a handful of scene
backgrounds.  Identity is a deterministic function of ``shape_params``; pose
jitter and background vary per sample.  Rendering is supersampled so sub-pixel
jitter produces smooth images.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

ATTRIBUTE_NAMES = (
    "face_width",
    "face_height",
    "eye_spacing",
    "eye_size",
    "nose_size",
    "mouth_width",
    "skin_tone",
    "hair_tone",
    "glasses",
    "beard",
)
N_ATTRIBUTES = len(ATTRIBUTE_NAMES)

# background id -> (top colour, bottom colour, pattern)
BACKGROUNDS = (
    ((0.55, 0.75, 0.95), (0.30, 0.62, 0.25), "horizon"),  # park
    ((0.45, 0.70, 0.98), (0.93, 0.83, 0.58), "horizon"),  # beach
    ((0.92, 0.92, 0.86), (0.70, 0.72, 0.74), "checker"),  # kitchen
    ((0.62, 0.64, 0.70), (0.42, 0.44, 0.50), "vstripes"),  # office
    ((0.16, 0.36, 0.18), (0.08, 0.22, 0.10), "vstripes"),  # forest
    ((0.35, 0.38, 0.45), (0.20, 0.20, 0.24), "blocks"),  # city
    ((0.80, 0.28, 0.30), (0.55, 0.12, 0.16), "plain"),  # studio
    ((0.80, 0.88, 0.98), (0.97, 0.97, 0.99), "horizon"),  # snow
)
N_BACKGROUNDS = len(BACKGROUNDS)

MIN_SIZE = 16
SUPERSAMPLE = 4
MAX_JITTER = 0.6  # pixels

_SKIN_LIGHT = np.array([0.97, 0.84, 0.72])
_SKIN_DARK = np.array([0.42, 0.27, 0.17])
_HAIR_LIGHT = np.array([0.93, 0.80, 0.45])
_HAIR_DARK = np.array([0.10, 0.07, 0.06])


@dataclass(frozen=True)
class FaceAttributes:
    identity_id: int
    shape_params: tuple[float, ...]
    pose_jitter: tuple[float, float] = (0.0, 0.0)
    background_id: int = 0

    def __post_init__(self):
        if self.identity_id < 0:
            raise ValueError(f"identity_id must be >= 0, got {self.identity_id}")
        if len(self.shape_params) != N_ATTRIBUTES:
            raise ValueError(f"expected {N_ATTRIBUTES} shape params, got {len(self.shape_params)}")
        if any(not -1.0 <= p <= 1.0 for p in self.shape_params):
            raise ValueError("shape_params must lie in [-1, 1]")
        if not 0 <= self.background_id < N_BACKGROUNDS:
            raise ValueError(f"background_id must be in [0, {N_BACKGROUNDS}), got {self.background_id}")

    @property
    def params(self) -> dict[str, float]:
        return dict(zip(ATTRIBUTE_NAMES, self.shape_params))


@dataclass
class FaceSample:
    image: np.ndarray  # H x W x 3 float64 in [0, 1]
    attrs: FaceAttributes
    background_mask: np.ndarray = field(repr=False)  # H x W bool, True = background

    @property
    def face_mask(self) -> np.ndarray:
        return ~self.background_mask


def _lerp(a, b, u):
    return a + (b - a) * u


def _unit(p):
    """Map a parameter in [-1, 1] to [0, 1]."""
    return 0.5 * (p + 1.0)


def _render_background(background_id: int, n: int) -> np.ndarray:
    top, bottom, pattern = BACKGROUNDS[background_id]
    top, bottom = np.asarray(top), np.asarray(bottom)
    yy, xx = np.meshgrid((np.arange(n) + 0.5) / n, (np.arange(n) + 0.5) / n, indexing="ij")
    if pattern == "horizon":
        w = (yy > 0.62).astype(float)[..., None]
        img = _lerp(top, bottom, w) * (1.0 - 0.15 * yy[..., None])
    elif pattern == "checker":
        w = ((np.floor(xx * 6) + np.floor(yy * 6)) % 2)[..., None]
        img = _lerp(top, bottom, w)
    elif pattern == "vstripes":
        w = (np.floor(xx * 5) % 2)[..., None]
        img = _lerp(top, bottom, w)
    elif pattern == "blocks":
        w = ((np.floor(xx * 4) % 2) * (yy > 0.35) + (yy > 0.8)).clip(0, 1)[..., None]
        img = _lerp(top, bottom, w)
    else:
        img = _lerp(top, bottom, yy[..., None])
    return img


def render_face(attrs: FaceAttributes, size: int = 32) -> FaceSample:
    """Render ``attrs`` to a ``size`` x ``size`` RGB face.

    Pure function of ``attrs``.  The background mask marks every pixel that is
    not fully covered by the foreground, so the face region (mask complement)
    never depends on ``background_id``.
    """
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    n = size * SUPERSAMPLE
    p = attrs.params
    jx, jy = attrs.pose_jitter
    cx = 0.5 + jx / size
    cy = 0.55 + jy / size
    yy, xx = np.meshgrid((np.arange(n) + 0.5) / n, (np.arange(n) + 0.5) / n, indexing="ij")

    def ellipse(x0, y0, rx, ry):
        return ((xx - x0) / rx) ** 2 + ((yy - y0) / ry) ** 2 <= 1.0

    rx = 0.25 + 0.06 * p["face_width"]
    ry = 0.31 + 0.05 * p["face_height"]
    skin = _lerp(_SKIN_LIGHT, _SKIN_DARK, _unit(p["skin_tone"]))
    hair = _lerp(_HAIR_LIGHT, _HAIR_DARK, _unit(p["hair_tone"]))

    hair_mask = ellipse(cx, cy - 0.07, rx + 0.045, ry * 0.92) & (yy < cy + 0.02)
    face = ellipse(cx, cy, rx, ry)
    fg = hair_mask | face

    img = _render_background(attrs.background_id, n)
    img[hair_mask] = hair
    img[face] = skin

    if p["beard"] > 0:
        beard = face & (yy > cy + 0.07)
        img[beard] = 0.55 * hair + 0.45 * skin * 0.5

    eye_dx = 0.10 + 0.04 * p["eye_spacing"]
    eye_r = 0.036 + 0.016 * p["eye_size"]
    eye_y = cy - 0.045
    for sx in (-1.0, 1.0):
        ex = cx + sx * eye_dx
        img[ellipse(ex, eye_y, eye_r * 1.35, eye_r)] = (0.97, 0.97, 0.97)
        img[ellipse(ex, eye_y, eye_r * 0.75, eye_r * 0.75)] = (0.08, 0.10, 0.22)
        if p["glasses"] > 0:
            ring = ellipse(ex, eye_y, eye_r * 1.35 + 0.03, eye_r + 0.03) & ~ellipse(
                ex, eye_y, eye_r * 1.35 + 0.012, eye_r + 0.012
            )
            img[ring] = (0.05, 0.05, 0.05)
    if p["glasses"] > 0:
        bridge = (np.abs(yy - eye_y) < 0.01) & (np.abs(xx - cx) < eye_dx - eye_r * 1.35 - 0.01)
        img[bridge & face] = (0.05, 0.05, 0.05)

    nose_r = 0.026 + 0.015 * p["nose_size"]
    img[ellipse(cx, cy + 0.06, nose_r, nose_r * 1.5)] = skin * 0.72

    mouth_w = 0.065 + 0.04 * p["mouth_width"]
    img[ellipse(cx, cy + 0.17, mouth_w, 0.026)] = (0.72, 0.18, 0.22)

    # box-filter downsample
    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    coverage = fg.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return FaceSample(image=np.clip(img, 0.0, 1.0), attrs=attrs, background_mask=coverage < 1.0)


def identity_params(identity_id: int, identity_seed: int) -> tuple[float, ...]:
    """Shape parameters of one identity; a pure function of (identity_id, identity_seed)."""
    rng = np.random.default_rng([identity_seed, identity_id, 0x1D])
    params = rng.uniform(-1.0, 1.0, N_ATTRIBUTES)
    return tuple(float(v) for v in params)


def make_corpus(
    n_identities: int,
    samples_per_id: int,
    seed: int,
    size: int = 32,
    identity_seed: int | None = None,
) -> list[FaceSample]:
    """Identity-balanced corpus, ordered by (identity, sample index).

    ``identity_seed`` fixes who the identities are (defaults to ``seed``);
    ``seed`` fixes pose and background per sample.  Each sample draws from its
    own counter-derived generator, so the result does not depend on order of
    generation.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    if samples_per_id < 1:
        raise ValueError("need at least 1 sample per identity")
    if identity_seed is None:
        identity_seed = seed
    corpus = []
    for ident in range(n_identities):
        params = identity_params(ident, identity_seed)
        for k in range(samples_per_id):
            rng = np.random.default_rng([seed, ident, k])
            jitter = tuple(float(v) for v in rng.uniform(-MAX_JITTER, MAX_JITTER, 2))
            bg = int(rng.integers(N_BACKGROUNDS))
            attrs = FaceAttributes(ident, params, jitter, bg)
            corpus.append(render_face(attrs, size))
    return corpus


def background_dropout(
    sample: FaceSample, fraction: float, apply_prob: float, rng: np.random.Generator
) -> FaceSample:
    """With probability ``apply_prob`` grey out a random ``fraction`` of background pixels."""
    if not 0.0 <= fraction <= 1.0 or not 0.0 <= apply_prob <= 1.0:
        raise ValueError("fraction and apply_prob must lie in [0, 1]")
    if rng.random() >= apply_prob:
        return sample
    rows, cols = np.nonzero(sample.background_mask)
    k = int(round(fraction * len(rows)))
    chosen = rng.choice(len(rows), size=k, replace=False)
    image = sample.image.copy()
    image[rows[chosen], cols[chosen]] = 0.5
    return FaceSample(image=image, attrs=sample.attrs, background_mask=sample.background_mask)


def stack_images(samples: list[FaceSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def nearest_centroid_accuracy(train: list[FaceSample], test: list[FaceSample]) -> float:
    """Accuracy of a raw-pixel nearest-centroid identity classifier on face regions."""

    def face_pixels(samples):
        return np.stack([(s.image * s.face_mask[..., None]).ravel() for s in samples])

    ids = np.array([s.attrs.identity_id for s in train])
    x = face_pixels(train)
    labels = np.unique(ids)
    centroids = np.stack([x[ids == c].mean(axis=0) for c in labels])
    y = face_pixels(test)
    d = ((y[:, None, :] - centroids[None]) ** 2).sum(-1)
    pred = labels[d.argmin(axis=1)]
    truth = np.array([s.attrs.identity_id for s in test])
    return float((pred == truth).mean())


# ---------------------------------------------------------------------------
# persistence: <dir>/images/NNNNNN.png + <dir>/metadata.csv
# ---------------------------------------------------------------------------

METADATA_FIELDS = ("file", "identity_id", "shape_params", "pose_jitter", "background_id")


def save_corpus(corpus: list[FaceSample], directory: str) -> None:
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, "metadata.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METADATA_FIELDS)
        for i, s in enumerate(corpus):
            name = f"images/{i:06d}.png"
            Image.fromarray(to_uint8(s.image)).save(os.path.join(directory, name))
            writer.writerow(
                [
                    name,
                    s.attrs.identity_id,
                    json.dumps([round(v, 12) for v in s.attrs.shape_params]),
                    json.dumps([round(v, 12) for v in s.attrs.pose_jitter]),
                    s.attrs.background_id,
                ]
            )


def load_corpus(directory: str) -> list[FaceSample]:
    """Load a saved corpus.  Images come from the PNG files; masks are re-rendered."""
    path = os.path.join(directory, "metadata.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"corpus metadata missing: {path}")
    corpus = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            attrs = FaceAttributes(
                int(row["identity_id"]),
                tuple(json.loads(row["shape_params"])),
                tuple(json.loads(row["pose_jitter"])),
                int(row["background_id"]),
            )
            image = np.asarray(Image.open(os.path.join(directory, row["file"])).convert("RGB"))
            image = image.astype(np.float64) / 255.0
            mask = render_face(attrs, image.shape[0]).background_mask
            corpus.append(FaceSample(image=image, attrs=attrs, background_mask=mask))
    return corpus


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
