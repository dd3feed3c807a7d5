"""Prompt handling and the text / image-semantic conditioning streams.

A closed vocabulary covers scene phrases, the facial-attribute words produced by
``describe_face`` and a few structural words.  ``describe_face`` is a
deterministic templater over quantised shape parameters; it stands in for a
multimodal captioner.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthface import ATTRIBUTE_NAMES, FaceAttributes

logger = logging.getLogger(__name__)

PAD, UNK, SEP = "<pad>", "<unk>", "<sep>"
MAX_TOKENS = 48
D_COND = 64
N_IMAGE_TOKENS = 4

PROMPT_PREFIX = "cinematic photo,"
PROMPT_SUFFIX = "bokeh, 4k"
NEGATIVE_PROMPT = "monochrome, lower, bad anatomy, worst quality, low quality, blurry"  # documentation only

# scene phrase -> background id of the renderer
SCENES = {
    "in the park": 0,
    "in a garden": 0,
    "at the beach": 1,
    "by the sea": 1,
    "in the kitchen": 2,
    "in a chef outfit": 2,
    "in the office": 3,
    "in a suit": 3,
    "in the forest": 4,
    "in the woods": 4,
    "in the city": 5,
    "on the street": 5,
    "in the studio": 6,
    "on a red carpet": 6,
    "in the snow": 7,
    "in winter": 7,
}
SUBJECTS = ("a man", "a woman", "a person")

LEVELS = {
    "face_width": ("narrow", "medium", "wide"),
    "face_height": ("short", "average", "long"),
    "eye_spacing": ("close-set", "normal-set", "wide-set"),
    "eye_size": ("small", "medium", "large"),
    "nose_size": ("small", "medium", "large"),
    "mouth_width": ("narrow", "medium", "wide"),
    "skin_tone": ("pale", "tan", "dark"),
    "hair_tone": ("blond", "brown", "black"),
}

_STRUCTURAL = [",", "a", "an", "the", "in", "at", "on", "by", "of", "with", "and", "wearing",
               "man", "woman", "person", "cinematic", "photo", "bokeh", "4k", "portrait",
               "face", "eyes", "nose", "mouth", "skin", "hair", "glasses", "beard"]


def _build_vocabulary() -> list[str]:
    words = [PAD, UNK, SEP]
    pieces = list(_STRUCTURAL)
    for phrase in SCENES:
        pieces.extend(phrase.split())
    for levels in LEVELS.values():
        pieces.extend(levels)
    for w in pieces:
        if w not in words:
            words.append(w)
    return words


VOCABULARY = _build_vocabulary()
WORD_TO_ID = {w: i for i, w in enumerate(VOCABULARY)}
PAD_ID, UNK_ID, SEP_ID = WORD_TO_ID[PAD], WORD_TO_ID[UNK], WORD_TO_ID[SEP]


def split_words(text: str) -> list[str]:
    return re.findall(r"[^\s,]+|,", text.lower())


def unknown_words(text: str) -> list[str]:
    return [w for w in split_words(text) if w not in WORD_TO_ID]


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[int, ...]  # padded to MAX_TOKENS
    source_text: str

    @property
    def length(self) -> int:
        return sum(t != PAD_ID for t in self.tokens)

    @property
    def content(self) -> tuple[int, ...]:
        return self.tokens[: self.length]


def _pad(ids: list[int], max_tokens: int) -> tuple[int, ...]:
    return tuple(ids) + (PAD_ID,) * (max_tokens - len(ids))


def tokenize(text: str, max_tokens: int = MAX_TOKENS) -> Prompt:
    ids = [WORD_TO_ID.get(w, UNK_ID) for w in split_words(text)]
    if len(ids) > max_tokens:
        logger.info("prompt truncated from %d to %d tokens", len(ids), max_tokens)
        ids = ids[:max_tokens]
    return Prompt(_pad(ids, max_tokens), text)


def detokenize(prompt: Prompt) -> str:
    return " ".join(VOCABULARY[t] for t in prompt.content)


def wrap_prompt(prompt: str) -> str:
    return f"{PROMPT_PREFIX} {prompt} {PROMPT_SUFFIX}"


def _level(value: float, levels: tuple[str, str, str]) -> str:
    return levels[0] if value < -1 / 3 else levels[2] if value > 1 / 3 else levels[1]


def describe_params(shape_params) -> str:
    p = dict(zip(ATTRIBUTE_NAMES, shape_params))
    q = {k: _level(p[k], LEVELS[k]) for k in LEVELS}
    parts = [
        f"{q['face_width']} {q['face_height']} face",
        f"{q['eye_spacing']} {q['eye_size']} eyes",
        f"{q['nose_size']} nose",
        f"{q['mouth_width']} mouth",
        f"{q['skin_tone']} skin",
        f"{q['hair_tone']} hair",
    ]
    if p["glasses"] > 0:
        parts.append("glasses")
    if p["beard"] > 0:
        parts.append("beard")
    return ", ".join(parts)


def describe_face(attrs: FaceAttributes) -> str:
    """Facial description from quantised shape parameters; ignores pose and background."""
    return describe_params(attrs.shape_params)


def augment_prompt(original: Prompt, description: str) -> Prompt:
    """original tokens ++ <sep> ++ description tokens; the description tail is dropped on overflow."""
    max_tokens = len(original.tokens)
    head = list(original.content) + [SEP_ID]
    desc = [WORD_TO_ID.get(w, UNK_ID) for w in split_words(description)]
    room = max_tokens - len(head)
    if room < 0:
        raise ValueError("original prompt leaves no room for the separator")
    if len(desc) > room:
        logger.info("description truncated from %d to %d tokens", len(desc), room)
        desc = desc[:room]
    return Prompt(_pad(head + desc, max_tokens), f"{original.source_text} {SEP} {description}")


def scene_background(prompt: str) -> int | None:
    """Background id named by the first scene phrase found in ``prompt``."""
    text = " ".join(split_words(prompt))
    hits = [(text.find(p), bg) for p, bg in SCENES.items() if p in text]
    return min(hits)[1] if hits else None


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class _Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x, key_mask):
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // self.heads)
        att = att.masked_fill(~key_mask[:, None, None, :], float("-inf")).softmax(-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(b, n, d))
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Token + position embedding followed by two pre-norm self-attention layers."""

    def __init__(self, vocab_size: int = len(VOCABULARY), d: int = D_COND, max_tokens: int = MAX_TOKENS,
                 layers: int = 2, heads: int = 4):
        super().__init__()
        self.max_tokens = max_tokens
        self.token = nn.Embedding(vocab_size, d)
        self.position = nn.Parameter(torch.randn(max_tokens, d) * 0.02)
        self.blocks = nn.ModuleList([_Block(d, heads) for _ in range(layers)])
        self.norm = nn.LayerNorm(d)

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """B x N token ids -> (B x N x D embeddings with pad rows zeroed, B x N validity mask)."""
        mask = tokens != PAD_ID
        mask = mask | (~mask.any(dim=1, keepdim=True))  # all-pad prompt: attend to everything
        x = self.token(tokens) + self.position[: tokens.shape[1]]
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x) * mask[..., None]
        return x, mask


def encode_text(prompts: list[Prompt], enc: TextEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    tokens = torch.tensor([p.tokens for p in prompts], dtype=torch.long)
    return enc(tokens)


def zero_text(batch: int, n_tokens: int = MAX_TOKENS, d: int = D_COND, dtype=torch.float32):
    """The unconditional text stream: an all-zero matrix (not the encoding of an empty prompt)."""
    return torch.zeros(batch, n_tokens, d, dtype=dtype), torch.ones(batch, n_tokens, dtype=torch.bool)


class ImageSemanticHead(nn.Module):
    """Pools the semantic encoder's final feature map into 2x2 patches -> N_i tokens."""

    def __init__(self, feature_dim: int, d: int = D_COND, n_tokens: int = N_IMAGE_TOKENS):
        super().__init__()
        self.grid = int(round(math.sqrt(n_tokens)))
        if self.grid * self.grid != n_tokens:
            raise ValueError("n_tokens must be a square number")
        self.norm = nn.LayerNorm(feature_dim)
        self.proj = nn.Linear(feature_dim, d)
        self.position = nn.Parameter(torch.randn(n_tokens, d) * 0.02)

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        x = F.adaptive_avg_pool2d(feature_map, self.grid).flatten(2).transpose(1, 2)
        return self.proj(self.norm(x)) + self.position


def encode_image_semantic(images: torch.Tensor, semantic_model, head: ImageSemanticHead) -> torch.Tensor:
    """B x 3 x H x W images -> B x N_i x D_c image stream."""
    return head(semantic_model.net.feature_map(images))


def describe_images(images: torch.Tensor, semantic_model) -> list[str]:
    """Describe faces from pixels via the semantic model's attribute head."""
    from .frzoo import predict_attributes

    with torch.no_grad():
        params = predict_attributes(semantic_model, images).double().numpy()
    return [describe_params(p) for p in params]


def save_vocabulary(path: str) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(VOCABULARY) + "\n")


def vocabulary_is_closed(text: str) -> bool:
    return not unknown_words(text)


def sample_training_prompt(background_id: int, rng: np.random.Generator) -> str:
    """A random scene prompt whose scene phrase matches ``background_id``."""
    phrases = [p for p, bg in SCENES.items() if bg == background_id]
    return f"{SUBJECTS[rng.integers(len(SUBJECTS))]}, {phrases[rng.integers(len(phrases))]}"
