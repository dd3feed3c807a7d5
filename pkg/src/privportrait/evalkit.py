"""Evaluation protocol: FAR-calibrated verification ASR, Rank-N targeted
identification ASR, image-quality metrics and a paired bootstrap for ablations."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .frzoo import FRModel, UncalibratedError, pair_similarities, to_tensor

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


# ---------------------------------------------------------------------------
# attack success rates
# ---------------------------------------------------------------------------


def _threshold(model: FRModel) -> float:
    if model.threshold_far01 is None:
        raise UncalibratedError(f"model {model.name!r} has no calibrated threshold")
    return model.threshold_far01


def verification_hits(adversarials: np.ndarray, targets: np.ndarray, model: FRModel) -> np.ndarray:
    """Per-pair boolean: similarity(adv, target) >= the model's FAR threshold."""
    if len(adversarials) != len(targets):
        raise ValueError(f"{len(adversarials)} adversarials vs {len(targets)} targets")
    thr = _threshold(model)
    if len(adversarials) == 0:
        return np.zeros(0, dtype=bool)
    return pair_similarities(model, adversarials, targets) >= thr


def asr_verification(adversarials: np.ndarray, targets: np.ndarray, model: FRModel) -> float:
    """Fraction of all pairs accepted as the target identity."""
    hits = verification_hits(adversarials, targets, model)
    if len(hits) == 0:
        raise ValueError("no pairs to score")
    return float(hits.mean())


def rank_n_success(sims: np.ndarray, gallery_ids, target_ids, n: int) -> np.ndarray:
    """Per-probe success of Rank-n targeted identification.

    ``sims`` is probes x gallery.  Gallery order is by descending similarity with
    ties broken by ascending gallery index; a probe succeeds when its target
    identity sits in the first ``n`` places.
    """
    sims = np.asarray(sims, dtype=np.float64)
    gallery_ids = list(gallery_ids)
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(set(gallery_ids)) != len(gallery_ids):
        raise ValueError("gallery identities must be unique")
    position = {g: j for j, g in enumerate(gallery_ids)}
    out = np.zeros(len(sims), dtype=bool)
    for i, tgt in enumerate(target_ids):
        if tgt not in position:
            raise ValueError(f"target identity {tgt} is not in the gallery")
        j = position[tgt]
        row = sims[i]
        rank = np.sum(row > row[j]) + np.sum(row[:j] == row[j])
        out[i] = rank < n
    return out


def asr_identification(probes_adversarial: np.ndarray, gallery: np.ndarray, gallery_ids, targets,
                       model: FRModel, n: int) -> float:
    if len(probes_adversarial) != len(targets):
        raise ValueError("probes and targets differ in length")
    sims = model.embed_numpy(probes_adversarial) @ model.embed_numpy(gallery).T
    return float(rank_n_success(sims, gallery_ids, targets, n).mean())


# ---------------------------------------------------------------------------
# image quality
# ---------------------------------------------------------------------------


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images on [0, 1], capped at 100."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid window positions and channels (H x W x C images on [0, 1])."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on a side")
    w = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2

    def filt(x):  # valid-mode weighted mean, channels last
        return np.einsum("hwcij,ij->hwc", sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW), axis=(0, 1)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """|mu_a - mu_b|^2 + tr(A + B - 2 (A^1/2 B A^1/2)^1/2)."""
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    ra = _sqrt_psd(cov_a)
    cross = np.trace(_sqrt_psd(ra @ cov_b @ ra))
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * cross)


def gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if len(features) < 2:
        raise ValueError("need at least 2 samples for a covariance")
    return features.mean(0), np.cov(features, rowvar=False)


def semantic_features(images: np.ndarray, semantic_model: FRModel, batch_size: int = 512) -> np.ndarray:
    import torch

    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(semantic_model.net.pooled(to_tensor(images[i : i + batch_size])).double().numpy())
    return np.concatenate(out)


def fid_feature(set_a: np.ndarray, set_b: np.ndarray, semantic_model: FRModel) -> float:
    """Frechet distance between Gaussian fits of semantic-encoder pooled features."""
    fa = semantic_features(set_a, semantic_model)
    fb = semantic_features(set_b, semantic_model)
    return frechet_distance(*gaussian_fit(fa), *gaussian_fit(fb))


# ---------------------------------------------------------------------------
# protocols and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairSpec:
    source: int  # index into the benchmark corpus
    target: int
    prompt: str


@dataclass
class VerificationProtocol:
    groups: list[list[PairSpec]]
    surrogate_models: list[str]
    blackbox_models: list[str]

    def __post_init__(self):
        overlap = set(self.surrogate_models) & set(self.blackbox_models)
        if overlap:
            raise ValueError(f"surrogate and black-box models overlap: {sorted(overlap)}")

    @property
    def pairs(self) -> list[PairSpec]:
        return [p for g in self.groups for p in g]


@dataclass
class IdentificationProtocol:
    gallery: list[int]  # corpus indices, one per identity
    probes: list[int]  # corpus indices, disjoint from the gallery
    targets: list[int]  # target identity id per probe
    gallery_targets: list[int] = field(default_factory=list)  # corpus index of each probe's target face


def build_verification_protocol(corpus, n_groups: int, pairs_per_group: int, surrogates, blackbox,
                                seed: int, prompts=None) -> VerificationProtocol:
    """Random source / target pairs with distinct identities and scene prompts."""
    from .mmic import SUBJECTS, SCENES

    rng = np.random.default_rng(seed)
    ids = np.array([s.attrs.identity_id for s in corpus])
    scenes = list(SCENES)
    groups = []
    for _ in range(n_groups):
        group = []
        while len(group) < pairs_per_group:
            s, t = rng.integers(len(corpus), size=2)
            if ids[s] == ids[t]:
                continue
            prompt = (prompts[rng.integers(len(prompts))] if prompts else
                      f"{SUBJECTS[rng.integers(len(SUBJECTS))]}, {scenes[rng.integers(len(scenes))]}")
            group.append(PairSpec(int(s), int(t), prompt))
        groups.append(group)
    return VerificationProtocol(groups, list(surrogates), list(blackbox))


def build_identification_protocol(corpus, seed: int) -> IdentificationProtocol:
    """One gallery and one probe image per identity; each probe targets another identity."""
    rng = np.random.default_rng(seed)
    ids = np.array([s.attrs.identity_id for s in corpus])
    uniq = np.unique(ids)
    gallery, probes = [], []
    for c in uniq:
        members = np.flatnonzero(ids == c)
        if len(members) < 2:
            raise ValueError(f"identity {c} needs two samples for gallery and probe")
        g, p = rng.choice(members, 2, replace=False)
        gallery.append(int(g))
        probes.append(int(p))
    shift = rng.integers(1, len(uniq), size=len(uniq))
    tgt_pos = (np.arange(len(uniq)) + shift) % len(uniq)
    return IdentificationProtocol(gallery, probes, [int(uniq[k]) for k in tgt_pos],
                                  [gallery[k] for k in tgt_pos])


@dataclass
class EvalReport:
    label: str
    asr_per_model: dict[str, float]
    blackbox_average: float
    whitebox_average: float
    clean_asr_per_model: dict[str, float]
    rank1_t: float | None
    rank5_t: float | None
    psnr: float
    ssim: float
    fid_feature: float
    mean_whitebox_similarity: float
    n_pairs: int
    config: dict
    per_pair_blackbox: list[float] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def __post_init__(self):
        rates = list(self.asr_per_model.values()) + list(self.clean_asr_per_model.values())
        rates += [r for r in (self.rank1_t, self.rank5_t) if r is not None]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("rates must lie in [0, 1]")
        if self.rank1_t is not None and self.rank5_t is not None and self.rank1_t > self.rank5_t:
            raise ValueError("rank1 rate exceeds rank5 rate")

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def write_report_table(reports: list[EvalReport], path: str, models: list[str]) -> None:
    """One row per report; columns are FR models, their average and quality metrics."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *models, "average", "rank1_t", "rank5_t", "psnr", "ssim", "fid_feature",
                    "whitebox_similarity", "n_pairs"])
        for r in reports:
            w.writerow([r.label, *(f"{r.asr_per_model[m]:.4f}" for m in models),
                        f"{np.mean([r.asr_per_model[m] for m in models]):.4f}",
                        "" if r.rank1_t is None else f"{r.rank1_t:.4f}",
                        "" if r.rank5_t is None else f"{r.rank5_t:.4f}",
                        f"{r.psnr:.3f}", f"{r.ssim:.4f}", f"{r.fid_feature:.4f}",
                        f"{r.mean_whitebox_similarity:.4f}", r.n_pairs])


def paired_bootstrap(a, b, n_resamples: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Mean of ``a - b`` and the one-sided p-value for ``mean(a) > mean(b)``.

    p is the fraction of resampled mean differences that are <= 0.
    """
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    if len(d) == 0:
        raise ValueError("no pairs")
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(d), size=(n_resamples, len(d)))
    means = d[idx].mean(axis=1)
    return float(d.mean()), float(np.mean(means <= 0))


def save_montage(rows: list[np.ndarray], path: str, scale: int = 2) -> None:
    """Grid image: each entry of ``rows`` is an N x H x W x 3 array drawn as one row."""
    from PIL import Image

    from .synthface import to_uint8

    n = max(len(r) for r in rows)
    h, w = rows[0].shape[1:3]
    canvas = np.ones((len(rows) * (h + 1), n * (w + 1), 3))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            canvas[i * (h + 1) : i * (h + 1) + h, j * (w + 1) : j * (w + 1) + w] = img
    Image.fromarray(to_uint8(canvas)).resize((canvas.shape[1] * scale, canvas.shape[0] * scale),
                                             Image.NEAREST).save(path)


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


def run_protocol(protocol: VerificationProtocol, corpus, cfg, models, label: str = "run",
                 identification: IdentificationProtocol | None = None, chunk: int = 100,
                 results=None) -> tuple[EvalReport, list]:
    """Generate adversarials for every pair and score them.

    Headline ASR uses the black-box models; surrogate scores are reported as the
    white-box average.  Quality metrics compare each output with its source image.
    """
    from .pipeline import protect_batch

    pairs = protocol.pairs
    src = np.stack([corpus[p.source].image for p in pairs])
    tgt = np.stack([corpus[p.target].image for p in pairs])
    if results is None:
        results = protect_batch([(src[i], tgt[i], p.prompt) for i, p in enumerate(pairs)], cfg, models, chunk=chunk)
    ok = [i for i, r in enumerate(results) if hasattr(r, "adversarial")]
    failures = [f"pair {i}: {r}" for i, r in enumerate(results) if not hasattr(r, "adversarial")]
    if not ok:
        raise RuntimeError(f"{label}: every pair failed; first error: {failures[0] if failures else 'none'}")
    adv = np.stack([results[i].adversarial for i in ok])
    src_ok, tgt_ok = src[ok], tgt[ok]
    zoo = models.zoo_by_name
    names = protocol.blackbox_models + protocol.surrogate_models
    hits = {m: verification_hits(adv, tgt_ok, zoo[m]) for m in names}
    asr = {m: float(hits[m].mean()) for m in names}
    clean = {m: asr_verification(src_ok, tgt_ok, zoo[m]) for m in names}
    per_pair = np.mean([hits[m] for m in protocol.blackbox_models], axis=0)
    wb_sim = np.mean([pair_similarities(zoo[m], adv, tgt_ok) for m in protocol.surrogate_models])

    rank1 = rank5 = None
    if identification is not None:
        probe_results = protect_batch(
            [(corpus[p].image, corpus[g].image, pairs[k % len(pairs)].prompt)
             for k, (p, g) in enumerate(zip(identification.probes, identification.gallery_targets))],
            cfg, models, chunk=chunk)
        probes = np.stack([r.adversarial for r in probe_results])
        gal = np.stack([corpus[g].image for g in identification.gallery])
        gal_ids = [corpus[g].attrs.identity_id for g in identification.gallery]
        r1 = [asr_identification(probes, gal, gal_ids, identification.targets, zoo[m], 1)
              for m in protocol.blackbox_models]
        r5 = [asr_identification(probes, gal, gal_ids, identification.targets, zoo[m], 5)
              for m in protocol.blackbox_models]
        rank1, rank5 = float(np.mean(r1)), float(np.mean(r5))

    report = EvalReport(
        label=label,
        asr_per_model=asr,
        blackbox_average=float(np.mean([asr[m] for m in protocol.blackbox_models])),
        whitebox_average=float(np.mean([asr[m] for m in protocol.surrogate_models])),
        clean_asr_per_model=clean,
        rank1_t=rank1,
        rank5_t=rank5,
        psnr=float(np.mean([psnr(a, s) for a, s in zip(adv, src_ok)])),
        ssim=float(np.mean([ssim(a, s) for a, s in zip(adv, src_ok)])),
        fid_feature=fid_feature(adv, src_ok, models.semantic),
        mean_whitebox_similarity=float(wb_sim),
        n_pairs=len(ok),
        config=asdict(cfg),
        per_pair_blackbox=[float(v) for v in per_pair],
        failures=failures,
    )
    if report.whitebox_average < report.blackbox_average:
        logger.warning("%s: white-box ASR %.3f below black-box ASR %.3f", label, report.whitebox_average,
                       report.blackbox_average)
    return report, results
