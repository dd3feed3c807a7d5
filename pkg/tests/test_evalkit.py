import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg, ndimage

from privportrait.evalkit import (
    EvalReport,
    asr_verification,
    build_identification_protocol,
    build_verification_protocol,
    fid_feature,
    frechet_distance,
    gaussian_window,
    paired_bootstrap,
    psnr,
    rank_n_success,
    run_protocol,
    ssim,
    verification_hits,
    write_report_table,
)
from privportrait.frzoo import UncalibratedError, pair_similarities
from privportrait.pipeline import ProtectionConfig


def test_psnr_closed_form(rng):
    a = rng.uniform(0.2, 0.8, (16, 16, 3))
    b = a + 0.1 * rng.choice([-1.0, 1.0], a.shape)  # mse exactly 0.01
    assert abs(psnr(a, b) - 20.0) < 1e-9
    assert psnr(a, a) == 100.0
    with pytest.raises(ValueError):
        psnr(a, a[:8])


def _ssim_oracle(a, b):
    # separable gaussian filtering via scipy, then crop to valid positions
    w = gaussian_window()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        f = lambda z: ndimage.correlate(z, w, mode="constant")[3:-3, 3:-3]
        mx, my = f(x), f(y)
        vx, vy, cxy = f(x * x) - mx**2, f(y * y) - my**2, f(x * y) - mx * my
        vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identity_symmetry_and_oracle(rng):
    a = rng.uniform(size=(20, 24, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), abs=1e-10)
    assert ssim(a, b) < 1.0
    with pytest.raises(ValueError):
        ssim(a[:5, :5], a[:5, :5])


def test_gaussian_window():
    w = gaussian_window()
    assert w.shape == (7, 7) and abs(w.sum() - 1) < 1e-12 and w[3, 3] == w.max()


def test_frechet_closed_forms(rng):
    assert frechet_distance([1.0], [[4.0]], [3.0], [[9.0]]) == pytest.approx((1 - 3) ** 2 + (2 - 3) ** 2)
    d = rng.uniform(0.1, 2, 5)
    e = rng.uniform(0.1, 2, 5)
    mu = rng.normal(size=5)
    ref = np.sum(mu**2) + np.sum((np.sqrt(d) - np.sqrt(e)) ** 2)
    assert frechet_distance(mu, np.diag(d), np.zeros(5), np.diag(e)) == pytest.approx(ref, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_frechet_matches_sqrtm(seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(6, 6)), r.normal(size=(6, 6))
    a, b = x @ x.T + 0.1 * np.eye(6), y @ y.T + 0.1 * np.eye(6)
    mu_a, mu_b = r.normal(size=6), r.normal(size=6)
    ref = np.sum((mu_a - mu_b) ** 2) + np.trace(a + b - 2 * linalg.sqrtm(a @ b).real)
    got = frechet_distance(mu_a, a, mu_b, b)
    assert got == pytest.approx(ref, rel=1e-6, abs=1e-8)
    assert got >= -1e-9


def _rank_oracle(sims, gallery_ids, targets, n):
    out = []
    for row, t in zip(sims, targets):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(t in [gallery_ids[j] for j in order[:n]])
    return np.array(out)


def test_rank_n_bruteforce():
    r = np.random.default_rng(0)
    for _ in range(200):
        g = int(r.integers(1, 9))
        p = int(r.integers(1, 6))
        sims = np.round(r.uniform(-1, 1, (p, g)), 1)  # coarse values force ties
        gids = list(r.permutation(100)[:g])
        targets = list(r.choice(gids, p))
        for n in (1, 2, 5):
            assert np.array_equal(rank_n_success(sims, gids, targets, n), _rank_oracle(sims, gids, targets, n))


def test_rank_n_errors():
    with pytest.raises(ValueError):
        rank_n_success(np.zeros((1, 2)), [1, 2], [3], 1)
    with pytest.raises(ValueError):
        rank_n_success(np.zeros((1, 2)), [1, 1], [1], 1)
    with pytest.raises(ValueError):
        rank_n_success(np.zeros((1, 2)), [1, 2], [1], 0)


def test_asr_hand_count(tiny_models, corpus64):
    m = tiny_models.zoo_by_name["s1"]
    a = np.stack([s.image for s in corpus64[:20]])
    b = np.stack([s.image for s in corpus64[20:40]])
    sims = pair_similarities(m, a, b)
    old = m.threshold_far01
    try:
        m.threshold_far01 = float(np.sort(sims)[13])  # exactly 7 pairs at or above
        assert verification_hits(a, b, m).sum() == 7
        assert asr_verification(a, b, m) == pytest.approx(7 / 20)
        m.threshold_far01 = None
        with pytest.raises(UncalibratedError):
            asr_verification(a, b, m)
    finally:
        m.threshold_far01 = old


def test_fid_self_zero(tiny_models, corpus64):
    imgs = np.stack([s.image for s in corpus64[:40]])
    assert abs(fid_feature(imgs, imgs, tiny_models.semantic)) < 1e-6
    assert fid_feature(imgs, imgs[:, ::-1], tiny_models.semantic) > 0


def test_paired_bootstrap():
    a = np.linspace(0, 1, 50)
    assert paired_bootstrap(a, a) == (0.0, 1.0)
    diff, p = paired_bootstrap(a + 0.5, a)
    assert diff == pytest.approx(0.5) and p == 0.0
    r = np.random.default_rng(1)
    x = r.normal(size=200)
    _, p1 = paired_bootstrap(x, x - 0.3)
    _, p2 = paired_bootstrap(x, x + 0.3)
    assert p1 < 0.05 < 0.95 < p2
    assert paired_bootstrap(x, x - 0.1, seed=3) == paired_bootstrap(x, x - 0.1, seed=3)


def test_protocols(corpus64):
    vp = build_verification_protocol(corpus64, 2, 15, ["a"], ["b"], seed=4)
    assert len(vp.groups) == 2 and len(vp.pairs) == 30
    assert all(corpus64[p.source].attrs.identity_id != corpus64[p.target].attrs.identity_id for p in vp.pairs)
    assert vp.pairs == build_verification_protocol(corpus64, 2, 15, ["a"], ["b"], seed=4).pairs
    with pytest.raises(ValueError, match="overlap"):
        build_verification_protocol(corpus64, 1, 2, ["a"], ["a"], seed=0)
    ip = build_identification_protocol(corpus64, seed=0)
    ids = [s.attrs.identity_id for s in corpus64]
    assert set(ip.gallery).isdisjoint(ip.probes)
    assert sorted(ids[g] for g in ip.gallery) == sorted(set(ids))
    for p, t, gt in zip(ip.probes, ip.targets, ip.gallery_targets):
        assert ids[p] != t and ids[gt] == t


def test_report_validation(tmp_path):
    kw = dict(label="x", asr_per_model={"m": 0.5}, blackbox_average=0.5, whitebox_average=0.5,
              clean_asr_per_model={"m": 0.0}, rank1_t=0.2, rank5_t=0.4, psnr=30.0, ssim=0.9,
              fid_feature=1.0, mean_whitebox_similarity=0.1, n_pairs=2, config={})
    rep = EvalReport(**kw)
    rep.to_json(tmp_path / "r.json")
    assert json.load(open(tmp_path / "r.json"))["rank5_t"] == 0.4
    write_report_table([rep], tmp_path / "t.csv", ["m"])
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0][:3] == ["method", "m", "average"] and rows[1][1] == "0.5000"
    with pytest.raises(ValueError):
        EvalReport(**{**kw, "rank1_t": 0.5})
    with pytest.raises(ValueError):
        EvalReport(**{**kw, "asr_per_model": {"m": 1.5}})


def test_run_protocol_end_to_end(tiny_models, corpus64):
    vp = build_verification_protocol(corpus64, 1, 4, ["s1", "s2"], ["b1"], seed=0)
    ip = build_identification_protocol(corpus64, seed=0)
    ip.probes, ip.targets, ip.gallery_targets = ip.probes[:3], ip.targets[:3], ip.gallery_targets[:3]
    cfg = ProtectionConfig(steps=4, stage2_step=2)
    rep, results = run_protocol(vp, corpus64, cfg, tiny_models, "tiny", identification=ip)
    assert rep.n_pairs == 4 and not rep.failures and len(results) == 4
    assert set(rep.asr_per_model) == {"s1", "s2", "b1"}
    assert rep.blackbox_average == rep.asr_per_model["b1"]
    assert 0 <= rep.rank1_t <= rep.rank5_t <= 1
    assert 0 < rep.ssim <= 1 and rep.psnr > 0 and len(rep.per_pair_blackbox) == 4
    # reusing precomputed results reproduces the same report
    rep2, _ = run_protocol(vp, corpus64, cfg, tiny_models, "tiny", results=results)
    assert rep2.asr_per_model == rep.asr_per_model and rep2.psnr == rep.psnr
