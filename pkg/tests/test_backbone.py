import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from privportrait.backbone import (
    AutoEncoder,
    ConditionBundle,
    CrossAttention,
    Denoiser,
    LatentCodec,
    LatentState,
    NoiseSchedule,
    PretrainConfig,
    attention,
    ddim_sample,
    ddim_step,
    ddim_update,
    decoupled_attention,
    guided_eps,
    predict_x0,
    pretrain_backbone,
    q_sample,
    unconditional,
)
from privportrait.checkpoint import module_checksum
from privportrait.frzoo import FRModel, FRNet

TINY = {"channels": (8, 16, 16), "t_dim": 32, "d_attn": 16}


def _bundle(b=2, seed=0, n_t=5, identity=True, lam_i=1.0, lam_id=1.0):
    g = torch.Generator().manual_seed(seed)
    text = torch.randn(b, n_t, 64, generator=g)
    mask = torch.ones(b, n_t, dtype=torch.bool)
    mask[:, -1] = False
    image = torch.randn(b, 4, 64, generator=g)
    ident = torch.randn(b, 4, 64, generator=g) if identity else None
    return ConditionBundle(text, image, ident, lam_i, lam_id, mask)


# --- schedule --------------------------------------------------------------


def test_cosine_schedule_invariants():
    s = NoiseSchedule.cosine()
    assert s.T == 1000 and len(s.alphas_bar) == 1000
    assert np.all(np.diff(s.alphas_bar) < 0)
    assert np.all((s.alphas_bar > 0) & (s.alphas_bar <= 1))
    assert s.alpha_bar(0) == 1.0
    assert s.guidance_sigma(0) == 0.0
    assert s.guidance_sigma(500) == pytest.approx(math.sqrt(1 - s.alpha_bar(500)))


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(3, np.array([0.9, 0.95, 0.5]), np.zeros(3))
    with pytest.raises(ValueError):
        NoiseSchedule(2, np.array([0.9, 0.5]), np.zeros(3))
    with pytest.raises(ValueError):
        NoiseSchedule.cosine().alpha_bar(1001)


def test_sampling_timesteps():
    ts = NoiseSchedule.cosine().sampling_timesteps(50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 20
    assert all(a > b for a, b in zip(ts, ts[1:]))


# --- x0 prediction ----------------------------------------------------------


def _schedule_with(ab: float) -> NoiseSchedule:
    return NoiseSchedule(2, np.array([ab, ab / 2]), np.zeros(2))


def test_predict_x0_cases(rng):
    z = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
    eps = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
    assert torch.equal(predict_x0(LatentState(z, 1), eps, _schedule_with(1.0)), z)
    s = _schedule_with(0.5)
    assert torch.allclose(predict_x0(LatentState(z, 1), torch.zeros_like(z), s), z / math.sqrt(0.5))
    manual = (z - math.sqrt(0.5) * eps) / math.sqrt(0.5)
    assert torch.allclose(predict_x0(LatentState(z, 1), eps, s), manual, atol=1e-15)
    with pytest.raises(ValueError):
        predict_x0(LatentState(z, 0), eps, s)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_predict_x0_roundtrip(t, seed):
    s = NoiseSchedule.cosine()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    zt = q_sample(x0, torch.full((2,), t), eps, s)
    rec = predict_x0(LatentState(zt, t), eps, s)
    tol = 1e-12 / math.sqrt(s.alpha_bar(t))
    assert torch.allclose(rec, x0, atol=tol)


def test_ddim_update_scalar():
    s = NoiseSchedule.cosine()
    z, eps = torch.tensor([[0.7]]), torch.tensor([[-0.3]])
    t, nt = 600, 580
    ab, abn = s.alpha_bar(t), s.alpha_bar(nt)
    x0 = (0.7 - math.sqrt(1 - ab) * -0.3) / math.sqrt(ab)
    expected = math.sqrt(abn) * x0 + math.sqrt(1 - abn) * -0.3
    assert ddim_update(z, eps, t, nt, s).item() == pytest.approx(expected, rel=1e-6)


# --- decoupled attention ----------------------------------------------------


def _xattn(seed=0):
    torch.manual_seed(seed)
    return CrossAttention(16, 64, 32).eval()


def test_zero_weights_equal_text_only():
    m = _xattn()
    q = torch.randn(2, 10, 32)
    b = _bundle(lam_i=0.0, lam_id=0.0)
    text_only = attention(q, m.to_k(b.text), m.to_v(b.text), b.text_mask)
    assert torch.equal(decoupled_attention(q, b, m), text_only)


def test_identity_equal_to_image_stream():
    m = _xattn()
    m.to_k_id.weight.data.copy_(m.to_k_img.weight)
    m.to_v_id.weight.data.copy_(m.to_v_img.weight)
    q = torch.randn(2, 10, 32)
    b = _bundle()
    b.identity = b.image.clone()
    text = attention(q, m.to_k(b.text), m.to_v(b.text), b.text_mask)
    img = attention(q, m.to_k_img(b.image), m.to_v_img(b.image))
    assert torch.allclose(decoupled_attention(q, b, m), text + 2 * img, atol=1e-6)


@pytest.mark.parametrize("which", ["lambda_image", "lambda_id"])
def test_attention_linear_in_lambda(which):
    m = _xattn().double()
    q = torch.randn(2, 10, 32, dtype=torch.float64)
    b = _bundle()
    b = ConditionBundle(b.text.double(), b.image.double(), b.identity.double(), 0.7, 0.4, b.text_mask)
    outs = []
    for lam in (0.0, 1.0, 2.5):
        bb = ConditionBundle(b.text, b.image, b.identity, b.lambda_image, b.lambda_id, b.text_mask)
        setattr(bb, which, lam)
        outs.append(decoupled_attention(q, bb, m))
    d1, d2 = outs[1] - outs[0], outs[2] - outs[0]
    assert torch.allclose(d2, 2.5 * d1, atol=1e-12)


def test_single_token_hand_computed():
    m = _xattn()
    q = torch.randn(1, 1, 32)
    b = ConditionBundle(torch.randn(1, 1, 64), torch.randn(1, 1, 64), torch.randn(1, 1, 64), 0.5, 2.0)
    # one key per stream: softmax weight is exactly 1, so each term is the value vector
    expected = m.to_v(b.text) + 0.5 * m.to_v_img(b.image) + 2.0 * m.to_v_id(b.identity)
    assert torch.allclose(decoupled_attention(q, b, m), expected, atol=1e-6)


def test_empty_stream_contributes_nothing():
    m = _xattn()
    q = torch.randn(2, 10, 32)
    b = _bundle()
    empty = ConditionBundle(b.text, torch.zeros(2, 0, 64), None, 1.0, 1.0, b.text_mask)
    text_only = ConditionBundle(b.text, None, None, 0.0, 0.0, b.text_mask)
    assert torch.equal(decoupled_attention(q, empty, m), decoupled_attention(q, text_only, m))


def test_attention_width_mismatch():
    m = _xattn()
    b = ConditionBundle(torch.randn(1, 3, 32))
    with pytest.raises(ValueError, match="width"):
        decoupled_attention(torch.randn(1, 4, 32), b, m)


def test_identity_projections_exist_iff_enabled():
    assert hasattr(Denoiser(dict(TINY, identity=True)).attn, "to_k_id")
    m = Denoiser(dict(TINY, identity=False))
    assert not hasattr(m.attn, "to_k_id")
    with pytest.raises(ValueError, match="identity"):
        decoupled_attention(torch.randn(2, 4, 16), _bundle(), m.attn)


# --- denoiser and sampler ---------------------------------------------------


def _denoiser(seed=0):
    torch.manual_seed(seed)
    m = Denoiser(TINY)
    for p in m.conv_out.parameters():  # make the output depend on the input
        torch.nn.init.normal_(p, std=0.1)
    return m.eval()


def test_denoiser_shape():
    m = _denoiser()
    z = torch.randn(2, 3, 32, 32)
    assert m(z, torch.tensor([5, 900]), _bundle()).shape == z.shape


def test_cfg_conventions():
    m = _denoiser()
    z = torch.randn(2, 3, 32, 32)
    b = _bundle()
    t = torch.full((2,), 700)
    with torch.no_grad():
        eps_c = m(z, t, b)
        eps_u = m(z, t, unconditional(b))
    assert torch.equal(guided_eps(m, z, 700, b, 0.0), eps_u)
    assert torch.equal(guided_eps(m, z, 700, b, 1.0), eps_c)
    assert torch.allclose(guided_eps(m, z, 700, b, 5.0), eps_u + 5 * (eps_c - eps_u), atol=1e-5)
    ub = unconditional(b)
    assert torch.all(ub.text == 0) and ub.text_mask.all()


def test_ddim_step_precondition_and_determinism():
    m = _denoiser()
    s = NoiseSchedule.cosine()
    b = _bundle()
    z = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    with pytest.raises(ValueError):
        ddim_step(LatentState(z, 500), m, b, 5.0, 500, s)
    st1, _ = ddim_step(LatentState(z, 500), m, b, 5.0, 480, s)
    assert st1.t == 480
    a = ddim_sample(m, b, s, z, steps=5)
    c = ddim_sample(m, b, s, z, steps=5)
    assert torch.equal(a, c)


def test_ddim_batch_matches_single():
    m = _denoiser()
    s = NoiseSchedule.cosine()
    b = _bundle()
    z = torch.randn(2, 3, 32, 32)
    both = ddim_sample(m, b, s, z, steps=4)
    one = ddim_sample(m, b.index(slice(1, 2)), s, z[1:], steps=4)
    assert torch.allclose(both[1:], one, atol=1e-5)


# --- codec ------------------------------------------------------------------


def test_pixel_codec_roundtrip_exact():
    codec = LatentCodec("pixel")
    x = torch.randint(0, 257, (2, 3, 32, 32)).float() / 256.0  # dyadic values
    assert torch.equal(codec.decode(codec.encode(x)), x)
    z = torch.randn(2, 3, 32, 32) * 3
    out = codec.decode(z)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        codec.encode(torch.rand(2, 1, 32, 32))
    with pytest.raises(ValueError):
        codec.decode(torch.rand(2, 4, 32, 32))


def test_autoencoder_codec_shapes():
    torch.manual_seed(0)
    codec = LatentCodec("autoencoder", AutoEncoder().eval())
    x = torch.rand(2, 3, 32, 32)
    z = codec.encode(x)
    assert z.shape == (2, 4, 16, 16) == (2, *codec.latent_shape())
    out = codec.decode(z)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        LatentCodec("autoencoder")
    with pytest.raises(ValueError):
        LatentCodec("vae")


# --- pretraining ------------------------------------------------------------


@pytest.fixture(scope="module")
def sem_model():
    torch.manual_seed(0)
    net = FRNet("conv3_max64").eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return FRModel("semantic", net)


def _cfg(**kw):
    base = dict(steps=6, batch_size=8, denoiser=TINY, log_every=0)
    base.update(kw)
    return PretrainConfig(**base)


def test_pretrain_deterministic_and_logged(small_corpus, sem_model):
    s = NoiseSchedule.cosine()
    r1 = pretrain_backbone(small_corpus, s, _cfg(), 3, sem_model)
    r2 = pretrain_backbone(small_corpus, s, _cfg(), 3, sem_model)
    assert module_checksum(r1.denoiser) == module_checksum(r2.denoiser)
    assert len(r1.losses) == 6 and all(np.isfinite(r1.losses))
    assert r1.stats["samples"] == 48
    a = r1.denoiser.attn
    assert torch.equal(a.to_k_id.weight, a.to_k_img.weight)
    assert not any(p.requires_grad for p in r1.denoiser.parameters())


def test_pretrain_forced_text_drop(small_corpus, sem_model):
    seen = []
    pretrain_backbone(small_corpus, NoiseSchedule.cosine(), _cfg(text_drop=1.0), 0, sem_model,
                      on_batch=lambda b, info: seen.append((b.text.abs().max().item(), bool(b.text_mask.all()))))
    assert len(seen) == 6 and all(m == 0 and full for m, full in seen)


def test_pretrain_dropout_rates(small_corpus, sem_model):
    r = pretrain_backbone(small_corpus, NoiseSchedule.cosine(), _cfg(steps=25, batch_size=32), 0, sem_model)
    n = r.stats["samples"]
    assert abs(r.stats["text_dropped"] / n - 0.10) < 0.04
    assert abs(r.stats["background_dropped"] / n - 0.25) < 0.06
