import numpy as np
import pytest
import torch

from privportrait.enhancer import identity_similarity_loss
from privportrait.synthface import make_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus64():
    return make_corpus(64, 10, 0)


@pytest.fixture(scope="session")
def small_corpus():
    return make_corpus(8, 4, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_models(latent_mode="pixel", seed=0, projector_scale=0.05):
    """Randomly initialised miniature versions of every component."""
    from privportrait.backbone import AutoEncoder, Denoiser, LatentCodec, NoiseSchedule, freeze
    from privportrait.encryptor import IdProjector
    from privportrait.frzoo import FRModel, FRNet
    from privportrait.mmic import ImageSemanticHead, TextEncoder
    from privportrait.pipeline import ModelBundle

    torch.manual_seed(seed)
    codec = LatentCodec("pixel") if latent_mode == "pixel" else LatentCodec("autoencoder", freeze(AutoEncoder(width=16)))
    in_ch = codec.latent_shape()[0]
    den = Denoiser({"channels": (8, 16, 16), "t_dim": 32, "d_attn": 16, "in_channels": in_ch})
    for p in den.conv_out.parameters():
        torch.nn.init.normal_(p, std=0.05)
    den.init_identity_from_image()
    semantic = FRModel("semantic", freeze(FRNet("conv3_max64", attribute_head=True)))
    zoo = [FRModel(n, freeze(FRNet(a)), i, 0.3) for i, (n, a) in
           enumerate([("s1", "conv2_avg"), ("s2", "conv4_avg"), ("b1", "conv3_avg")])]
    proj = IdProjector(semantic.net.feature_dim, hidden=32)
    torch.nn.init.normal_(proj.fc2.weight, std=projector_scale)
    return ModelBundle(NoiseSchedule.cosine(), codec, freeze(den), freeze(TextEncoder()),
                       freeze(ImageSemanticHead(semantic.net.feature_dim)), semantic, zoo, ["s1", "s2"], ["b1"],
                       freeze(proj))


@pytest.fixture(scope="session")
def tiny_models():
    return make_tiny_models()


def fd_check(codec, models, seed=0, n_coords=20, h=1e-4):
    """Max relative error between autograd and central differences of F(decode(z0), target)."""
    g = torch.Generator().manual_seed(seed)
    shape = (1, *codec.latent_shape())
    z0 = (torch.rand(shape, generator=g, dtype=torch.float64) * 1.6 - 0.8)
    target = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
    f = lambda z: identity_similarity_loss(codec.decode_raw(z), target, models).sum()  # noqa: E731
    zg = z0.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(zg), zg)
    flat = grad.flatten()
    # probe coordinates where the gradient is not negligible, so a relative error is meaningful
    big = torch.nonzero(flat.abs() > 1e-2 * flat.abs().max()).flatten()
    coords = big[torch.randperm(len(big), generator=g)[:n_coords]]
    errs = []
    with torch.no_grad():
        for c in coords.tolist():
            e = torch.zeros_like(flat)
            e[c] = h
            e = e.view_as(z0)
            fd = (f(z0 + e) - f(z0 - e)).item() / (2 * h)
            errs.append(abs(fd - flat[c].item()) / abs(flat[c].item()))
    return len(coords), max(errs)


# criterion number -> (passed, one-line detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
