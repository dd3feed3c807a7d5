import pytest
import torch
from hypothesis import given, settings, strategies as st

from privportrait.encryptor import N_ID_TOKENS, EncryptedIdentity, IdProjector, fuse_identity, project_identity, semantic_encode
from privportrait.frzoo import FRModel, FRNet, to_tensor
from privportrait.synthface import stack_images


def test_semantic_encode_unit_and_deterministic(tiny_models):
    x = torch.rand(4, 3, 32, 32)
    a = semantic_encode(x, tiny_models.semantic)
    assert torch.equal(a, semantic_encode(x, tiny_models.semantic))
    assert torch.allclose(a.norm(dim=1), torch.ones(4), atol=1e-6)


def test_fuse_term_isolation(tiny_models):
    x = torch.rand(2, 3, 32, 32)
    zoo = tiny_models.surrogate_models
    sem = tiny_models.semantic
    assert torch.equal(fuse_identity(x, zoo, 1.0, 0.0, sem).raw, semantic_encode(x, sem))
    assert torch.all(fuse_identity(x, zoo, 0.0, 0.0, sem).raw == 0)
    manual = semantic_encode(x, sem) + zoo[0].embed(x) + zoo[1].embed(x)
    assert torch.allclose(fuse_identity(x, zoo, 1.0, 1.0, sem).raw, manual, atol=1e-6)


# module-level models: hypothesis does not mix with function-scoped fixtures
torch.manual_seed(0)
_ZOO = {"zoo": [FRModel("a", FRNet("conv2_avg").eval()), FRModel("b", FRNet("conv4_max").eval())],
        "sem": FRModel("s", FRNet("conv3_max64").eval()), "x": torch.rand(2, 3, 32, 32)}


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_fuse_linear_in_alpha(a1, a2, beta):
    zoo = _ZOO["zoo"]
    sem = _ZOO["sem"]
    x = _ZOO["x"]
    lhs = fuse_identity(x, zoo, a1 + a2, beta, sem).raw
    rhs = fuse_identity(x, zoo, a1, beta, sem).raw + fuse_identity(x, zoo, a2, 0.0, sem).raw
    assert torch.allclose(lhs, rhs, atol=1e-5)


def test_fuse_errors(tiny_models):
    x = torch.rand(1, 3, 32, 32)
    with pytest.raises(ValueError, match="at least one"):
        fuse_identity(x, [], 1.0, 1.0, tiny_models.semantic)
    wide = FRModel("w", FRNet("conv2_avg", embed_dim=32).eval())
    with pytest.raises(ValueError, match="widths"):
        fuse_identity(x, [wide], 1.0, 1.0, tiny_models.semantic)


def test_projector_zero_and_shape():
    proj = IdProjector(64)
    raw = torch.randn(3, 64)
    assert torch.all(proj(raw) == 0)  # zero-initialised output layer
    torch.nn.init.normal_(proj.fc2.weight)
    enc = EncryptedIdentity(torch.zeros(2, 64), 0.0, 0.0)
    assert torch.all(project_identity(enc, proj) == 0)  # zero input
    enc = EncryptedIdentity(raw, 1.0, 1.0)
    tokens = project_identity(enc, proj)
    assert tokens.shape == (3, N_ID_TOKENS, 64) and enc.tokens is tokens
    assert torch.equal(tokens, proj(raw))


def test_projector_save_load(tmp_path):
    proj = IdProjector(64, hidden=16)
    torch.nn.init.normal_(proj.fc2.weight)
    path = str(tmp_path / "p.npz")
    proj.save(path, {"seed": 1})
    loaded = IdProjector.load(path)
    raw = torch.randn(2, 64)
    assert torch.equal(loaded(raw), proj(raw))
    assert not any(p.requires_grad for p in loaded.parameters())


def test_same_identity_semantic_similarity(corpus64, tiny_models):
    # an untrained encoder still maps near-identical renders closer together
    ids = torch.tensor([s.attrs.identity_id for s in corpus64])
    with torch.no_grad():
        e = semantic_encode(to_tensor(stack_images(corpus64)), tiny_models.semantic)
    sims = e @ e.T
    same = (ids[:, None] == ids[None]) & ~torch.eye(len(ids), dtype=torch.bool)
    diff = ids[:, None] != ids[None]
    assert sims[same].mean() > sims[diff].mean()
