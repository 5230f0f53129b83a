import numpy as np
import pytest
import torch

from mcld import oracles
from mcld.denoiser import PoseGuider, ReferenceNet, UNet, pose_guide, pose_raster, reference_forward, \
    timestep_embedding, unet_forward
from mcld.embedders import EmbeddingSet
from mcld.pipeline import build_conditions, describe
from mcld.selfcheck import micro_setup, pipeline_gradcheck
from mcld.synthdata import DatasetConfig, DensePoseMap, sample_pair


def test_pose_raster():
    s = sample_pair(0, DatasetConfig(canvas=(32, 32), factor=2))[0]
    r = pose_raster(s.dpmap, 10)
    assert r.shape == (32, 32, 12)
    onehot = r[..., :10].sum(-1)
    assert set(np.unique(onehot)) <= {0.0, 1.0}
    bg = s.dpmap.part == 0
    assert not r[bg].any()
    fg = ~bg
    assert np.array_equal(r[fg, 10], s.dpmap.uv[fg, 0])
    assert np.all(r[fg, :10].argmax(-1) + 1 == s.dpmap.part[fg])


def test_pose_guider_zero_init_and_shape():
    g = PoseGuider(10, 4, 4)
    raster = torch.rand(2, 12, 64, 64)
    out = pose_guide(g, raster)
    assert out.shape == (2, 4, 16, 16)
    assert not out.any()


def test_pose_guider_gradcheck():
    torch.manual_seed(0)
    g = PoseGuider(3, 2, 2, width=4).double()
    with torch.no_grad():
        for p in g.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.rand(1, 5, 8, 8, dtype=torch.float64)
    r = oracles.finite_difference_check(lambda: (pose_guide(g, x) ** 2).sum(), list(g.parameters()), 100)
    assert r["max_rel_err"] <= 1e-4


def test_reference_net():
    torch.manual_seed(0)
    ref = ReferenceNet(4, 8)
    a = torch.randn(2, 4, 24, 32)
    feats = reference_forward(ref, a, (8, 8))
    assert len(feats) == 3
    assert [tuple(f.shape) for f in feats] == [(2, 8, 8, 8), (2, 16, 4, 4), (2, 8, 8, 8)]
    again = reference_forward(ref, a, (8, 8))
    assert all(torch.equal(x, y) for x, y in zip(feats, again))


def test_timestep_embedding():
    e = timestep_embedding(torch.tensor([0, 10]), 8)
    assert e.shape == (2, 8)
    assert torch.equal(e[0, :4], torch.ones(4, dtype=torch.float64))
    assert torch.equal(e[0, 4:], torch.zeros(4, dtype=torch.float64))


def _unet_inputs(ch=8, d=8):
    torch.manual_seed(0)
    unet = UNet(4, ch, d)
    z = torch.randn(2, 4, 8, 8)
    c_ref = [torch.randn(2, ch, 8, 8), torch.randn(2, 2 * ch, 4, 4), torch.randn(2, ch, 8, 8)]
    emb = EmbeddingSet(*(torch.randn(2, 1, d) for _ in range(3)))
    return unet, z, c_ref, emb


def test_unet_shape_and_determinism():
    unet, z, c_ref, emb = _unet_inputs()
    t = torch.tensor([1, 500])
    a = unet_forward(unet, z, t, torch.zeros_like(z), c_ref, emb)
    b = unet_forward(unet, z, t, torch.zeros_like(z), c_ref, emb)
    assert a.shape == z.shape
    assert torch.equal(a, b)


def test_unet_missing_condition():
    unet, z, c_ref, emb = _unet_inputs()
    with pytest.raises(ValueError, match="A_emb"):
        unet(z, torch.tensor([1, 2]), z, c_ref, emb.replace(A_emb=None))
    with pytest.raises(ValueError):
        unet(z, torch.tensor([1, 2]), z, c_ref[:2], emb)


def test_full_model_gradcheck():
    assert pipeline_gradcheck(200)["max_rel_err"] <= 1e-4


def test_describe_counts():
    models, *_ = micro_setup()
    info = describe(models)
    assert info["trainable_total"] == sum(p.numel() for p in models.net.parameters())
    assert info["routing"] == {"use_I": True, "use_A": True, "use_F": True, "aggregation": "mfca"}


def test_trained_reference_net_uses_atlas(full_models, test_pairs):
    from mcld.pipeline import source_tensors

    src = source_tensors(full_models, [p[0] for p in test_pairs[:4]])
    with torch.no_grad():
        feats = full_models.net.refnet(src.a_ref, full_models.latent_hw)
        zeroed = full_models.net.refnet(torch.zeros_like(src.a_ref), full_models.latent_hw)
    assert all(not torch.equal(a, b) for a, b in zip(feats, zeroed))
