import numpy as np
import pytest
import torch

from mcld.autoenc import images_to_tensor
from mcld.embedders import (
    EmbeddingSet,
    FaceEncoder,
    FaceTrainConfig,
    TokenEncoder,
    atlas_embed,
    face_crop,
    face_embed,
    image_embed,
    oracle_face_embed,
    token_grid,
    train_face_encoder,
)
from mcld.errors import DataError
from mcld.metrics import cosine
from mcld.stages import face_training_set
from mcld.synthdata import DatasetConfig, sample_pair
from mcld.uvmap import AtlasLayout, warp_to_atlas


def test_token_shapes_and_determinism():
    torch.manual_seed(0)
    enc = TokenEncoder(d=64)
    x = images_to_tensor([sample_pair(0)[0].image])
    a, b = image_embed(enc, x), image_embed(enc, x)
    assert a.shape == (1, 1, 64)
    assert torch.equal(a, b)
    multi = TokenEncoder(d=16, tokens=4, grid=(2, 2))
    assert multi(x).shape == (1, 4, 16)
    with pytest.raises(ValueError, match="cells"):
        TokenEncoder(d=16, tokens=3, grid=(2, 2))


def test_token_grid():
    assert token_grid(1) == (1, 1)
    assert token_grid(12) == (3, 4)
    assert token_grid(16) == (4, 4)
    assert token_grid(7) == (1, 7)
    with pytest.raises(ValueError):
        token_grid(0)


def test_patch_tokens_follow_their_cell():
    # a patch token depends on its own atlas tile only, up to the conv receptive field
    torch.manual_seed(0)
    lay = AtlasLayout(10, 16)
    enc = TokenEncoder(d=8, tokens=lay.rows * lay.cols, grid=(lay.rows, lay.cols))
    x = torch.rand(1, 3, *lay.shape)
    y = x.clone()
    y[:, :, 20:28, 20:28] = 0.0  # interior of tile (row 1, col 1), away from its borders
    changed = (enc(x) - enc(y)).abs().amax(-1)[0]
    assert changed[lay.cols + 1] > 0
    assert torch.count_nonzero(changed) == 1


def test_atlas_embed_shape():
    lay = AtlasLayout(10, 16)
    enc = TokenEncoder(d=32, grid=(lay.rows, lay.cols))
    s = sample_pair(0, DatasetConfig(canvas=(32, 32), factor=2))[0]
    atlas = images_to_tensor([warp_to_atlas(s.image, s.dpmap, lay).texels])
    out = atlas_embed(enc, atlas)
    assert out.shape == (1, 1, 32)
    assert torch.equal(out, atlas_embed(enc, atlas))


def test_embedding_set_helpers():
    e = EmbeddingSet(torch.ones(2, 1, 4), None, torch.ones(2, 1, 4))
    z = e.zeros_like()
    assert z.A_emb is None and not z.I_emb.any() and not z.F_emb.any()
    r = e.replace(A_emb=torch.zeros(2, 1, 4))
    assert r.A_emb is not None and r.I_emb is e.I_emb


def test_face_crop():
    s = sample_pair(0)[0]
    crop = face_crop(s.image, s.face_box, 16)
    assert crop.shape == (3, 16, 16)
    with pytest.raises(DataError):
        face_crop(s.image, (5, 5, 5, 9), 16)
    with pytest.raises(DataError):
        face_crop(s.image, (100, 100, 120, 120), 16)


def test_face_embed_unit_norm():
    torch.manual_seed(0)
    enc = FaceEncoder(d=64)
    s = sample_pair(3)[0]
    e = face_embed(enc, face_crop(s.image, s.face_box, 16))
    assert e.shape == (1, 64)
    assert abs(float(e.detach().norm()) - 1.0) <= 1e-6
    with pytest.raises(DataError):
        face_embed(enc, torch.zeros(0))


def test_oracle_face_embed():
    a, b = oracle_face_embed(5), oracle_face_embed(5)
    assert torch.equal(a, b)
    assert cosine(a, a) == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(0)
    cos = [cosine(oracle_face_embed(int(x)), oracle_face_embed(int(y)))
           for x, y in rng.integers(0, 2**40, size=(1000, 2))]
    assert abs(np.mean(cos)) < 0.1


def test_face_training_needs_two_identities():
    crops = torch.rand(4, 3, 16, 16)
    with pytest.raises(DataError):
        train_face_encoder(crops, np.zeros(4, int), 8, FaceTrainConfig(steps=1))


def test_face_training_seed_determinism_and_freeze():
    crops = torch.rand(8, 3, 16, 16)
    labels = np.array([0, 1] * 4)
    a, _ = train_face_encoder(crops, labels, 8, FaceTrainConfig(steps=5, seed=2))
    b, _ = train_face_encoder(crops, labels, 8, FaceTrainConfig(steps=5, seed=2))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
        assert not pa.requires_grad


def test_trained_face_encoder(tiny_cfg, trained_face, train_pairs, test_pairs):
    crops, labels = face_training_set(tiny_cfg, test_pairs)
    with torch.no_grad():
        emb = trained_face(crops)
    src, tgt = emb[0::2], emb[1::2]
    same = (src * tgt).sum(-1)
    assert float(same.mean()) >= 0.9
    ids = labels[0::2]
    cross = [float(src[i] @ src[j]) for i in range(len(ids)) for j in range(len(ids)) if ids[i] != ids[j]]
    assert np.mean(cross) < float(same.mean())
    # held-out identity classification: nearest class mean of training embeddings
    tr_crops, tr_labels = face_training_set(tiny_cfg, train_pairs[:500])
    with torch.no_grad():
        tr_emb = trained_face(tr_crops)
    classes = np.unique(tr_labels)
    centroids = torch.stack([tr_emb[torch.as_tensor(tr_labels == c)].mean(0) for c in classes])
    pred = classes[(emb @ centroids.T).argmax(-1).numpy()]
    assert (pred == labels).mean() > 1.0 / len(classes)


def test_trained_image_embeddings_differ(full_models, test_pairs):
    net = full_models.net
    imgs = images_to_tensor([test_pairs[0][0].image, test_pairs[1][0].image])
    lay = full_models.layout
    atl = images_to_tensor([warp_to_atlas(p[0].image, p[0].dpmap, lay).texels for p in test_pairs[:2]])
    # patch tokens carry an input-independent part (cell position, bias), so compare what the input adds
    with torch.no_grad():
        e = net.image_enc(imgs) - net.image_enc(torch.zeros_like(imgs[:1]))
        a = net.atlas_enc(atl) - net.atlas_enc(torch.zeros_like(atl[:1]))
    assert cosine(e[0], e[1]) < 0.999
    assert cosine(a[0], a[1]) < 0.999
