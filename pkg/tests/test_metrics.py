import math

import numpy as np
import pytest
import torch

from mcld import oracles
from mcld.embedders import FaceEncoder
from mcld.metrics import EvalReport, METRIC_KEYS, cosine, evaluate, face_similarity, psnr, ssim, texture_error
from mcld.synthdata import NUM_PARTS, sample_pair
from mcld.uvmap import AtlasLayout, atlas_coords, warp_to_atlas

LAYOUT = AtlasLayout(NUM_PARTS, 32)


def test_ssim_identity_and_ordering():
    rng = np.random.default_rng(0)
    x = rng.random((24, 24, 3))
    assert abs(ssim(x, x) - 1.0) <= 1e-8
    assert ssim(x, 1 - x) < ssim(x, np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)) < 1.0


def test_ssim_against_loops():
    rng = np.random.default_rng(1)
    x, y = rng.random((16, 16)), rng.random((16, 16))
    assert abs(ssim(x, y) - oracles.ssim_loops(x, y)) <= 1e-6
    x3, y3 = rng.random((13, 12, 3)), rng.random((13, 12, 3))
    assert abs(ssim(x3, y3) - oracles.ssim_loops(x3, y3)) <= 1e-6


def test_ssim_errors():
    with pytest.raises(ValueError, match="smaller"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError, match="mismatch"):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_psnr():
    x = np.zeros((4, 4, 3))
    y = np.full((4, 4, 3), 0.1)  # MSE 0.01 -> 20 dB
    assert abs(psnr(x, y) - 20.0) <= 1e-9
    assert psnr(y, x) == psnr(x, y)
    assert psnr(x, x) == math.inf


def test_cosine_orthogonal():
    assert cosine([1.0, 0.0, 0.0], [0.0, 2.0, 0.0]) == 0.0
    assert abs(cosine([1.0, 2.0], [2.0, 4.0]) - 1.0) <= 1e-12


def test_face_similarity_identical():
    torch.manual_seed(0)
    enc = FaceEncoder(d=16, size=16).eval()
    s = sample_pair(0)[0]
    fs, dist = face_similarity(enc, s.image, s.face_box, s.image, s.face_box)
    assert abs(fs - 1.0) <= 1e-6 and dist == 0.0


@pytest.fixture(scope="module")
def pairs():
    return [sample_pair(i) for i in range(20)]


def test_texture_error_of_true_target_small(pairs):
    errs = [texture_error(t.image, t.dpmap, warp_to_atlas(s.image, s.dpmap, LAYOUT)) for s, t in pairs]
    assert min(errs) >= 0.0
    assert np.mean(errs) <= 0.05


def test_texture_error_zero_image(pairs):
    s, t = pairs[0]
    src = warp_to_atlas(s.image, s.dpmap, LAYOUT)
    # a black render puts zeros on every texel the target pose reaches
    reach = np.zeros(LAYOUT.shape, bool)
    for y, x in zip(*np.nonzero(t.dpmap.part)):
        tx, ty = atlas_coords(int(t.dpmap.part[y, x]), *map(float, t.dpmap.uv[y, x]), LAYOUT)
        reach[ty, tx] = True
    both = reach & src.valid
    expected = np.abs(src.texels[both].astype(np.float64)).mean()
    got = texture_error(np.zeros_like(t.image), t.dpmap, src)
    assert abs(got - expected) <= 1e-7


def test_texture_error_no_overlap(pairs):
    s, t = pairs[0]
    src = warp_to_atlas(s.image, s.dpmap, LAYOUT)
    empty = type(t.dpmap)(np.zeros_like(t.dpmap.part), t.dpmap.uv)
    with pytest.raises(ValueError):
        texture_error(t.image, empty, src)


def test_evaluate_empty(small_models, small_pairs):
    rep = evaluate(small_models, small_pairs, 0)
    assert rep.rows == []
    assert all(v is None for v in rep.aggregate.values())


def test_evaluate_schema_and_determinism(small_models, small_pairs):
    a = evaluate(small_models, small_pairs, 3, seed=5, batch=2)
    b = evaluate(small_models, small_pairs, 3, seed=5, batch=2)
    assert a.rows == b.rows
    assert [r["pair"] for r in a.rows] == [0, 1, 2]
    agg = a.aggregate
    assert set(agg) == set(METRIC_KEYS) | {"fid", "lpips"}
    assert agg["fid"] is None and agg["lpips"] is None
    for k in ("fs_ref", "dist_ref", "fs_tgt", "dist_tgt"):
        assert abs(agg[k] - sum(r[k] for r in a.rows) / 3) <= 1e-12
    lines = a.to_csv().strip().splitlines()
    assert lines[0].split(",")[:3] == ["pair", "ssim", "psnr"]
    assert lines[-1].startswith("mean,") and len(lines) == 5


def test_evaluate_requires_models(small_pairs):
    with pytest.raises(ValueError):
        evaluate(None, small_pairs, 1)


def test_report_skips_nan():
    rep = EvalReport(rows=[{"pair": 0, "tex_err": 0.2}, {"pair": 1, "tex_err": math.nan}])
    assert rep.aggregate["tex_err"] == 0.2
