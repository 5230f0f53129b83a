"""Fast oracle suite: attention, masked loss, blend, archive round trip and
finite-difference gradient checks on a micro pipeline (8x8 images, f=2, d=8)."""

from __future__ import annotations

import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import mfca as mfca_mod
from . import oracles
from .autoenc import Autoencoder, images_to_tensor
from .diffusion import blended_edit_sample, loss_face, loss_mse, loss_overall, guided_eps, q_sample, schedule_for
from .embedders import FaceEncoder
from .persistence import load_config, read_archive, write_archive
from .pipeline import build_conditions, build_models, SourceTensors
from .denoiser import pose_raster
from .synthdata import DensePoseMap
from .uvmap import face_mask, warp_to_atlas


def random_dpmap(rng: np.random.Generator, h: int, w: int, parts: int = 10) -> DensePoseMap:
    part = rng.integers(0, parts + 1, size=(h, w))
    part[0, 0] = 1  # at least one head pixel
    uv = rng.uniform(0, 1, size=(h, w, 2)).astype(np.float32)
    uv[part == 0] = 0
    return DensePoseMap(part.astype(np.int64), uv)


def micro_setup(seed: int = 0, batch: int = 2, dtype=torch.float64, ablation: str = "full"):
    """Micro models with randomised (non-zero) weights and a fixed batch.

    Returns (models, source tensors, z0, raster, mask).
    """
    cfg = load_config(overrides={"preset": "micro", "ablation": ablation, "seed": seed})
    torch.manual_seed(seed)
    ae = Autoencoder(cfg.f, cfg.latent_channels, width=8)
    face = FaceEncoder(d=cfg.d, feat=8, size=cfg.face_size, width=4)
    models = build_models(cfg, ae, face)
    for m in (models.ae, models.face, models.net):
        m.to(dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in models.net.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=dtype))
    rng = np.random.default_rng(seed)
    h, w = cfg.canvas
    images = rng.uniform(0, 1, size=(batch, h, w, 3)).astype(np.float32)
    dps = [random_dpmap(rng, h, w, cfg.parts) for _ in range(batch)]
    atlases = [warp_to_atlas(im, dp, models.layout) for im, dp in zip(images, dps)]
    img_t = images_to_tensor(list(images), dtype)
    atlas_t = images_to_tensor([a.texels for a in atlases], dtype)
    with torch.no_grad():
        a_ref = models.ae.encode(atlas_t) * models.ae.latent_scale
        f_emb = models.face(img_t[:, :, :cfg.face_size, :cfg.face_size])[:, None]
        z0 = models.ae.encode(img_t.flip(0)) * models.ae.latent_scale
    raster = torch.as_tensor(np.stack([pose_raster(dp, cfg.parts) for dp in dps[::-1]]),
                             dtype=dtype).permute(0, 3, 1, 2).contiguous()
    mask = torch.as_tensor(np.stack([face_mask(dp, cfg.latent_hw) for dp in dps[::-1]]), dtype=dtype)[:, None]
    return models, SourceTensors(img_t, atlas_t, a_ref, f_emb), z0, raster, mask


def pipeline_gradcheck(n_checks: int = 200, seed: int = 0) -> dict:
    models, src, z0, raster, mask = micro_setup(seed)
    schedule = schedule_for(models)
    gen = torch.Generator().manual_seed(seed + 7)
    t = torch.tensor([3, 71])
    noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_t = q_sample(schedule, z0, t, noise)
    params = [p for p in models.net.parameters()]

    def loss_fn():
        conds = build_conditions(models, src)
        return loss_overall(noise, models.net(z_t, t, raster, conds.emb, conds.c_ref), mask)

    return oracles.finite_difference_check(loss_fn, params, n_checks, seed=seed)


def autoencoder_gradcheck(n_checks: int = 200, seed: int = 0) -> dict:
    torch.manual_seed(seed)
    ae = Autoencoder(2, 4, width=8).double()
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    return oracles.finite_difference_check(lambda: ((ae(x) - x) ** 2).mean(), list(ae.parameters()),
                                           n_checks, seed=seed)


def check_attention(n: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = {torch.float32: 0.0, torch.float64: 0.0}
    for _ in range(n):
        q_n, k_n, d = (int(v) for v in rng.integers(1, 9, size=3))
        Q, K, V = (rng.standard_normal((r, d)) for r in (q_n, k_n, k_n))
        ref = oracles.attention_loops(Q, K, V)
        for dt in worst:
            got = mfca_mod.attention(*(torch.as_tensor(a, dtype=dt) for a in (Q, K, V)))
            worst[dt] = max(worst[dt], float(np.abs(got.double().numpy() - ref).max()))
    return {"f32": worst[torch.float32], "f64": worst[torch.float64],
            "ok": worst[torch.float32] <= 1e-6 and worst[torch.float64] <= 1e-12}


def check_masked_loss(seed: int = 0) -> dict:
    gen = torch.Generator().manual_seed(seed)
    e, eh = (torch.randn(2, 4, 6, 6, generator=gen, dtype=torch.float64) for _ in range(2))
    m = (torch.rand(2, 1, 6, 6, generator=gen) > 0.5).double()
    err_face = abs(loss_face(e, eh, m).item() - oracles.masked_mse_loops(e, eh, m))
    err_mse = abs(loss_mse(e, eh).item() - oracles.mean_square_loops(e, eh))
    err_sum = abs(loss_overall(e, eh, m).item() - (loss_mse(e, eh).item() + loss_face(e, eh, m).item()))
    return {"face": err_face, "mse": err_mse, "sum": err_sum,
            "ok": max(err_face, err_mse, err_sum) <= 1e-12}


def check_blend(seed: int = 0) -> dict:
    models, src, _, raster, _ = micro_setup(seed, dtype=torch.float32)
    with torch.no_grad():
        c_s = build_conditions(models, src)
        c_r = build_conditions(models, SourceTensors(*(x.flip(0) for x in (src.image, src.atlas, src.a_ref, src.f_emb))))
    h, w = models.latent_hw
    m = torch.as_tensor((np.indices((h, w)).sum(0) % 2).astype(np.float32))[None, None].expand(raster.shape[0], 1, h, w)
    worst = 0.0
    steps = []

    def trace(i, t, z_in, eps, z_out):
        steps.append((t, z_in.clone(), eps.clone()))

    blended_edit_sample(models, c_s, c_r, m, raster, steps=4, seed=seed, cfg_scale=2.0, trace=trace)
    with torch.no_grad():
        for t, z_in, eps in steps:
            tt = torch.full((raster.shape[0],), t, dtype=torch.long)
            e_s = guided_eps(models, z_in, tt, raster, c_s, 2.0)
            e_r = guided_eps(models, z_in, tt, raster, c_r, 2.0)
            worst = max(worst, float(np.abs(eps.double().numpy() - oracles.blend_loops(m, e_s, e_r)).max()))
    return {"max_err": worst, "ok": worst <= 1e-6}


def check_archive(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32),
               "b": rng.standard_normal((2, 2, 2)),
               "c": rng.integers(0, 255, size=(5,)).astype(np.uint8),
               "scalar": np.array(1.5, dtype=np.float32)}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "rt.mcld"
        write_archive(path, tensors, {"k": 1})
        back, meta = read_archive(path)
    ok = meta == {"k": 1} and set(back) == set(tensors) and all(
        back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
        for k, v in tensors.items())
    return {"ok": ok}


def run_all(n_grad: int = 200) -> list[tuple[str, bool, dict]]:
    results = []
    for name, fn in (("attention", check_attention), ("masked_loss", check_masked_loss),
                     ("blend", check_blend), ("archive", check_archive)):
        t0 = time.time()
        r = fn()
        r["seconds"] = round(time.time() - t0, 3)
        results.append((name, bool(r["ok"]), r))
    for name, fn in (("grad_pipeline", pipeline_gradcheck), ("grad_autoenc", autoencoder_gradcheck)):
        t0 = time.time()
        r = fn(n_grad)
        summary = {"max_rel_err": r["max_rel_err"], "checks": len(r["checks"]), "seconds": round(time.time() - t0, 3)}
        results.append((name, r["max_rel_err"] <= 1e-4, summary))
    return results
