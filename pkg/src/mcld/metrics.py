"""Image-quality, identity and texture-fidelity metrics; evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .embedders import FaceEncoder, face_crop
from .synthdata import DensePoseMap, Sample
from .uvmap import TextureAtlas, warp_to_atlas

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, y, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM over all fully contained 11x11 windows,
    averaged over windows and channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.shape[0] < SSIM_WIN or x.shape[1] < SSIM_WIN:
        raise ValueError(f"image {x.shape[:2]} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    w = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2

    def filt(a):
        win = sliding_window_view(a, (SSIM_WIN, SSIM_WIN), axis=(0, 1))  # h' x w' x C x 11 x 11
        return np.einsum("ijcab,ab->ijc", win, w)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx ** 2
    vy = filt(y * y) - my ** 2
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


def psnr(x, y, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); identical inputs give +inf."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def cosine(a, b) -> float:
    a = torch.as_tensor(a, dtype=torch.float64).flatten()
    b = torch.as_tensor(b, dtype=torch.float64).flatten()
    return float(a @ b / (a.norm() * b.norm()))


@torch.no_grad()
def face_similarity(encoder: FaceEncoder, img_a, box_a, img_b, box_b) -> tuple[float, float]:
    """(cosine of normalised embeddings, euclidean distance of raw embeddings)."""
    crops = torch.stack([face_crop(img_a, box_a, encoder.size), face_crop(img_b, box_b, encoder.size)])
    raw = encoder.raw(crops).double()
    return cosine(raw[0], raw[1]), float((raw[0] - raw[1]).norm())


def texture_error(gen_image, tgt_dpmap: DensePoseMap, src_atlas: TextureAtlas) -> float:
    """Mean |gen - source texture| in atlas space over texels valid in both."""
    gen_atlas = warp_to_atlas(np.asarray(gen_image, dtype=np.float32), tgt_dpmap, src_atlas.layout)
    both = gen_atlas.valid & src_atlas.valid
    if not both.any():
        raise ValueError("no texel is valid in both the generated and the source atlas")
    return float(np.abs(gen_atlas.texels[both].astype(np.float64) - src_atlas.texels[both]).mean())


# ---------------------------------------------------------------- reports

METRIC_KEYS = ("ssim", "psnr", "fs_ref", "dist_ref", "fs_tgt", "dist_tgt", "tex_err")
# reserved for externally computed values; never filled here
RESERVED_KEYS = ("fid", "lpips")


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        out = {}
        for k in METRIC_KEYS:
            vals = [r[k] for r in self.rows if r.get(k) is not None and not math.isnan(r[k])]
            out[k] = float(np.mean(vals)) if vals else None
        for k in RESERVED_KEYS:
            out[k] = None
        return out

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": self.rows, "aggregate": self.aggregate},
                          indent=1, allow_nan=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = ["pair", *METRIC_KEYS, *RESERVED_KEYS]
        writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k])
                             for k in keys})
        agg = self.aggregate
        writer.writerow({"pair": "mean", **{k: "" if agg[k] is None else repr(agg[k]) for k in keys[1:]}})
        return buf.getvalue()


def pair_metrics(face_enc: FaceEncoder, gen: np.ndarray, source: Sample, target: Sample,
                 src_atlas: TextureAtlas) -> dict:
    fs_ref, dist_ref = face_similarity(face_enc, gen, target.face_box, source.image, source.face_box)
    fs_tgt, dist_tgt = face_similarity(face_enc, gen, target.face_box, target.image, target.face_box)
    try:
        tex = texture_error(gen, target.dpmap, src_atlas)
    except ValueError:
        tex = math.nan
    return {"ssim": ssim(gen, target.image), "psnr": psnr(gen, target.image),
            "fs_ref": fs_ref, "dist_ref": dist_ref, "fs_tgt": fs_tgt, "dist_tgt": dist_tgt, "tex_err": tex}


@torch.no_grad()
def evaluate(models, pairs: list[tuple[Sample, Sample]], n_pairs: int, seed: int = 0,
             batch: int = 16, steps: int | None = None, cfg_scale: float | None = None) -> EvalReport:
    """Generate the first n_pairs targets from their sources and score them
    against both the source ("ref") and the target ("tgt")."""
    from .diffusion import ddim_sample
    from .pipeline import build_conditions, source_tensors, target_pose

    if models is None:
        raise ValueError("evaluation needs a trained checkpoint")
    cfg = models.cfg
    steps = steps or cfg.ddim_steps
    cfg_scale = cfg.cfg_scale if cfg_scale is None else cfg_scale
    report = EvalReport(meta={"n_pairs": n_pairs, "seed": seed, "ddim_steps": steps, "cfg_scale": cfg_scale,
                              "ablation": cfg.ablation})
    chosen = pairs[:n_pairs]
    for b0 in range(0, len(chosen), batch):
        block = chosen[b0:b0 + batch]
        atlases = [warp_to_atlas(s.image, s.dpmap, models.layout) for s, _ in block]
        conds = build_conditions(models, source_tensors(models, [s for s, _ in block], atlases=atlases))
        raster, _ = target_pose(models, [t for _, t in block])
        gens = ddim_sample(models, conds, raster, steps, cfg_scale, 0.0, seed + b0)
        for i, ((src, tgt), gen) in enumerate(zip(block, gens)):
            row = {"pair": b0 + i}
            row.update(pair_metrics(models.face, gen, src, tgt, atlases[i]))
            report.rows.append(row)
    return report
