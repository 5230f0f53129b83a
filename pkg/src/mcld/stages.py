"""Three-stage training (autoencoder -> face encoder -> diffusion) and the
ablation / editing experiments built on top of it."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from .autoenc import AETrainConfig, Autoencoder, train_autoencoder
from .diffusion import TrainConfig, edit_sample, prepare_training_data, schedule_for, train
from .embedders import FaceEncoder, FaceTrainConfig, face_crop, train_face_encoder
from .metrics import evaluate
from .persistence import RunConfig
from .pipeline import Models, build_models, load_autoencoder, load_checkpoint, load_face_encoder, \
    save_checkpoint, save_module
from .synthdata import PART_IDS, DatasetConfig, Sample, sample_pair
from .uvmap import part_mask

log = logging.getLogger("mcld")

EVAL_SEED_OFFSET = 1_000_000


def dataset_config(cfg: RunConfig, base_seed: int = 0) -> DatasetConfig:
    return DatasetConfig(canvas=cfg.canvas, factor=cfg.f, identity_pool=cfg.identity_pool, base_seed=base_seed)


def generate_pairs(cfg: RunConfig, n: int, base_seed: int = 0) -> list[tuple[Sample, Sample]]:
    dc = dataset_config(cfg, base_seed)
    return [sample_pair(base_seed + i, dc) for i in range(n)]


def eval_pairs(cfg: RunConfig, n: int) -> list[tuple[Sample, Sample]]:
    return generate_pairs(cfg, n, EVAL_SEED_OFFSET)


def _images(pairs) -> np.ndarray:
    return np.stack([s.image for p in pairs for s in p])


def train_autoenc_stage(cfg: RunConfig, pairs, seed: int | None = None) -> tuple[Autoencoder, list[float]]:
    ae_cfg = AETrainConfig(steps=cfg.ae_steps, lr=cfg.ae_lr, seed=cfg.seed if seed is None else seed)
    return train_autoencoder(_images(pairs), cfg.f, cfg.latent_channels, ae_cfg,
                             log=lambda m: log.info(m))


def face_training_set(cfg: RunConfig, pairs) -> tuple[torch.Tensor, np.ndarray]:
    samples = [s for p in pairs for s in p]
    crops = torch.stack([face_crop(s.image, s.face_box, cfg.face_size) for s in samples])
    return crops, np.array([s.spec.identity_seed for s in samples])


def train_face_stage(cfg: RunConfig, pairs, seed: int | None = None) -> tuple[FaceEncoder, list[float]]:
    crops, labels = face_training_set(cfg, pairs)
    fcfg = FaceTrainConfig(steps=cfg.face_steps, lr=cfg.face_lr, seed=cfg.seed if seed is None else seed)
    return train_face_encoder(crops, labels, cfg.d, fcfg, log=lambda m: log.info(m))


def train_diffusion_stage(cfg: RunConfig, ae: Autoencoder, face: FaceEncoder, pairs,
                          log_fn=None) -> tuple[Models, list[dict]]:
    models = build_models(cfg, ae, face)
    data = prepare_training_data(models, pairs)
    tcfg = TrainConfig(lr=cfg.lr, steps=cfg.steps, batch=cfg.batch, cond_drop_prob=cfg.cond_drop_prob,
                       seed=cfg.seed, preset=cfg.preset)
    result = train(models, data, tcfg, schedule_for(models), log=log_fn)
    return models, result.log


# ---------------------------------------------------------------- cached experiment runs


# config fields each stage-1 model depends on (data generation included)
_DATA_KEYS = ("canvas", "f", "identity_pool", "seed")
AE_KEYS = _DATA_KEYS + ("latent_channels", "ae_steps", "ae_lr")
FACE_KEYS = _DATA_KEYS + ("d", "face_size", "face_steps", "face_lr")


def config_key(cfg: RunConfig, *extra, keys=None) -> str:
    d = cfg.to_dict()
    if keys is not None:
        d = {k: d[k] for k in keys}
    blob = json.dumps([d, *extra], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class StageCache:
    """Reuses stage outputs on disk, keyed by the config that produced them.

    Training is deterministic, so a cached artefact is bit-identical to a
    fresh run with the same key. `seconds` maps each artefact's file stem to
    the wall time its training took, whether trained now or read back.
    """

    def __init__(self, root: Path | None):
        self.root = Path(root) if root else None
        self.seconds: dict[str, float] = {}
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    def path(self, kind: str, key: str) -> Path | None:
        return self.root / f"{kind}-{key}.mcld" if self.root else None

    def autoencoder(self, cfg: RunConfig, pairs) -> Autoencoder:
        key = config_key(cfg, "ae", len(pairs), keys=AE_KEYS)
        p = self.path("autoenc", key)
        if p and p.exists():
            ae, meta = load_autoencoder(p)
            self.seconds[f"autoenc-{key}"] = meta.get("train_seconds", math.nan)
            return ae
        t0 = time.time()
        ae, curve = train_autoenc_stage(cfg, pairs)
        self.seconds[f"autoenc-{key}"] = secs = time.time() - t0
        if p:
            save_module(p, ae, "autoenc", {"ae": {"f": ae.f, "latent_channels": ae.latent_channels,
                                                  "width": ae.encoder[0].out_channels}, "loss": curve[-50:],
                                           "train_seconds": secs})
        return ae

    def face(self, cfg: RunConfig, pairs) -> FaceEncoder:
        key = config_key(cfg, "face", len(pairs), keys=FACE_KEYS)
        p = self.path("face", key)
        if p and p.exists():
            face, meta = load_face_encoder(p)
            self.seconds[f"face-{key}"] = meta.get("train_seconds", math.nan)
            return face
        t0 = time.time()
        face, curve = train_face_stage(cfg, pairs)
        self.seconds[f"face-{key}"] = secs = time.time() - t0
        if p:
            save_module(p, face, "face_enc", {"face": {"d": cfg.d, "size": cfg.face_size}, "loss": curve[-50:],
                                              "train_seconds": secs})
        return face

    def diffusion(self, cfg: RunConfig, ae, face, pairs) -> tuple[Models, list[dict]]:
        """(models, log). A cached run returns only the first and last 20 log rows."""
        key = config_key(cfg, "diffusion", len(pairs))
        p = self.path("diffusion", key)
        if p and p.exists():
            models, meta = load_checkpoint(p)
            self.seconds[f"diffusion-{key}"] = meta.get("train_seconds", math.nan)
            return models, meta.get("loss_first", []) + meta.get("log_tail", [])
        t0 = time.time()
        models, train_log = train_diffusion_stage(cfg, ae, face, pairs)
        self.seconds[f"diffusion-{key}"] = secs = time.time() - t0
        if p:
            save_checkpoint(p, models, {"log_tail": train_log[-20:], "loss_first": train_log[:20],
                                        "train_seconds": secs})
        return models, train_log


def run_ablation(cfg: RunConfig, presets=("B1", "full"), seeds=(0, 1, 2), n_eval: int = 64,
                 cache_dir=None) -> dict:
    """Train every (preset, seed) combination on shared stage-1 models and evaluate.

    Returns {"results": {preset: {seed: aggregate}}, "models": {(preset, seed): Models},
    "logs": {(preset, seed): training log rows}, "seconds": total wall time of
    all training (cached runs count their recorded time) and evaluation}.
    """
    cache = StageCache(cache_dir)
    pairs = generate_pairs(cfg, cfg.train_pairs)
    ae = cache.autoencoder(cfg, pairs)
    face = cache.face(cfg, pairs)
    test = eval_pairs(cfg, n_eval)
    out: dict = {"results": {}, "models": {}, "logs": {}}
    eval_seconds = 0.0
    for preset in presets:
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, ablation=preset, seed=seed)
            models, train_log = cache.diffusion(run_cfg, ae, face, pairs)
            t0 = time.time()
            report = evaluate(models, test, n_eval, seed=seed)
            eval_seconds += time.time() - t0
            out["results"].setdefault(preset, {})[seed] = report.aggregate
            out["models"][(preset, seed)] = models
            out["logs"][(preset, seed)] = train_log
            log.info("ablation %s seed %d: %s", preset, seed, report.aggregate)
    out["seconds"] = sum(cache.seconds.values()) + eval_seconds
    return out


def torso_swap_locality(models: Models, pairs, seed: int = 0, n: int = 8) -> dict:
    """Ratio of mean per-pixel change inside vs outside the target torso
    when the torso tile of the source atlas is replaced by a donor's."""
    inside, outside = [], []
    torso = PART_IDS["torso"]
    for i in range(n):
        source, target = pairs[i]
        donor = pairs[(i + 1) % len(pairs)][0]
        plain = edit_sample(models, source, {}, target, seed=seed + i)
        edited = edit_sample(models, source, {"atlas_swap": (donor, ["torso"])}, target, seed=seed + i)
        change = np.abs(edited - plain).mean(axis=-1)
        m = part_mask(target.dpmap, [torso]).astype(bool)
        inside.append(change[m])
        outside.append(change[~m])
    inn = float(np.concatenate(inside).mean())
    out = float(np.concatenate(outside).mean())
    return {"inside": inn, "outside": out, "ratio": inn / out if out > 0 else float("inf"), "pairs": n}
