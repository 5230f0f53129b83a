"""Noise schedule, objectives, training with condition dropout, DDIM + CFG sampling
and the two editing modes (condition swap, mask-blended baseline)."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .autoenc import tensor_to_images
from .errors import NumericError
from .pipeline import (Conditions, Models, SourceTensors, build_conditions, encode_targets,
                       source_tensors, target_pose)
from .synthdata import PART_IDS, Sample
from .uvmap import swap_region, warp_to_atlas


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # index t-1 holds beta_t
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t) -> torch.Tensor:
        """alpha_bar_t for 1-based t; t = 0 gives 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        ab = torch.as_tensor(np.concatenate([[1.0], self.alpha_bars]))
        return ab[t]


def make_schedule(T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2) -> NoiseSchedule:
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if T < 2:
        raise ValueError("T must be at least 2")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > schedule.T):
        raise ValueError(f"timestep outside [1, {schedule.T}]")
    ab = schedule.alpha_bar(t).to(z0.dtype)
    if ab.ndim:
        ab = ab.view(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


def loss_mse(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    return ((eps - eps_hat) ** 2).mean()


def loss_face(eps: torch.Tensor, eps_hat: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the elements selected by the (broadcast) mask."""
    m = torch.broadcast_to(m.to(eps.dtype), eps.shape)
    count = m.sum()
    if count == 0:
        return eps.new_zeros(())
    return (((eps - eps_hat) * m) ** 2).sum() / count


def loss_overall(eps, eps_hat, m) -> torch.Tensor:
    return loss_mse(eps, eps_hat) + loss_face(eps, eps_hat, m)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 1e-5
    steps: int = 60000
    batch: int = 24
    cond_drop_prob: float = 0.1
    seed: int = 0
    preset: str = "default"

    def __post_init__(self):
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1)")


@dataclass
class TrainingData:
    """Frozen-network products for a set of (source, target) pairs."""

    src: SourceTensors
    z0: torch.Tensor  # targets, scaled latents
    raster: torch.Tensor  # target pose rasters
    mask: torch.Tensor  # target face masks at latent resolution

    def __len__(self):
        return self.z0.shape[0]


def prepare_training_data(models: Models, pairs: list[tuple[Sample, Sample]], chunk: int = 256) -> TrainingData:
    parts = []
    for i in range(0, len(pairs), chunk):
        block = pairs[i:i + chunk]
        src = source_tensors(models, [p[0] for p in block])
        raster, mask = target_pose(models, [p[1] for p in block])
        parts.append((src, encode_targets(models, [p[1] for p in block]), raster, mask))
    cat = lambda xs: torch.cat(xs)
    return TrainingData(
        SourceTensors(cat([p[0].image for p in parts]), cat([p[0].atlas for p in parts]),
                      cat([p[0].a_ref for p in parts]), cat([p[0].f_emb for p in parts])),
        cat([p[1] for p in parts]), cat([p[2] for p in parts]), cat([p[3] for p in parts]))


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    dropped_steps: int = 0


def train(models: Models, data: TrainingData, cfg: TrainConfig, schedule: NoiseSchedule,
          log: Callable[[dict], None] | None = None, snapshot_every: int = 100) -> TrainResult:
    """Optimise loss_overall on target-pose noise prediction.

    Conditions come from the source; with probability cond_drop_prob a step
    is fully unconditional (zero embeddings, zero c_ref, zero pose raster).
    Raises NumericError carrying the last finite state on divergence.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    net = models.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    result = TrainResult()
    last_good = copy.deepcopy(net.state_dict())
    for step in range(cfg.steps):
        idx = torch.randint(0, len(data), (min(cfg.batch, len(data)),), generator=gen)
        drop = bool(torch.rand((), generator=gen) < cfg.cond_drop_prob)
        t = torch.randint(1, schedule.T + 1, (idx.numel(),), generator=gen)
        noise = torch.randn(data.z0[idx].shape, generator=gen)
        z_t = q_sample(schedule, data.z0[idx], t, noise)
        conds = build_conditions(models, data.src.select(idx))
        raster = data.raster[idx]
        if drop:
            conds = conds.unconditional()
            raster = torch.zeros_like(raster)
            result.dropped_steps += 1
        eps_hat = net(z_t, t, raster, conds.emb, conds.c_ref)
        l_mse = loss_mse(noise, eps_hat)
        l_face = loss_face(noise, eps_hat, data.mask[idx])
        loss = l_mse + l_face
        if not torch.isfinite(loss):
            net.load_state_dict(last_good)
            raise NumericError(f"non-finite loss at step {step}", last_good)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": step, "loss_mse": l_mse.item(), "loss_face": l_face.item(),
               "loss_overall": loss.item(), "dropped": drop}
        result.log.append(row)
        if log is not None:
            log(row)
        if snapshot_every and step % snapshot_every == 0:
            last_good = copy.deepcopy(net.state_dict())
    net.eval()
    return result


# ---------------------------------------------------------------- sampling


def predict_eps(models: Models, z, t, raster, conds: Conditions) -> torch.Tensor:
    return models.net(z, t, raster, conds.emb, conds.c_ref)


def guided_eps(models: Models, z, t, raster, conds: Conditions, cfg_scale: float) -> torch.Tensor:
    """eps_u + w (eps_c - eps_u); w = 1 returns eps_c unchanged."""
    eps_c = predict_eps(models, z, t, raster, conds)
    if cfg_scale == 1.0:
        return eps_c
    eps_u = predict_eps(models, z, t, torch.zeros_like(raster), conds.unconditional())
    return eps_u + cfg_scale * (eps_c - eps_u)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    stride = T // steps
    return [T - k * stride for k in range(steps)]


@torch.no_grad()
def ddim_loop(schedule: NoiseSchedule, eps_fn, shape, steps: int, eta: float, seed: int,
              trace: Callable | None = None) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen)
    ts = ddim_timesteps(schedule.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab = schedule.alpha_bar(t).float()
        ab_prev = schedule.alpha_bar(t_prev).float()
        z_in = z
        eps = eps_fn(z, torch.full((shape[0],), t, dtype=torch.long))
        x0 = (z - (1 - ab).sqrt() * eps) / ab.sqrt()
        sigma = eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)).sqrt()
        z = ab_prev.sqrt() * x0 + (1 - ab_prev - sigma ** 2).clamp(min=0).sqrt() * eps
        if eta > 0:
            z = z + sigma * torch.randn(shape, generator=gen)
        if trace is not None:
            trace(i, t, z_in, eps, z)
    return z


def _check_trained(models: Models) -> None:
    if models is None or models.net is None:
        raise ValueError("sampling needs trained models")


@torch.no_grad()
def ddim_sample(models: Models, conditions: Conditions, raster: torch.Tensor, steps: int = 50,
                cfg_scale: float = 3.5, eta: float = 0.0, seed: int = 0, schedule: NoiseSchedule | None = None,
                trace: Callable | None = None) -> np.ndarray:
    """Generate B images (B x H x W x 3) at the poses in `raster`."""
    _check_trained(models)
    schedule = schedule or schedule_for(models)
    b = raster.shape[0]
    h, w = models.latent_hw
    shape = (b, models.cfg.latent_channels, h, w)
    z0 = ddim_loop(schedule, lambda z, t: guided_eps(models, z, t, raster, conditions, cfg_scale),
                   shape, steps, eta, seed, trace)
    return tensor_to_images(models.ae.decode(z0 / models.ae.latent_scale))


def schedule_for(models: Models) -> NoiseSchedule:
    c = models.cfg
    return make_schedule(c.T, c.beta_start, c.beta_end)


# ---------------------------------------------------------------- editing


def part_ids(parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, str) and not p.isdigit():
            if p not in PART_IDS:
                raise ValueError(f"unknown part name {p!r}")
            out.append(PART_IDS[p])
        else:
            out.append(int(p))
    return out


@torch.no_grad()
def edit_conditions(models: Models, source: Sample, atlas_swap=None, face_swap: Sample | None = None) -> Conditions:
    """Conditions of `source` with texture-atlas regions and/or identity replaced.

    atlas_swap: (donor Sample, parts). face_swap: donor Sample whose face
    embedding replaces the source's; the donor's head tile is swapped in too.
    """
    layout = models.layout
    atlas = warp_to_atlas(source.image, source.dpmap, layout)
    if atlas_swap is not None:
        donor, parts = atlas_swap
        atlas = swap_region(atlas, warp_to_atlas(donor.image, donor.dpmap, layout), part_ids(parts))
    face_donor = source
    if face_swap is not None:
        face_donor = face_swap
        atlas = swap_region(atlas, warp_to_atlas(face_swap.image, face_swap.dpmap, layout), [PART_IDS["head"]])
    src = source_tensors(models, [source], atlases=[atlas], face_donors=[face_donor])
    return build_conditions(models, src)


@torch.no_grad()
def edit_sample(models: Models, source: Sample, edits: dict, pose: Sample, seed: int = 0,
                steps: int | None = None, cfg_scale: float | None = None, eta: float = 0.0) -> np.ndarray:
    """Condition-swap editing: no masks, no retraining."""
    conds = edit_conditions(models, source, edits.get("atlas_swap"), edits.get("face_swap"))
    raster, _ = target_pose(models, [pose])
    return ddim_sample(models, conds, raster, steps or models.cfg.ddim_steps,
                       models.cfg.cfg_scale if cfg_scale is None else cfg_scale, eta, seed)[0]


@torch.no_grad()
def blended_edit_sample(models: Models, source_conds: Conditions, ref_conds: Conditions, m: torch.Tensor,
                        raster: torch.Tensor, steps: int = 50, seed: int = 0, cfg_scale: float = 3.5,
                        eta: float = 0.0, trace: Callable | None = None) -> np.ndarray:
    """Mask-blended baseline: eps = m * eps_source + (1 - m) * eps_ref per step."""
    h, w = models.latent_hw
    m = torch.as_tensor(m, dtype=torch.float32)
    if m.shape[-2:] != (h, w):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match latent {h}x{w}")
    m = m.view(-1, 1, h, w) if m.ndim != 4 else m

    def eps_fn(z, t):
        e_s = guided_eps(models, z, t, raster, source_conds, cfg_scale)
        e_r = guided_eps(models, z, t, raster, ref_conds, cfg_scale)
        return m * e_s + (1 - m) * e_r

    shape = (raster.shape[0], models.cfg.latent_channels, h, w)
    z0 = ddim_loop(schedule_for(models), eps_fn, shape, steps, eta, seed, trace)
    return tensor_to_images(models.ae.decode(z0 / models.ae.latent_scale))
