"""Toy convolutional autoencoder and the latent-deterioration diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import NumericError
from .synthdata import TORSO, Sample


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x 3 arrays into an N x 3 x H x W tensor."""
    arr = np.stack([np.asarray(im) for im in images]) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).cpu().numpy()


class Autoencoder(nn.Module):
    def __init__(self, f: int = 4, latent_channels: int = 4, width: int = 32):
        super().__init__()
        if f not in (2, 4):
            raise ValueError("downsample factor must be 2 or 4")
        self.f = f
        self.latent_channels = latent_channels
        n_down = int(math.log2(f))
        enc: list[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.SiLU()]
            width *= 2
        enc.append(nn.Conv2d(width, latent_channels, 1))
        dec: list[nn.Module] = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(width, width // 2, 3, padding=1), nn.SiLU()]
            width //= 2
        dec.append(nn.Conv2d(width, 3, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)
        # multiplies raw codes so diffusion sees roughly unit-variance latents
        self.register_buffer("latent_scale", torch.ones(()))

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W images, got {tuple(x.shape)}")
        if x.shape[2] % self.f or x.shape[3] % self.f:
            raise ValueError(f"image size {tuple(x.shape[2:])} not divisible by f={self.f}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.encoder(x)

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"expected N x {self.latent_channels} x h x w latents, got {tuple(z.shape)}")
        out = self.decoder(z)
        return out.clamp(0.0, 1.0) if clamp else out

    def forward(self, x):
        return self.decode(self.encode(x), clamp=False)


def encode(params: Autoencoder, image) -> np.ndarray:
    """H x W x 3 image -> (H/f) x (W/f) x C_z latent."""
    with torch.no_grad():
        z = params.encode(images_to_tensor(image))
    return z[0].permute(1, 2, 0).numpy()


def decode(params: Autoencoder, z) -> np.ndarray:
    z = torch.as_tensor(np.asarray(z), dtype=torch.float32).permute(2, 0, 1)[None]
    with torch.no_grad():
        return tensor_to_images(params.decode(z))[0]


@dataclass
class AETrainConfig:
    steps: int = 2500
    lr: float = 2e-3
    batch: int = 32
    seed: int = 0
    width: int = 32


def train_autoencoder(images: np.ndarray, f: int, latent_channels: int, cfg: AETrainConfig,
                      log=None) -> tuple[Autoencoder, list[float]]:
    """Plain reconstruction-MSE training. Returns (model, loss curve)."""
    if len(images) == 0:
        raise ValueError("autoencoder training needs a nonempty dataset")
    torch.manual_seed(cfg.seed)
    model = Autoencoder(f, latent_channels, cfg.width)
    data = images_to_tensor(images)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    curve: list[float] = []
    for step in range(cfg.steps):
        idx = torch.randint(0, data.shape[0], (min(cfg.batch, data.shape[0]),), generator=gen)
        x = data[idx]
        loss = ((model(x) - x) ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericError(f"autoencoder loss diverged at step {step}: {loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if log is not None and step % 250 == 0:
            log(f"autoenc step {step} loss {loss.item():.5f}")
    calibrate_latent_scale(model, data)
    model.eval()
    return model, curve


@torch.no_grad()
def calibrate_latent_scale(model: Autoencoder, data: torch.Tensor) -> None:
    zs = torch.cat([model.encode(data[i:i + 256]) for i in range(0, data.shape[0], 256)])
    std = zs.std().item()
    model.latent_scale.fill_(1.0 / std if std > 0 else 1.0)


# ---------------------------------------------------------------- Fig.1-style report


def _region_masks(samples: list[Sample]) -> dict[str, np.ndarray]:
    n = len(samples)
    h, w = samples[0].image.shape[:2]
    face = np.zeros((n, h, w), dtype=bool)
    for i, s in enumerate(samples):
        x0, y0, x1, y1 = s.face_box
        face[i, y0:y1, x0:x1] = True
    torso = np.stack([s.dpmap.part == TORSO for s in samples])
    return {"whole": np.ones((n, h, w), dtype=bool), "face": face, "torso": torso}


@torch.no_grad()
def deterioration_report(params: Autoencoder, samples: list[Sample], eps_list, draws: int = 10,
                         seed: int = 0) -> list[dict]:
    """Region-wise error of decode(z + eps * N(0, I)) against the input image.

    The perturbation is applied in the scaled (unit-variance) latent space.
    The eps = 0 row is the plain reconstruction error.
    """
    x = images_to_tensor([s.image for s in samples])
    z = params.encode(x) * params.latent_scale
    masks = {k: torch.as_tensor(v) for k, v in _region_masks(samples).items()}
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for eps in sorted(float(e) for e in eps_list):
        n_draws = 1 if eps == 0 else draws
        sq = torch.zeros_like(x)
        for _ in range(n_draws):
            zn = z if eps == 0 else z + eps * torch.randn(z.shape, generator=gen)
            sq += (params.decode(zn / params.latent_scale) - x) ** 2
        sq = (sq / n_draws).mean(dim=1)  # over channels
        for region, m in masks.items():
            mse = float(sq[m].mean()) if m.any() else float("nan")
            rows.append({"eps": eps, "region": region, "mse": mse,
                         "psnr": float("inf") if mse == 0 else 10 * math.log10(1.0 / mse)})
    return rows
