"""Focal embeddings: global image token(s), atlas token(s) and face identity."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError
from .autoenc import images_to_tensor


@dataclass
class EmbeddingSet:
    """Batched focal embeddings, each B x N x d. Missing focus = None."""

    I_emb: torch.Tensor | None
    A_emb: torch.Tensor | None
    F_emb: torch.Tensor | None

    def zeros_like(self) -> "EmbeddingSet":
        z = lambda t: None if t is None else torch.zeros_like(t)
        return EmbeddingSet(z(self.I_emb), z(self.A_emb), z(self.F_emb))

    def replace(self, **kw) -> "EmbeddingSet":
        vals = {"I_emb": self.I_emb, "A_emb": self.A_emb, "F_emb": self.F_emb}
        vals.update(kw)
        return EmbeddingSet(**vals)


def token_grid(tokens: int) -> tuple[int, int]:
    """Most nearly square rows x cols grid with rows * cols == tokens."""
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    rows = max(r for r in range(1, int(math.isqrt(tokens)) + 1) if tokens % r == 0)
    return rows, tokens // rows


class TokenEncoder(nn.Module):
    """Small conv encoder pooled onto a fixed grid, then projected to tokens.

    One token: the whole pooled grid is projected to a single global token.
    More tokens: one patch token per grid cell (shared projection plus a
    learned cell position), so the grid must have exactly that many cells.
    Pooling onto the atlas tile grid gives one cell per body part.
    """

    def __init__(self, d: int = 64, tokens: int = 1, grid=(4, 4), width: int = 16, in_ch: int = 3):
        super().__init__()
        self.d = d
        self.tokens = tokens
        self.grid = tuple(grid)
        cells = self.grid[0] * self.grid[1]
        if tokens > 1 and tokens != cells:
            raise ValueError(f"{tokens} patch tokens need a grid of {tokens} cells, got {self.grid}")
        self.features = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width * 2, width * 2, 3, padding=1), nn.SiLU(),
        )
        if tokens == 1:
            self.proj = nn.Linear(width * 2 * cells, d)
        else:
            self.proj = nn.Linear(width * 2, d)
            self.pos = nn.Parameter(0.02 * torch.randn(cells, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected N x C x H x W input, got {tuple(x.shape)}")
        h = F.adaptive_avg_pool2d(self.features(x), self.grid)
        if self.tokens == 1:
            return self.proj(h.flatten(1)).view(x.shape[0], 1, self.d)
        return self.proj(h.flatten(2).transpose(1, 2)) + self.pos


def image_embed(params: TokenEncoder, image: torch.Tensor) -> torch.Tensor:
    """Global image tokens, B x N_I x d."""
    return params(image)


def atlas_embed(params: TokenEncoder, atlas: torch.Tensor) -> torch.Tensor:
    """Texture-atlas tokens, B x N_A x d."""
    return params(atlas)


# ---------------------------------------------------------------- face identity


def face_crop(image, box, size: int = 16) -> torch.Tensor:
    """Crop `box` (x0, y0, x1, y1; exclusive ends) and resize to size x size.

    Accepts an H x W x 3 array or a 3 x H x W tensor; returns 3 x size x size.
    """
    x0, y0, x1, y1 = (int(b) for b in box)
    if x1 <= x0 or y1 <= y0:
        raise DataError(f"empty face crop {box}")
    t = image if isinstance(image, torch.Tensor) and image.ndim == 3 and image.shape[0] == 3 \
        else images_to_tensor(np.asarray(image))[0]
    crop = t[:, y0:y1, x0:x1]
    if crop.numel() == 0:
        raise DataError(f"face box {box} lies outside the image")
    return F.interpolate(crop[None], size=(size, size), mode="bilinear", align_corners=False)[0]


class FaceEncoder(nn.Module):
    """Identity features from a face crop, projected to width d."""

    def __init__(self, d: int = 64, feat: int = 64, size: int = 16, width: int = 16):
        super().__init__()
        self.size = size
        self.backbone = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1), nn.SiLU(),
            nn.Flatten(),
            nn.Linear(width * 4 * (size // 4) ** 2, feat),
        )
        self.project = nn.Linear(feat, d)

    def raw(self, crops: torch.Tensor) -> torch.Tensor:
        """Pre-normalisation embedding, B x d."""
        if crops.ndim != 4 or crops.shape[-2:] != (self.size, self.size):
            raise ValueError(f"expected B x 3 x {self.size} x {self.size} crops, got {tuple(crops.shape)}")
        return self.project(F.silu(self.backbone(crops)))

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.raw(crops), dim=-1)


def face_embed(params: FaceEncoder, face_crop_: torch.Tensor) -> torch.Tensor:
    """1 x d unit vector for one 3 x S x S crop (or B x 1 x d for a batch)."""
    if face_crop_.numel() == 0:
        raise DataError("empty face crop")
    batched = face_crop_.ndim == 4
    x = face_crop_ if batched else face_crop_[None]
    out = params(x)[:, None, :]
    return out if batched else out[0]


@dataclass
class FaceTrainConfig:
    steps: int = 1200
    lr: float = 2e-3
    batch: int = 64
    seed: int = 0
    logit_scale: float = 16.0


def train_face_encoder(crops: torch.Tensor, labels: np.ndarray, d: int, cfg: FaceTrainConfig,
                       log=None) -> tuple[FaceEncoder, list[float]]:
    """Cosine-softmax identity classification on face crops.

    The classifier head is discarded; only the encoder is returned.
    """
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    classes = torch.unique(labels)
    if classes.numel() < 2:
        raise DataError("face encoder training needs at least two identities")
    remap = {int(c): i for i, c in enumerate(classes.tolist())}
    y = torch.tensor([remap[int(v)] for v in labels.tolist()])
    torch.manual_seed(cfg.seed)
    enc = FaceEncoder(d=d, size=crops.shape[-1])
    head = nn.Parameter(torch.randn(len(remap), d) * 0.1)
    opt = torch.optim.Adam(list(enc.parameters()) + [head], lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    curve = []
    for step in range(cfg.steps):
        idx = torch.randint(0, crops.shape[0], (min(cfg.batch, crops.shape[0]),), generator=gen)
        x = crops[idx]
        # small colour jitter so the encoder keys on layout, not exact values
        x = (x + 0.03 * torch.randn(x.shape, generator=gen)).clamp(0, 1)
        logits = cfg.logit_scale * enc(x) @ F.normalize(head, dim=-1).T
        loss = F.cross_entropy(logits, y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if log is not None and step % 200 == 0:
            log(f"face step {step} loss {loss.item():.4f}")
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    enc.class_centroids = F.normalize(head.detach(), dim=-1)
    enc.class_ids = classes
    return enc, curve


def oracle_face_embed(identity_seed: int, d: int = 64) -> torch.Tensor:
    """Perfectly pose-invariant 1 x d unit vector derived from the identity seed."""
    digest = hashlib.sha256(f"face-oracle:{int(identity_seed)}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d)
    return torch.as_tensor(v / np.linalg.norm(v), dtype=torch.float32)[None]
