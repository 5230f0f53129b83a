"""Noise-prediction network: pose guider, ReferenceNet and a 3-stage UNet.

Stage layout on an h x w latent: Encoder at h x w, Mid at h/2 x w/2,
Decoder back at h x w with a skip from the Encoder. Each stage runs a
residual block, fuses its ReferenceNet feature by channel concatenation
plus a 1x1 projection, then a transformer block whose cross-attention
slot is an MFCA block tagged with the stage.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embedders import EmbeddingSet
from .mfca import MFCA, Routing, StageId, attention
from .synthdata import DensePoseMap

STAGES = (StageId.Encoder, StageId.Mid, StageId.Decoder)


def pose_raster(dpmap: DensePoseMap, parts: int) -> np.ndarray:
    """H x W x (K + 2): one-hot part planes followed by u and v planes."""
    h, w = dpmap.part.shape
    out = np.zeros((h, w, parts + 2), dtype=np.float32)
    fg = dpmap.part > 0
    ys, xs = np.nonzero(fg)
    out[ys, xs, dpmap.part[ys, xs] - 1] = 1.0
    out[..., parts] = np.where(fg, dpmap.uv[..., 0], 0.0)
    out[..., parts + 1] = np.where(fg, dpmap.uv[..., 1], 0.0)
    return out


class PoseGuider(nn.Module):
    """Pose raster -> latent-shaped feature added to the noisy latent."""

    def __init__(self, parts: int, f: int, latent_channels: int, width: int = 16):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(parts + 2, width, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(f))):
            layers += [nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.SiLU()]
            width *= 2
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(width, latent_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, raster: torch.Tensor) -> torch.Tensor:
        return self.out(self.body(raster))


def pose_guide(params: PoseGuider, raster: torch.Tensor) -> torch.Tensor:
    return params(raster)


class ReferenceNet(nn.Module):
    """Encoder over the encoded atlas latent emitting one feature per stage."""

    def __init__(self, latent_channels: int, ch: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(latent_channels, ch, 3, padding=1), nn.SiLU(),
            nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(),
        )
        self.down = nn.Sequential(nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), nn.SiLU())
        self.enc_out = nn.Conv2d(ch, ch, 1)
        self.mid_out = nn.Conv2d(2 * ch, 2 * ch, 1)
        self.dec_out = nn.Conv2d(ch, ch, 1)

    def forward(self, a_ref: torch.Tensor, latent_hw: tuple[int, int]) -> list[torch.Tensor]:
        h, w = latent_hw
        h1 = self.stem(a_ref)
        h2 = self.down(h1)
        fine = F.adaptive_avg_pool2d(h1, (h, w))
        coarse = F.adaptive_avg_pool2d(h2, (h // 2, w // 2))
        return [self.enc_out(fine), self.mid_out(coarse), self.dec_out(fine)]


def reference_forward(params: ReferenceNet, A_ref_latent: torch.Tensor, latent_hw) -> list[torch.Tensor]:
    return params(A_ref_latent, latent_hw)


def timestep_embedding(t: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class SelfAttention(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch, bias=False)
        self.out = nn.Linear(ch, ch)

    def forward(self, x):
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        return x + self.out(attention(q, k, v))


class TransformerBlock(nn.Module):
    """Self-attention, then MFCA in the cross-attention slot, then a feed-forward."""

    def __init__(self, ch: int, d: int, stage: StageId, heads: int, lambda_s: float, lambda_f: float,
                 routing: Routing):
        super().__init__()
        self.stage = stage
        self.self_attn = SelfAttention(ch)
        self.mfca = MFCA(ch, d, ch, heads, lambda_s, lambda_f, routing)
        self.ff_norm = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 2 * ch), nn.SiLU(), nn.Linear(2 * ch, ch))

    def forward(self, x: torch.Tensor, emb: EmbeddingSet) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = self.self_attn(tokens)
        tokens = self.mfca(tokens, self.stage, emb)
        tokens = tokens + self.ff(self.ff_norm(tokens))
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    def __init__(self, latent_channels: int = 4, ch: int = 32, d: int = 64, heads: int = 1,
                 lambda_s: float = 1.0, lambda_f: float = 0.5, routing: Routing = Routing()):
        super().__init__()
        self.routing = routing
        self.temb_dim = 4 * ch
        self.t_freq = ch
        self.time_mlp = nn.Sequential(nn.Linear(ch, self.temb_dim), nn.SiLU(),
                                      nn.Linear(self.temb_dim, self.temb_dim))
        self.conv_in = nn.Conv2d(latent_channels, ch, 3, padding=1)
        widths = {StageId.Encoder: ch, StageId.Mid: 2 * ch, StageId.Decoder: ch}
        self.res = nn.ModuleDict({s.value: ResBlock(widths[s], self.temb_dim) for s in STAGES})
        self.fuse = nn.ModuleDict({s.value: nn.Conv2d(2 * widths[s], widths[s], 1) for s in STAGES})
        self.attn = nn.ModuleDict({
            s.value: TransformerBlock(widths[s], d, s, heads, lambda_s, lambda_f, routing) for s in STAGES})
        self.down = nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1)
        self.up = nn.Conv2d(2 * ch, ch, 3, padding=1)
        self.skip = nn.Conv2d(2 * ch, ch, 1)
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, latent_channels, 3, padding=1)

    def mfca_blocks(self) -> dict[str, MFCA]:
        return {name: blk.mfca for name, blk in self.attn.items()}

    def _stage(self, s: StageId, x, temb, c_ref, emb):
        x = self.res[s.value](x, temb)
        x = self.fuse[s.value](torch.cat([x, c_ref], dim=1))
        return self.attn[s.value](x, emb)

    def forward(self, z_t, t, pose_feat, c_ref, emb: EmbeddingSet):
        if c_ref is None or len(c_ref) != 3:
            raise ValueError("unet needs three ReferenceNet features (zeros for unconditional)")
        r = self.routing
        for flag, name in ((r.use_I, "I_emb"), (r.use_A, "A_emb"), (r.use_F, "F_emb")):
            if flag and getattr(emb, name) is None:
                raise ValueError(f"missing condition {name}")
        temb = self.time_mlp(timestep_embedding(t, self.t_freq).to(z_t.dtype))
        x = self.conv_in(z_t + pose_feat)
        e = self._stage(StageId.Encoder, x, temb, c_ref[0], emb)
        m = self._stage(StageId.Mid, self.down(e), temb, c_ref[1], emb)
        u = self.up(F.interpolate(m, scale_factor=2, mode="nearest"))
        u = self.skip(torch.cat([u, e], dim=1))
        dcd = self._stage(StageId.Decoder, u, temb, c_ref[2], emb)
        return self.conv_out(F.silu(self.norm_out(dcd)))


def unet_forward(params: UNet, z_t, t, pose_feat, c_ref, embeddings: EmbeddingSet):
    return params(z_t, t, pose_feat, c_ref, embeddings)
