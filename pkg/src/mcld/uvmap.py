"""Pose-invariant texture atlas: pixel <-> texel warps and the face mask.

Tiles are laid out row-major on an R x C grid with C = ceil(sqrt(K)),
R = ceil(K / C). Scatter and gather are nearest-neighbour; on scatter
collisions the last pixel in row-major order wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .synthdata import HEAD, DensePoseMap


@dataclass(frozen=True)
class AtlasLayout:
    parts: int = 10
    tile: int = 32

    @property
    def cols(self) -> int:
        return math.ceil(math.sqrt(self.parts))

    @property
    def rows(self) -> int:
        return math.ceil(self.parts / self.cols)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows * self.tile, self.cols * self.tile

    def tile_origin(self, part: int) -> tuple[int, int]:
        """(x0, y0) of a part's tile."""
        if not 1 <= part <= self.parts:
            raise ValueError(f"part id {part} outside 1..{self.parts}")
        return ((part - 1) % self.cols) * self.tile, ((part - 1) // self.cols) * self.tile

    def to_dict(self) -> dict:
        return {"parts": self.parts, "tile": self.tile, "rows": self.rows, "cols": self.cols}


@dataclass
class TextureAtlas:
    texels: np.ndarray  # R*P x C*P x 3
    valid: np.ndarray  # R*P x C*P bool
    layout: AtlasLayout
    collisions: int = 0

    def copy(self) -> "TextureAtlas":
        return TextureAtlas(self.texels.copy(), self.valid.copy(), self.layout, self.collisions)


def atlas_coords(part, u, v, layout: AtlasLayout):
    """Texel (x, y) of surface point (part, u, v). Vectorised over arrays."""
    part = np.asarray(part)
    if np.any((part < 1) | (part > layout.parts)):
        raise ValueError("part id must lie in 1..K (background has no texel)")
    p = layout.tile
    x0 = ((part - 1) % layout.cols) * p
    y0 = ((part - 1) // layout.cols) * p
    # np.round is half-to-even; use floor(x + 0.5) for half-up rounding
    du = np.floor(np.asarray(u, dtype=np.float64) * (p - 1) + 0.5).astype(np.int64)
    dv = np.floor(np.asarray(v, dtype=np.float64) * (p - 1) + 0.5).astype(np.int64)
    x = x0 + np.clip(du, 0, p - 1)
    y = y0 + np.clip(dv, 0, p - 1)
    if x.ndim == 0:
        return int(x), int(y)
    return x, y


def _check_shapes(image: np.ndarray, dpmap: DensePoseMap) -> None:
    if image.shape[:2] != dpmap.part.shape:
        raise ValueError(f"image {image.shape[:2]} and dpmap {dpmap.part.shape} differ in size")


def warp_to_atlas(image: np.ndarray, dpmap: DensePoseMap, layout: AtlasLayout) -> TextureAtlas:
    image = np.asarray(image)
    _check_shapes(image, dpmap)
    rows, cols = layout.shape
    texels = np.zeros((rows, cols, image.shape[2]), dtype=image.dtype)
    valid = np.zeros((rows, cols), dtype=bool)
    ys, xs = np.nonzero(dpmap.part > 0)  # row-major order
    if ys.size == 0:
        return TextureAtlas(texels, valid, layout, 0)
    part = dpmap.part[ys, xs]
    tx, ty = atlas_coords(part, dpmap.uv[ys, xs, 0], dpmap.uv[ys, xs, 1], layout)
    flat = ty * cols + tx
    # numpy fancy assignment keeps the last occurrence for repeated indices
    texels.reshape(-1, image.shape[2])[flat] = image[ys, xs]
    valid.reshape(-1)[flat] = True
    collisions = int(flat.size - np.unique(flat).size)
    return TextureAtlas(texels, valid, layout, collisions)


def unique_owner_mask(dpmap: DensePoseMap, layout: AtlasLayout) -> np.ndarray:
    """Per-pixel flag: foreground pixel whose texel no other pixel maps to."""
    out = np.zeros(dpmap.part.shape, dtype=bool)
    ys, xs = np.nonzero(dpmap.part > 0)
    if ys.size == 0:
        return out
    tx, ty = atlas_coords(dpmap.part[ys, xs], dpmap.uv[ys, xs, 0], dpmap.uv[ys, xs, 1], layout)
    flat = ty * layout.shape[1] + tx
    _, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    out[ys, xs] = counts[inverse] == 1
    return out


def warp_from_atlas(atlas: TextureAtlas, dpmap: DensePoseMap) -> tuple[np.ndarray, np.ndarray]:
    h, w = dpmap.part.shape
    layout = atlas.layout
    image = np.zeros((h, w, atlas.texels.shape[2]), dtype=atlas.texels.dtype)
    covered = np.zeros((h, w), dtype=bool)
    ys, xs = np.nonzero(dpmap.part > 0)
    if ys.size == 0:
        return image, covered
    tx, ty = atlas_coords(dpmap.part[ys, xs], dpmap.uv[ys, xs, 0], dpmap.uv[ys, xs, 1], layout)
    ok = atlas.valid[ty, tx]
    image[ys[ok], xs[ok]] = atlas.texels[ty[ok], tx[ok]]
    covered[ys[ok], xs[ok]] = True
    return image, covered


def part_tile_mask(layout: AtlasLayout, parts) -> np.ndarray:
    mask = np.zeros(layout.shape, dtype=bool)
    p = layout.tile
    for k in parts:
        x0, y0 = layout.tile_origin(int(k))
        mask[y0:y0 + p, x0:x0 + p] = True
    return mask


def swap_region(dst: TextureAtlas, src: TextureAtlas, parts) -> TextureAtlas:
    if dst.layout != src.layout:
        raise ValueError("atlases use different layouts")
    parts = list(parts)
    for k in parts:
        if not 1 <= int(k) <= dst.layout.parts:
            raise ValueError(f"unknown part id {k}")
    out = dst.copy()
    sel = part_tile_mask(dst.layout, parts)
    out.texels[sel] = src.texels[sel]
    out.valid[sel] = src.valid[sel]
    return out


def face_mask(dpmap: DensePoseMap, latent_hw: tuple[int, int], head_id: int = HEAD) -> np.ndarray:
    """Head mask max-pooled to latent resolution, float32 in {0, 1}."""
    h, w = dpmap.part.shape
    lh, lw = latent_hw
    if h % lh or w % lw:
        raise ValueError(f"latent size {latent_hw} does not divide image size {(h, w)}")
    pix = dpmap.part == head_id
    pooled = pix.reshape(lh, h // lh, lw, w // lw).any(axis=(1, 3))
    return pooled.astype(np.float32)


def part_mask(dpmap: DensePoseMap, parts, latent_hw: tuple[int, int] | None = None) -> np.ndarray:
    pix = np.isin(dpmap.part, list(parts))
    if latent_hw is None:
        return pix.astype(np.float32)
    h, w = pix.shape
    lh, lw = latent_hw
    return pix.reshape(lh, h // lh, lw, w // lw).any(axis=(1, 3)).astype(np.float32)


def atlas_to_archive(atlas: TextureAtlas) -> tuple[dict, dict]:
    return ({"atlas.texels": atlas.texels.astype(np.float32), "atlas.valid": atlas.valid.astype(np.uint8)},
            {"layout": atlas.layout.to_dict()})


def atlas_from_archive(tensors: dict, metadata: dict) -> TextureAtlas:
    lay = metadata["layout"]
    layout = AtlasLayout(parts=int(lay["parts"]), tile=int(lay["tile"]))
    return TextureAtlas(tensors["atlas.texels"].astype(np.float32),
                        tensors["atlas.valid"].astype(bool), layout)
