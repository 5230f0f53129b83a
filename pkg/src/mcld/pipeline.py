"""Model bundle, condition assembly and checkpoints.

`Models` ties the frozen stage-1 networks (autoencoder, face encoder) to
the jointly trained conditional denoiser. Condition tensors are always
built from the *source* sample; the target contributes only its pose.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .autoenc import Autoencoder, images_to_tensor
from .denoiser import PoseGuider, ReferenceNet, UNet, pose_raster
from .embedders import EmbeddingSet, FaceEncoder, TokenEncoder, face_crop, token_grid
from .errors import DataError
from .mfca import ABLATION_ROUTING, Routing
from .persistence import RunConfig, config_from_dict, read_archive, write_archive
from .synthdata import Sample
from .uvmap import AtlasLayout, TextureAtlas, face_mask, warp_to_atlas

CHECKPOINT_KIND = "mcld-checkpoint"


class ConditionalDenoiser(nn.Module):
    """Everything trained in the diffusion stage."""

    def __init__(self, cfg: RunConfig, routing: Routing | None = None):
        super().__init__()
        self.routing = routing or ABLATION_ROUTING[cfg.ablation]
        layout = AtlasLayout(cfg.parts, cfg.tile)
        n = cfg.embed_tokens
        tiles = (layout.rows, layout.cols)
        self.image_enc = TokenEncoder(cfg.d, n, grid=(4, 4) if n == 1 else token_grid(n))
        self.atlas_enc = TokenEncoder(cfg.d, n, grid=tiles if n in (1, tiles[0] * tiles[1]) else token_grid(n))
        self.pose_guider = PoseGuider(cfg.parts, cfg.f, cfg.latent_channels)
        self.refnet = ReferenceNet(cfg.latent_channels, cfg.channels)
        self.unet = UNet(cfg.latent_channels, cfg.channels, cfg.d, cfg.heads,
                         cfg.lambda_s, cfg.lambda_f, self.routing)

    def embeddings(self, src_image: torch.Tensor, atlas: torch.Tensor, f_emb: torch.Tensor) -> EmbeddingSet:
        r = self.routing
        return EmbeddingSet(
            I_emb=self.image_enc(src_image) if r.use_I else None,
            A_emb=self.atlas_enc(atlas) if r.use_A else None,
            F_emb=f_emb if r.use_F else None,
        )

    def forward(self, z_t, t, raster, emb: EmbeddingSet, c_ref):
        return self.unet(z_t, t, self.pose_guider(raster), c_ref, emb)


@dataclass
class Conditions:
    """Source-derived conditions for a batch: embeddings and ReferenceNet features."""

    emb: EmbeddingSet
    c_ref: list[torch.Tensor]

    def unconditional(self) -> "Conditions":
        return Conditions(self.emb.zeros_like(), [torch.zeros_like(c) for c in self.c_ref])


@dataclass
class Models:
    cfg: RunConfig
    ae: Autoencoder
    face: FaceEncoder
    net: ConditionalDenoiser
    extra: dict = field(default_factory=dict)

    @property
    def layout(self) -> AtlasLayout:
        return AtlasLayout(self.cfg.parts, self.cfg.tile)

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.cfg.latent_hw


def build_models(cfg: RunConfig, ae: Autoencoder, face: FaceEncoder, routing: Routing | None = None) -> Models:
    torch.manual_seed(cfg.seed)
    net = ConditionalDenoiser(cfg, routing)
    ae.eval()
    face.eval()
    for p in list(ae.parameters()) + list(face.parameters()):
        p.requires_grad_(False)
    return Models(cfg, ae, face, net)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def describe(models: Models) -> dict:
    net = models.net
    parts = {
        "unet": count_parameters(net.unet),
        "reference_net": count_parameters(net.refnet),
        "pose_guider": count_parameters(net.pose_guider),
        "image_embed": count_parameters(net.image_enc),
        "atlas_embed": count_parameters(net.atlas_enc),
    }
    return {"trainable": parts, "trainable_total": sum(parts.values()),
            "frozen": {"autoenc": count_parameters(models.ae), "face_enc": count_parameters(models.face)},
            "routing": asdict(net.routing)}


# ---------------------------------------------------------------- tensors from samples


@dataclass
class SourceTensors:
    """Frozen-network inputs derived from source samples (batched)."""

    image: torch.Tensor  # B x 3 x H x W
    atlas: torch.Tensor  # B x 3 x Ha x Wa
    a_ref: torch.Tensor  # B x C_z x ha x wa, scaled latent
    f_emb: torch.Tensor  # B x 1 x d

    def select(self, idx) -> "SourceTensors":
        return SourceTensors(self.image[idx], self.atlas[idx], self.a_ref[idx], self.f_emb[idx])


@torch.no_grad()
def source_tensors(models: Models, samples: list[Sample], atlases: list[TextureAtlas] | None = None,
                   face_donors: list[Sample] | None = None) -> SourceTensors:
    cfg = models.cfg
    layout = models.layout
    if atlases is None:
        atlases = [warp_to_atlas(s.image, s.dpmap, layout) for s in samples]
    image = images_to_tensor([s.image for s in samples])
    atlas = images_to_tensor([a.texels for a in atlases])
    ref_input = atlas if models.net.routing.use_A else image
    a_ref = models.ae.encode(ref_input) * models.ae.latent_scale
    donors = face_donors or samples
    crops = torch.stack([face_crop(s.image, s.face_box, cfg.face_size) for s in donors])
    f_emb = models.face(crops)[:, None, :]
    return SourceTensors(image, atlas, a_ref, f_emb)


def build_conditions(models: Models, src: SourceTensors) -> Conditions:
    net = models.net
    emb = net.embeddings(src.image, src.atlas, src.f_emb)
    return Conditions(emb, net.refnet(src.a_ref, models.latent_hw))


def target_pose(models: Models, samples: list[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    """(pose raster B x (K+2) x H x W, face mask B x 1 x h x w) from target samples."""
    raster = torch.as_tensor(np.stack([pose_raster(s.dpmap, models.cfg.parts) for s in samples])).permute(0, 3, 1, 2)
    mask = torch.as_tensor(np.stack([face_mask(s.dpmap, models.latent_hw) for s in samples]))[:, None]
    return raster.contiguous(), mask


@torch.no_grad()
def encode_targets(models: Models, samples: list[Sample]) -> torch.Tensor:
    return models.ae.encode(images_to_tensor([s.image for s in samples])) * models.ae.latent_scale


# ---------------------------------------------------------------- checkpoints


def _rename(key: str, prefix: str) -> str:
    if prefix == "net":
        head, _, rest = key.partition(".")
        if head == "unet" and rest.startswith("attn.") and ".mfca." in rest:
            stage, _, name = rest[len("attn."):].partition(".mfca.")
            return f"mfca.{stage}.{name}"
        return {"image_enc": "image_embed", "atlas_enc": "atlas_embed", "refnet": "ref",
                "pose_guider": "pose_guider", "unet": "unet"}[head] + "." + rest
    return f"{prefix}.{key}"


def state_tensors(models: Models) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for prefix, module in (("autoenc", models.ae), ("face_enc", models.face), ("net", models.net)):
        for key, value in module.state_dict().items():
            out[_rename(key, prefix)] = value
    return out


def save_checkpoint(path, models: Models, metadata: dict | None = None) -> None:
    meta = {"kind": CHECKPOINT_KIND, "config": models.cfg.to_dict(),
            "routing": asdict(models.net.routing),
            "ae": {"f": models.ae.f, "latent_channels": models.ae.latent_channels,
                   "width": models.ae.encoder[0].out_channels},
            **(metadata or {})}
    write_archive(path, state_tensors(models), meta)


def save_module(path, module: nn.Module, prefix: str, metadata: dict) -> None:
    write_archive(path, {f"{prefix}.{k}": v for k, v in module.state_dict().items()}, metadata)


def _load_prefixed(module: nn.Module, tensors: dict, prefix: str) -> None:
    sd = {k[len(prefix) + 1:]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith(prefix + ".")}
    if not sd:
        raise DataError(f"checkpoint has no tensors under {prefix!r}")
    module.load_state_dict(sd)


def load_autoencoder(path) -> tuple[Autoencoder, dict]:
    tensors, meta = read_archive(path)
    info = meta["ae"]
    ae = Autoencoder(info["f"], info["latent_channels"], info["width"])
    _load_prefixed(ae, tensors, "autoenc")
    ae.eval()
    return ae, meta


def load_face_encoder(path) -> tuple[FaceEncoder, dict]:
    tensors, meta = read_archive(path)
    info = meta["face"]
    face = FaceEncoder(d=info["d"], size=info["size"])
    _load_prefixed(face, tensors, "face_enc")
    face.eval()
    return face, meta


def load_checkpoint(path) -> tuple[Models, dict]:
    tensors, meta = read_archive(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise DataError(f"{path} is not a diffusion checkpoint")
    cfg = config_from_dict(meta["config"])
    info = meta["ae"]
    ae = Autoencoder(info["f"], info["latent_channels"], info["width"])
    _load_prefixed(ae, tensors, "autoenc")
    face = FaceEncoder(d=cfg.d, size=cfg.face_size)
    _load_prefixed(face, tensors, "face_enc")
    models = build_models(cfg, ae, face, Routing(**meta["routing"]))
    inverse = {}
    for key in models.net.state_dict():
        inverse[_rename(key, "net")] = key
    sd = {}
    for name, value in tensors.items():
        if name in inverse:
            sd[inverse[name]] = torch.as_tensor(value)
    models.net.load_state_dict(sd)
    return models, meta
