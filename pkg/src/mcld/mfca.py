"""Multi-focal condition aggregation: stage-switched dual cross-attention."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
from torch import nn

from .embedders import EmbeddingSet


class StageId(enum.Enum):
    Encoder = "encoder"
    Mid = "mid"
    Decoder = "decoder"


def attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_a)) V over the last two axes."""
    if K.shape[-2] == 0:
        raise ValueError("attention needs at least one key")
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"inconsistent shapes Q{tuple(Q.shape)} K{tuple(K.shape)} V{tuple(V.shape)}")
    logits = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    return torch.softmax(logits, dim=-1) @ V


def _cat(*parts):
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else torch.cat(parts, dim=-2)


def select_condition(stage: StageId, I_emb, A_emb):
    """Encoder -> I, Mid -> cat(I, A) on the token axis, Decoder -> A."""
    if stage is StageId.Encoder:
        return I_emb
    if stage is StageId.Mid:
        return _cat(I_emb, A_emb)
    if stage is StageId.Decoder:
        return A_emb
    raise ValueError(f"unknown stage {stage}")


@dataclass(frozen=True)
class Routing:
    """Which focal embeddings a model sees and how they are aggregated.

    aggregation "mfca": stage switcher branch + separate face branch.
    aggregation "concat": one attention branch over every enabled token.
    """

    use_I: bool = True
    use_A: bool = True
    use_F: bool = True
    aggregation: str = "mfca"


ABLATION_ROUTING = {
    "B1": Routing(True, False, False, "concat"),
    "B2": Routing(True, True, False, "concat"),
    "B3": Routing(True, True, True, "concat"),
    "B4": Routing(False, True, True, "mfca"),
    "B5": Routing(True, True, False, "mfca"),
    "full": Routing(True, True, True, "mfca"),
}


class MFCA(nn.Module):
    def __init__(self, d_z: int, d: int, d_a: int | None = None, heads: int = 1,
                 lambda_s: float = 1.0, lambda_f: float = 0.5, routing: Routing = Routing()):
        super().__init__()
        d_a = d_a or d_z
        if d_a % heads:
            raise ValueError(f"attention width {d_a} not divisible by {heads} heads")
        self.d_z, self.d, self.d_a, self.heads = d_z, d, d_a, heads
        self.routing = routing
        self.W_q = nn.Linear(d_z, d_a, bias=False)
        self.W_k_s = nn.Linear(d, d_a, bias=False)
        self.W_v_s = nn.Linear(d, d_a, bias=False)
        self.W_k_F = nn.Linear(d, d_a, bias=False)
        self.W_v_F = nn.Linear(d, d_a, bias=False)
        # bias-free so that zero scale factors leave the residual path exact
        self.proj = nn.Linear(d_a, d_z, bias=False)
        self.register_buffer("lambda_s", torch.tensor(float(lambda_s)))
        self.register_buffer("lambda_F", torch.tensor(float(lambda_f)))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_a // self.heads).transpose(1, 2)

    def _attend(self, q: torch.Tensor, cond: torch.Tensor, W_k: nn.Linear, W_v: nn.Linear) -> torch.Tensor:
        if cond.shape[-1] != self.d:
            raise ValueError(f"embedding width {cond.shape[-1]} != {self.d}")
        out = attention(q, self._split(W_k(cond)), self._split(W_v(cond)))
        b, _, n, _ = out.shape
        return out.transpose(1, 2).reshape(b, n, self.d_a)

    def branch_conditions(self, stage: StageId, emb: EmbeddingSet):
        """(switcher condition, face condition) this block attends to."""
        r = self.routing
        I = emb.I_emb if r.use_I else None
        A = emb.A_emb if r.use_A else None
        Fe = emb.F_emb if r.use_F else None
        if r.aggregation == "concat":
            return _cat(I, A, Fe), None
        return select_condition(stage, I, A), Fe

    def forward(self, z_tokens: torch.Tensor, stage: StageId, emb: EmbeddingSet) -> torch.Tensor:
        if z_tokens.shape[-1] != self.d_z:
            raise ValueError(f"token width {z_tokens.shape[-1]} != {self.d_z}")
        q = self._split(self.W_q(z_tokens))
        s, f = self.branch_conditions(stage, emb)
        agg = z_tokens.new_zeros(*z_tokens.shape[:-1], self.d_a)
        if s is not None:
            agg = agg + self.lambda_s * self._attend(q, s, self.W_k_s, self.W_v_s)
        if f is not None:
            agg = agg + self.lambda_F * self._attend(q, f, self.W_k_F, self.W_v_F)
        return z_tokens + self.proj(agg)


def mfca_forward(z_tokens, stage: StageId, embeddings: EmbeddingSet, params: MFCA):
    return params(z_tokens, stage, embeddings)
