"""Prototype condition mechanism and the composite training objective.

Each class owns one K-dim prototype.  A single-query cross-attention over
all prototypes (query = time + class embedding) reconstructs the pooled
encoder features; a self-attention block fuses [time, class, text,
prototype]; a zero-initialised linear head turns the fused tokens into a
residual for the denoiser's middle blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .denoiser import Attention, ConditionSet, Denoiser, DenoiserConfig
from .errors import ValidationError
from .schedule import diffusion_loss


@dataclass
class LossBreakdown:
    l_diffusion: torch.Tensor
    l_recon: torch.Tensor
    alpha: float
    l_total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "l_total": self.l_total.item(),
            "l_diffusion": self.l_diffusion.item(),
            "l_recon": self.l_recon.item(),
            "alpha": self.alpha,
        }


def recon_loss(f_hat: torch.Tensor, f_e: torch.Tensor) -> torch.Tensor:
    """MSE between reconstructed and encoder features; the target is detached."""
    if f_hat.shape[-1] != f_e.shape[-1]:
        raise ValidationError(f"width mismatch {f_hat.shape[-1]} vs {f_e.shape[-1]}", field="F_e")
    return torch.mean((f_hat - f_e.detach()) ** 2)


def vap_loss(
    eps_pred: torch.Tensor,
    eps: torch.Tensor,
    f_hat: torch.Tensor | None,
    f_e: torch.Tensor | None,
    alpha: float,
) -> LossBreakdown:
    if alpha < 0:
        raise ValidationError(f"must be non-negative, got {alpha}", field="alpha")
    l_d = diffusion_loss(eps_pred, eps)
    if f_hat is None:
        l_r = torch.zeros((), dtype=l_d.dtype)
        total = l_d
    else:
        l_r = recon_loss(f_hat, f_e)
        total = l_d + alpha * l_r
    return LossBreakdown(l_diffusion=l_d, l_recon=l_r, alpha=alpha, l_total=total)


class PrototypeConditioner(nn.Module):
    def __init__(self, class_count: int, dim: int, heads: int = 1):
        super().__init__()
        self.dim = dim
        self.prototypes = nn.Parameter(torch.randn(class_count, dim) / math.sqrt(dim))
        # reconstruction head (single-head cross-attention)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        # fusion head
        self.fuse_norm = nn.LayerNorm(dim)
        self.fuse_attn = Attention(dim, heads)
        # injection head
        self.inject_head = nn.Linear(dim, dim)
        nn.init.zeros_(self.inject_head.weight)
        nn.init.zeros_(self.inject_head.bias)

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]

    def attention_weights(self, query: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        q = self.q(query)
        k = self.k(self.prototypes)
        scores = q @ k.T / math.sqrt(self.dim)
        if c is not None:
            mask = torch.ones_like(scores, dtype=torch.bool)
            mask[torch.arange(len(c)), c.long()] = False
            scores = scores.masked_fill(mask, float("-inf"))
        return scores.softmax(dim=-1)

    def reconstruct(self, time_emb: torch.Tensor, class_emb: torch.Tensor, c: torch.Tensor, masked: bool = False):
        """Return F_hat, shape (B, K).  ``masked`` restricts attention to each sample's own class."""
        if c.min() < 0 or c.max() >= self.class_count:
            raise ValidationError(f"class id outside [0, {self.class_count})", field="c")
        query = (time_emb + class_emb).detach()
        weights = self.attention_weights(query, c if masked else None)
        return weights @ self.v(self.prototypes)

    def fuse(self, time_emb, class_emb, text_token, proto) -> torch.Tensor:
        """Self-attention over the 4-token set; no positional encoding, so permutation-equivariant."""
        parts = [time_emb, class_emb, text_token, proto]
        for p in parts:
            if p.shape[-1] != self.dim:
                raise ValidationError(f"fusion inputs must be {self.dim} wide", field="fuse")
        x = torch.stack(parts, dim=1)
        return x + self.fuse_attn(self.fuse_norm(x))

    def inject(self, fused: torch.Tensor) -> torch.Tensor:
        return self.inject_head(fused)


class VAPDenoiser(nn.Module):
    """Denoiser plus prototype branch.

    The prototype branch is only active when a text embedding is present,
    mirroring the rule that prototypes do nothing without descriptions.
    """

    def __init__(self, cfg: DenoiserConfig, use_pcm: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_pcm = use_pcm
        self.denoiser = Denoiser(cfg)
        self.pcm = PrototypeConditioner(cfg.class_count, cfg.embed_dim)

    def forward(
        self,
        latent: torch.Tensor,
        cond: ConditionSet,
        pcm: bool | None = None,
        recon: bool = False,
        masked: bool = False,
    ):
        """Return ``(eps_pred, f_e, f_hat)``; ``f_hat`` is None unless ``recon``."""
        active = (self.use_pcm if pcm is None else pcm) and cond.text is not None
        emb = self.denoiser.embed_conditions(cond)
        residual = None
        if active:
            proto = self.pcm.prototypes[cond.c.long()]
            fused = self.pcm.fuse(emb.time, emb.label, emb.text, proto)
            residual = self.pcm.inject(fused).mean(dim=1, keepdim=True)
        eps_pred, feats = self.denoiser(latent, cond, middle_residual=residual, cond_emb=emb, return_features=True)
        f_hat = None
        if recon and cond.text is not None:
            f_hat = self.pcm.reconstruct(emb.time, emb.label, cond.c, masked=masked)
        return eps_pred, feats.pooled, f_hat

    def predict_noise(self, latent: torch.Tensor, cond: ConditionSet, pcm: bool | None = None) -> torch.Tensor:
        return self.forward(latent, cond, pcm=pcm)[0]
