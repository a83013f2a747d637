"""Patch-token transformer noise predictor with long skip connections.

Tokens are laid out as ``[time, class, text*, extra*, patches...]``.  The
encoder blocks store their outputs, the middle blocks run once, and decoder
block ``i`` (1-based) fuses the output of encoder block ``depth - i + 1``
through a linear layer on the concatenation, as in U-ViT.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError, ValidationError


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 3
    height: int = 32
    width: int = 32
    patch_size: int = 2
    embed_dim: int = 64
    encoder_depth: int = 2
    middle_depth: int = 1
    decoder_depth: int = 2
    heads: int = 4
    class_count: int = 3
    text_dim: int = 64
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"latent {self.height}x{self.width} is not divisible by patch_size {self.patch_size}",
                field="patch_size",
            )
        if self.encoder_depth != self.decoder_depth:
            raise ConfigError("encoder_depth must equal decoder_depth for skip pairing", field="decoder_depth")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads", field="heads")
        if self.class_count < 1:
            raise ConfigError("need at least one class", field="class_count")
        if min(self.encoder_depth, self.middle_depth) < 0:
            raise ConfigError("depths must be non-negative", field="encoder_depth")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditionSet:
    """Per-batch conditions.  ``t`` and ``c`` hold one entry per sample.

    ``text`` is the embedded description, shape (B, text_dim), or None for
    class-only conditioning.  ``extra_tokens`` are already K-wide prefix
    tokens, shape (B, n, K).
    """

    t: torch.Tensor
    c: torch.Tensor
    text: torch.Tensor | None = None
    extra_tokens: torch.Tensor | None = None

    def validate(self, cfg: DenoiserConfig, batch: int) -> None:
        if self.t.shape != (batch,) or self.c.shape != (batch,):
            raise ValidationError("t and c need one entry per sample", field="cond")
        if self.c.min() < 0 or self.c.max() >= cfg.class_count:
            raise ValidationError(f"class id outside [0, {cfg.class_count})", field="c")
        if self.text is not None and tuple(self.text.shape) != (batch, cfg.text_dim):
            raise ValidationError(f"text embedding must be (B, {cfg.text_dim})", field="text")
        if self.extra_tokens is not None and (
            self.extra_tokens.ndim != 3 or self.extra_tokens.shape[-1] != cfg.embed_dim
        ):
            raise ValidationError(f"extra tokens must be (B, n, {cfg.embed_dim})", field="extra_tokens")


@dataclass
class EncoderFeatures:
    tokens: torch.Tensor
    pooled: torch.Tensor
    skips: list[torch.Tensor] = field(default_factory=list)


@dataclass
class ConditionEmbeddings:
    time: torch.Tensor
    label: torch.Tensor
    text: torch.Tensor | None


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        qkv = self.qkv(x).view(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // self.heads)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    """Pre-norm transformer block; ``skip`` enables the decoder's long-skip merge."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, skip: bool = False):
        super().__init__()
        self.skip_linear = nn.Linear(2 * dim, dim) if skip else None
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        if self.skip_linear is not None:
            x = self.skip_linear(torch.cat([x, skip], dim=-1))
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Denoiser(nn.Module):
    """Noise predictor ``eps_theta(x_t, t, c, text)``."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        K, p = cfg.embed_dim, cfg.patch_size
        self.patch_embed = nn.Conv2d(cfg.channels, K, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, K))
        self.time_mlp = nn.Sequential(nn.Linear(K, K * 2), nn.SiLU(), nn.Linear(K * 2, K))
        self.class_embed = nn.Embedding(cfg.class_count, K)
        self.text_proj = nn.Linear(cfg.text_dim, K)
        self.encoder = nn.ModuleList(Block(K, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.middle = nn.ModuleList(Block(K, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.middle_depth))
        self.decoder = nn.ModuleList(
            Block(K, cfg.heads, cfg.mlp_ratio, skip=True) for _ in range(cfg.decoder_depth)
        )
        self.norm = nn.LayerNorm(K)
        self.head = nn.Linear(K, cfg.channels * p * p)
        # smooths seams between patches, as in U-ViT
        self.final_conv = nn.Conv2d(cfg.channels, cfg.channels, 3, padding=1)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def embed_conditions(self, cond: ConditionSet) -> ConditionEmbeddings:
        dtype = self.pos_embed.dtype
        time = self.time_mlp(timestep_embedding(cond.t, self.cfg.embed_dim).to(dtype))
        label = self.class_embed(cond.c.long())
        text = self.text_proj(cond.text.to(dtype)) if cond.text is not None else None
        return ConditionEmbeddings(time=time, label=label, text=text)

    def embed_inputs(
        self, latent: torch.Tensor, cond: ConditionSet, cond_emb: ConditionEmbeddings | None = None
    ) -> torch.Tensor:
        cfg = self.cfg
        if tuple(latent.shape[1:]) != (cfg.channels, cfg.height, cfg.width):
            raise ValidationError(
                f"latent shape {tuple(latent.shape[1:])} does not match {(cfg.channels, cfg.height, cfg.width)}",
                field="latent",
            )
        cond.validate(cfg, latent.shape[0])
        if cond_emb is None:
            cond_emb = self.embed_conditions(cond)
        patches = self.patch_embed(latent).flatten(2).transpose(1, 2) + self.pos_embed
        prefix = [cond_emb.time[:, None], cond_emb.label[:, None]]
        if cond_emb.text is not None:
            prefix.append(cond_emb.text[:, None])
        if cond.extra_tokens is not None:
            prefix.append(cond.extra_tokens.to(patches.dtype))
        return torch.cat(prefix + [patches], dim=1)

    def encode(self, tokens: torch.Tensor) -> EncoderFeatures:
        skips = []
        h = tokens
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        return EncoderFeatures(tokens=h, pooled=h.mean(dim=1), skips=skips)

    def decode(self, h: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        for block in self.middle:
            h = block(h)
        for i, block in enumerate(self.decoder):
            h = block(h, skips[len(skips) - 1 - i])
        return h

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        p, hp, wp = cfg.patch_size, cfg.height // cfg.patch_size, cfg.width // cfg.patch_size
        x = self.head(self.norm(tokens[:, -cfg.num_patches:]))
        x = x.view(x.shape[0], hp, wp, cfg.channels, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(x.shape[0], cfg.channels, cfg.height, cfg.width)
        return self.final_conv(x)

    def forward(
        self,
        latent: torch.Tensor,
        cond: ConditionSet,
        middle_residual: torch.Tensor | None = None,
        cond_emb: ConditionEmbeddings | None = None,
        return_features: bool = False,
    ):
        """Predict noise.  ``middle_residual`` (B, 1 or N, K) is added to the
        stream entering the middle blocks."""
        tokens = self.embed_inputs(latent, cond, cond_emb)
        feats = self.encode(tokens)
        h = feats.tokens
        if middle_residual is not None:
            h = h + middle_residual
        h = self.decode(h, feats.skips)
        out = self.unpatchify(h)
        if not torch.isfinite(out).all():
            raise NumericError(_locate_nonfinite(self, latent, cond))
        return (out, feats) if return_features else out

    predict_noise = forward


def _locate_nonfinite(model: Denoiser, latent: torch.Tensor, cond: ConditionSet) -> str:
    with torch.no_grad():
        h = model.embed_inputs(latent, cond)
        if not torch.isfinite(h).all():
            return "non-finite activations after input embedding"
        for name, blocks in (("encoder", model.encoder), ("middle", model.middle)):
            for i, block in enumerate(blocks):
                h = block(h)
                if not torch.isfinite(h).all():
                    return f"non-finite activations in {name} block {i}"
    return "non-finite activations in decoder or output head"
