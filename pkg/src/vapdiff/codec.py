"""Image <-> latent mapping.

``identity`` mode rescales pixels from [0, 1] to [-1, 1]; ``autoencoder``
mode is a small conv autoencoder with 4x spatial downsampling and 4 latent
channels, trained on reconstruction MSE before diffusion training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError


@dataclass(frozen=True)
class CodecSpec:
    mode: Literal["identity", "autoencoder"] = "identity"
    channels: int = 3
    height: int = 32
    width: int = 32
    latent_channels: int = 4
    factor: int = 4

    def __post_init__(self):
        if self.mode not in ("identity", "autoencoder"):
            raise ValidationError(f"unknown codec mode {self.mode!r}", field="codec_mode")
        if self.mode == "autoencoder" and (self.height % self.factor or self.width % self.factor):
            raise ValidationError("image size must be divisible by the downsample factor", field="factor")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        if self.mode == "identity":
            return self.image_shape
        return (self.latent_channels, self.height // self.factor, self.width // self.factor)


class LatentCodec(nn.Module):
    def __init__(self, spec: CodecSpec = CodecSpec()):
        super().__init__()
        self.spec = spec
        if spec.mode == "autoencoder":
            c, z = spec.channels, spec.latent_channels
            self.enc = nn.Sequential(
                nn.Conv2d(c, 32, 3, padding=1), nn.SiLU(),
                nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(64, 64, 4, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(64, z, 3, padding=1),
            )
            self.dec = nn.Sequential(
                nn.Conv2d(z, 64, 3, padding=1), nn.SiLU(),
                nn.ConvTranspose2d(64, 64, 4, stride=2, padding=1), nn.SiLU(),
                nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(32, c, 3, padding=1),
            )
        # per-channel standardisation of latents, set after fitting
        n = spec.latent_channels if spec.mode == "autoencoder" else spec.channels
        self.register_buffer("latent_shift", torch.zeros(n, 1, 1))
        self.register_buffer("latent_scale", torch.ones(n, 1, 1))

    def _check(self, x: torch.Tensor, shape: tuple[int, ...], what: str) -> torch.Tensor:
        batched = x.ndim == 4
        x = x if batched else x.unsqueeze(0)
        if tuple(x.shape[1:]) != shape:
            raise ValidationError(f"expected {shape}, got {tuple(x.shape[1:])}", field=what)
        return x

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """Map pixels in [0, 1] (C,H,W or B,C,H,W) to latents."""
        squeeze = image.ndim == 3
        x = self._check(image, self.spec.image_shape, "image")
        if x.min() < 0 or x.max() > 1:
            raise ValidationError("pixel values must lie in [0, 1]", field="image")
        if self.spec.mode == "identity":
            z = x * 2.0 - 1.0
        else:
            z = (self.enc(x * 2.0 - 1.0) - self.latent_shift) / self.latent_scale
        return z[0] if squeeze else z

    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        squeeze = latent.ndim == 3
        z = self._check(latent, self.spec.latent_shape, "latent")
        x = z if self.spec.mode == "identity" else self.dec(z * self.latent_scale + self.latent_shift)
        img = ((x + 1.0) / 2.0).clamp(0.0, 1.0)
        return img[0] if squeeze else img

    def fit(
        self,
        images: torch.Tensor,
        epochs: int = 50,
        batch_size: int = 16,
        lr: float = 2e-3,
        generator: torch.Generator | None = None,
    ) -> list[float]:
        """Train the autoencoder on reconstruction MSE; returns the per-epoch
        training-set MSE, with the pre-training value first.  Afterwards the
        latents are standardised per channel over ``images``."""
        if self.spec.mode != "autoencoder":
            raise ValidationError("fit_codec is only supported in autoencoder mode", field="codec_mode")
        self._check(images, self.spec.image_shape, "image")
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        history = [self.reconstruction_mse(images)]
        self.train()
        for _ in range(epochs):
            order = torch.randperm(len(images), generator=generator)
            for i in range(0, len(images), batch_size):
                x = images[order[i:i + batch_size]] * 2.0 - 1.0
                loss = F.mse_loss(self.dec(self.enc(x)), x)
                opt.zero_grad()
                loss.backward()
                opt.step()
            history.append(self.reconstruction_mse(images))
        self.eval()
        with torch.no_grad():
            raw = self.enc(images * 2.0 - 1.0)
            self.latent_shift.copy_(raw.mean(dim=(0, 2, 3)).view(-1, 1, 1))
            self.latent_scale.copy_(raw.std(dim=(0, 2, 3)).clamp_min(1e-6).view(-1, 1, 1))
        return history

    @torch.no_grad()
    def reconstruction_mse(self, images: torch.Tensor) -> float:
        return float(F.mse_loss(self.decode_latent(self.encode_image(images)), images))


def fit_codec(codec: LatentCodec, images: torch.Tensor, epochs: int, **kwargs) -> LatentCodec:
    codec.fit(images, epochs=epochs, **kwargs)
    return codec
