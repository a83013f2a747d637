"""Training loop for the composite objective, with checkpoint/resume."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import bank as bank_io
from ..codec import CodecSpec, LatentCodec
from ..data import ImageDataset
from ..denoiser import ConditionSet, DenoiserConfig
from ..errors import ConfigError, NumericError
from ..pcm import LossBreakdown, VAPDenoiser, vap_loss
from ..schedule import NoiseSchedule, build_schedule, forward_diffuse
from ..vaps.providers import encode_description, get_provider
from .config import TrainConfig, config_from_dict

log = logging.getLogger(__name__)


def build_denoiser_config(cfg: TrainConfig, latent_shape: tuple[int, int, int], class_count: int) -> DenoiserConfig:
    c, h, w = latent_shape
    return DenoiserConfig(
        channels=c, height=h, width=w,
        patch_size=cfg.patch_size, embed_dim=cfg.embed_dim,
        encoder_depth=cfg.encoder_depth, middle_depth=cfg.middle_depth, decoder_depth=cfg.decoder_depth,
        heads=cfg.heads, class_count=class_count, text_dim=cfg.text_dim, mlp_ratio=cfg.mlp_ratio,
    )


def embed_texts(texts: list[str], cfg: TrainConfig) -> torch.Tensor:
    provider = get_provider(cfg.text_provider, cfg.text_dim)
    cache: dict[str, np.ndarray] = {}
    rows = []
    for text in texts:
        if text not in cache:
            cache[text] = encode_description(text, provider).vector
        rows.append(cache[text])
    return torch.tensor(np.stack(rows), dtype=torch.float32)


@dataclass
class CheckpointManifest:
    step: int
    config_hash: str
    config: dict
    class_names: list[str]
    latent_shape: tuple[int, int, int]
    image_shape: tuple[int, int, int]
    metrics: dict = field(default_factory=dict)


class Trainer:
    """Owns the parameters and every random stream of one training run."""

    def __init__(self, cfg: TrainConfig, out_dir: str | Path | None = None):
        cfg.validate_paths()
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dataset = ImageDataset(cfg.dataset)
        images, labels, ids = self.dataset.tensors("train")
        self.labels = labels
        self.schedule: NoiseSchedule = build_schedule(cfg.schedule, cfg.timesteps, cfg.beta_start, cfg.beta_end)

        self.gen = torch.Generator().manual_seed(cfg.seed)
        spec = CodecSpec(cfg.codec_mode, *images.shape[1:])
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.codec = LatentCodec(spec)
            if cfg.codec_mode == "autoencoder":
                self.codec.fit(images, epochs=cfg.codec_epochs, generator=self.gen)
            dcfg = build_denoiser_config(cfg, spec.latent_shape, self.dataset.num_classes)
            self.model = VAPDenoiser(dcfg, use_pcm=cfg.use_pcm)
        with torch.no_grad():
            self.latents = self.codec.encode_image(images)

        self.text_emb = None
        if cfg.use_vaps:
            bank = bank_io.load(cfg.bank)
            by_image = bank.by_image()
            missing = [i for i in ids if i not in by_image]
            if missing:
                raise ConfigError(
                    f"{len(missing)} training images lack descriptions in {cfg.bank} (e.g. {missing[0]})",
                    field="bank",
                )
            self.text_emb = embed_texts([by_image[i].text for i in ids], cfg)

        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.ema = copy.deepcopy(self.model).requires_grad_(False) if cfg.ema else None
        self.step = 0
        self.history: list[dict] = []
        self.last_checkpoint: Path | None = None

    @property
    def recon_active(self) -> bool:
        return self.cfg.recon and self.cfg.use_pcm and self.cfg.use_vaps

    def train_step(self) -> LossBreakdown:
        cfg = self.cfg
        idx = torch.randint(len(self.latents), (cfg.batch_size,), generator=self.gen)
        x0 = self.latents[idx]
        c = self.labels[idx]
        text = self.text_emb[idx] if self.text_emb is not None else None
        t = torch.randint(1, self.schedule.T + 1, (cfg.batch_size,), generator=self.gen)
        eps = torch.randn(x0.shape, generator=self.gen)
        xt = forward_diffuse(x0, t, eps, self.schedule)

        self.model.train()
        eps_pred, f_e, f_hat = self.model(
            xt, ConditionSet(t=t, c=c, text=text), recon=self.recon_active, masked=cfg.masked_recon
        )
        parts = vap_loss(eps_pred, eps, f_hat, f_e, cfg.alpha)
        total = parts.l_total.item()
        expected = parts.l_diffusion.item() + (cfg.alpha * parts.l_recon.item() if f_hat is not None else 0.0)
        if math.isfinite(total) and not math.isclose(total, expected, rel_tol=1e-6, abs_tol=1e-9):
            raise NumericError(f"loss additivity violated at step {self.step + 1}")
        if not math.isfinite(total):
            raise NumericError(
                f"non-finite loss at step {self.step + 1}; last good checkpoint: {self.last_checkpoint}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        parts.l_total.backward()
        self.optimizer.step()
        if self.ema is not None:
            with torch.no_grad():
                for pe, pm in zip(self.ema.parameters(), self.model.parameters()):
                    pe.mul_(cfg.ema_decay).add_(pm, alpha=1 - cfg.ema_decay)
        self.step += 1
        self.history.append({"step": self.step, **parts.as_floats()})
        return parts

    def run(self, steps: int | None = None) -> list[dict]:
        target = self.cfg.steps if steps is None else self.step + steps
        every = self.cfg.checkpoint_every
        while self.step < target:
            parts = self.train_step()
            if self.step % 100 == 0:
                log.info("step %d loss %.4f", self.step, parts.l_total.item())
            if every and self.out_dir is not None and self.step % every == 0:
                self.save(self.out_dir / f"checkpoint_{self.step:06d}.pt")
        return self.history

    def sampling_model(self) -> VAPDenoiser:
        return self.ema if self.ema is not None else self.model

    def manifest(self) -> CheckpointManifest:
        recent = self.history[-10:]
        metrics = {"mean_loss_last10": float(np.mean([h["l_total"] for h in recent]))} if recent else {}
        return CheckpointManifest(
            step=self.step,
            config_hash=self.cfg.hash(),
            config=self.cfg.to_dict(),
            class_names=self.dataset.class_names,
            latent_shape=self.codec.spec.latent_shape,
            image_shape=self.codec.spec.image_shape,
            metrics=metrics,
        )

    def state(self) -> dict:
        return {
            "manifest": self.manifest().__dict__,
            "model": self.model.state_dict(),
            "ema": self.ema.state_dict() if self.ema is not None else None,
            "codec": self.codec.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.gen.get_state(),
            "history": self.history,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        self.last_checkpoint = path
        return path

    def write_loss_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "l_total", "l_diffusion", "l_recon", "alpha"])
            w.writeheader()
            w.writerows(self.history)
        return path

    @classmethod
    def resume(cls, path: str | Path, cfg: TrainConfig, out_dir=None, override: bool = False) -> "Trainer":
        blob = load_checkpoint(path, cfg, override=override)
        trainer = cls(cfg, out_dir)
        trainer.model.load_state_dict(blob["model"])
        if trainer.ema is not None and blob["ema"] is not None:
            trainer.ema.load_state_dict(blob["ema"])
        trainer.codec.load_state_dict(blob["codec"])
        with torch.no_grad():
            images, _, _ = trainer.dataset.tensors("train")
            trainer.latents = trainer.codec.encode_image(images)
        trainer.optimizer.load_state_dict(blob["optimizer"])
        trainer.gen.set_state(blob["rng"])
        trainer.step = blob["manifest"]["step"]
        trainer.history = list(blob["history"])
        trainer.last_checkpoint = Path(path)
        return trainer


def load_checkpoint(path: str | Path, cfg: TrainConfig | None = None, override: bool = False) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}", field="checkpoint")
    blob = torch.load(path, weights_only=False)
    if cfg is not None and blob["manifest"]["config_hash"] != cfg.hash():
        if not override:
            raise ConfigError(
                f"checkpoint {path} was written by config {blob['manifest']['config_hash']}, "
                f"current config is {cfg.hash()} (pass override to load anyway)",
                field="checkpoint",
            )
        log.warning("loading checkpoint %s despite config hash mismatch", path)
    return blob


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def train(cfg: TrainConfig, out_dir: str | Path) -> CheckpointManifest:
    """Train from scratch and write ``checkpoint.pt`` and ``loss.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, out_dir)
    trainer.run()
    trainer.save(out_dir / "checkpoint.pt")
    trainer.write_loss_csv(out_dir / "loss.csv")
    return trainer.manifest()


def restore_model(blob: dict) -> tuple[TrainConfig, VAPDenoiser, LatentCodec]:
    """Rebuild (config, sampling model, codec) from a loaded checkpoint."""
    m = blob["manifest"]
    cfg = config_from_dict(m["config"])
    spec = CodecSpec(cfg.codec_mode, *m["image_shape"])
    codec = LatentCodec(spec)
    codec.load_state_dict(blob["codec"])
    codec.eval()
    model = VAPDenoiser(build_denoiser_config(cfg, tuple(m["latent_shape"]), len(m["class_names"])), cfg.use_pcm)
    model.load_state_dict(blob["ema"] if blob.get("ema") is not None else blob["model"])
    model.eval()
    return cfg, model, codec
