"""Image generation from a trained checkpoint."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch

from ..bank import PromptBank
from ..codec import LatentCodec
from ..data import write_png
from ..denoiser import ConditionSet
from ..errors import EmptyClassError, ValidationError
from ..pcm import VAPDenoiser
from ..schedule import build_schedule, sample_loop
from .config import TrainConfig
from .trainer import embed_texts, file_hash, load_checkpoint, restore_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleRequest:
    class_id: int
    count: int = 1
    prompt_source: Literal["bank", "free", "none"] = "bank"
    free_text: str = ""
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.prompt_source not in ("bank", "free", "none"):
            raise ValidationError(f"unknown prompt source {self.prompt_source!r}", field="prompt_source")
        if self.prompt_source == "free" and not self.free_text.strip():
            raise ValidationError("free-text prompt source needs non-empty text", field="free_text")
        if self.count < 1:
            raise ValidationError("count must be positive", field="count")


@dataclass
class Provenance:
    file: str | None
    index: int
    class_id: int
    prompt_source: str
    prompt_text: str | None
    prompt_image_id: str | None
    seed: int
    checkpoint_hash: str


class Sampler:
    """Read-only wrapper around a checkpoint for repeated generation."""

    def __init__(self, cfg: TrainConfig, model: VAPDenoiser, codec: LatentCodec, checkpoint_hash: str = ""):
        self.cfg = cfg
        self.model = model.eval()
        self.codec = codec.eval()
        self.schedule = build_schedule(cfg.schedule, cfg.timesteps, cfg.beta_start, cfg.beta_end)
        self.checkpoint_hash = checkpoint_hash
        # autoencoder latents have no fixed range, so clipping only applies in pixel space
        self.clip_x0 = 1.0 if cfg.clip_denoised and codec.spec.mode == "identity" else None

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Sampler":
        cfg, model, codec = restore_model(load_checkpoint(path))
        return cls(cfg, model, codec, file_hash(path))

    @classmethod
    def from_trainer(cls, trainer) -> "Sampler":
        return cls(trainer.cfg, copy_model(trainer.sampling_model()), trainer.codec)

    @torch.no_grad()
    def sample(self, classes: Sequence[int], texts: Sequence[str | None], seed: int, batch_size: int = 64) -> torch.Tensor:
        """Generate one image per entry of ``classes``; ``None`` texts mean class-only conditioning."""
        if len(classes) != len(texts):
            raise ValidationError("classes and texts must align", field="texts")
        conditioned = self.cfg.use_vaps and any(t is not None for t in texts)
        if conditioned and any(t is None for t in texts):
            raise ValidationError("mixing texted and text-free samples in one call is unsupported", field="texts")
        gen = torch.Generator().manual_seed(seed)
        latent_shape = self.codec.spec.latent_shape
        out = []
        for start in range(0, len(classes), batch_size):
            c = torch.tensor(list(classes[start:start + batch_size]), dtype=torch.long)
            text = embed_texts(list(texts[start:start + batch_size]), self.cfg) if conditioned else None

            def predict(x, t, c=c, text=text):
                cond = ConditionSet(t=torch.full((len(c),), t, dtype=torch.long), c=c, text=text)
                return self.model.predict_noise(x, cond)

            z = sample_loop(predict, (len(c), *latent_shape), self.schedule, generator=gen, clip_x0=self.clip_x0)
            out.append(self.codec.decode_latent(z))
        return torch.cat(out)


def copy_model(model: VAPDenoiser) -> VAPDenoiser:
    clone = VAPDenoiser(model.cfg, model.use_pcm)
    clone.load_state_dict(model.state_dict())
    return clone.eval()


def draw_prompts(
    request: SampleRequest, bank: PromptBank | None, use_vaps: bool
) -> tuple[str, list[str | None], list[str | None]]:
    """Resolve the per-image prompt texts, falling back to class-only on an empty class."""
    source = request.prompt_source
    if not use_vaps and source != "none":
        log.warning("checkpoint was trained without descriptions; ignoring prompt source %r", source)
        source = "none"
    if source == "free":
        return source, [request.free_text] * request.count, [None] * request.count
    if source == "bank":
        if bank is None:
            raise ValidationError("prompt source 'bank' needs a prompt bank", field="bank")
        snap = bank.snapshot()
        rng = np.random.default_rng(request.seed)
        try:
            recs = [snap.retrieve_random(request.class_id, rng) for _ in range(request.count)]
        except EmptyClassError:
            log.warning("class %d is empty in the bank; falling back to class-only conditioning", request.class_id)
            source = "none"
        else:
            return source, [r.text for r in recs], [r.image_id for r in recs]
    return source, [None] * request.count, [None] * request.count


def generate(request: SampleRequest, checkpoint: str | Path | Sampler, bank: PromptBank | None = None):
    """Generate ``request.count`` images; writes PNGs and provenance.jsonl when ``out_dir`` is set.

    Returns ``(images, provenance)``; images are (N, C, H, W) in [0, 1].
    """
    sampler = checkpoint if isinstance(checkpoint, Sampler) else Sampler.from_checkpoint(checkpoint)
    n_classes = sampler.model.cfg.class_count
    if not 0 <= request.class_id < n_classes:
        raise ValidationError(f"class {request.class_id} outside [0, {n_classes})", field="class")
    source, texts, image_ids = draw_prompts(request, bank, sampler.cfg.use_vaps)
    images = sampler.sample([request.class_id] * request.count, texts, request.seed)
    out_dir = Path(request.out_dir) if request.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, img in enumerate(images):
        name = None
        if out_dir is not None:
            name = f"class{request.class_id}_seed{request.seed}_{i:04d}.png"
            write_png(img, out_dir / name)
        records.append(Provenance(
            file=name, index=i, class_id=request.class_id, prompt_source=source,
            prompt_text=texts[i], prompt_image_id=image_ids[i], seed=request.seed,
            checkpoint_hash=sampler.checkpoint_hash,
        ))
    if out_dir is not None:
        with (out_dir / "provenance.jsonl").open("a") as fh:
            for r in records:
                fh.write(json.dumps(asdict(r)) + "\n")
    return images, records
