"""Run configuration.

A config file is flat TOML: ``key = value`` pairs, every key below, no
tables.  Unknown keys are rejected.  Relative paths resolve against the
config file's directory.

Keys
----
dataset          dataset root (manifest.jsonl + class folders)
modality         dermatologic | colorectal | chest_xray
bank             prompt bank used for training descriptions (needed when use_vaps)
eval_bank        bank of held-out descriptions used at evaluation time (optional)
schedule         linear | constant
timesteps        diffusion steps T
beta_start       first beta
beta_end         last beta
patch_size       denoiser patch size
embed_dim        token width K
encoder_depth    encoder blocks
middle_depth     middle blocks
decoder_depth    decoder blocks (must equal encoder_depth)
heads            attention heads
mlp_ratio        MLP hidden width / K
codec_mode       identity | autoencoder
codec_epochs     autoencoder fitting epochs
text_provider    bow | hash
text_dim         text embedding width
use_vaps         condition on descriptions
use_pcm          enable the prototype branch (only acts when use_vaps)
recon            compute the prototype reconstruction loss
alpha            weight of the reconstruction loss
masked_recon     restrict reconstruction attention to the sample's class (test mode)
lr               Adam learning rate
batch_size       training batch size
steps            optimizer steps
seed             seed for every random stream
checkpoint_every save a checkpoint every N steps (0: only at the end)
ema              keep an exponential moving average of the weights for sampling
ema_decay        EMA decay
clip_denoised    clamp the implied clean sample to [-1, 1] while sampling (pixel-space codec only)
eval_per_class   generated images per class in ablation evaluation
eval_k           k for manifold precision/recall
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PATH_KEYS = ("dataset", "bank", "eval_bank")
# keys that do not change what a training step computes
_UNHASHED = {"steps", "checkpoint_every", "eval_bank", "eval_per_class", "eval_k", "clip_denoised"}


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    modality: str = "dermatologic"
    bank: str = ""
    eval_bank: str = ""
    schedule: str = "linear"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    patch_size: int = 2
    embed_dim: int = 64
    encoder_depth: int = 2
    middle_depth: int = 1
    decoder_depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    codec_mode: str = "identity"
    codec_epochs: int = 30
    text_provider: str = "bow"
    text_dim: int = 64
    use_vaps: bool = True
    use_pcm: bool = True
    recon: bool = True
    alpha: float = 0.1
    masked_recon: bool = False
    lr: float = 2e-4
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    ema: bool = False
    ema_decay: float = 0.999
    clip_denoised: bool = True
    eval_per_class: int = 20
    eval_k: int = 3

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            expected = {"int": int, "float": (int, float), "bool": bool, "str": str}[f.type]
            if not isinstance(value, expected) or (f.type in ("int", "float") and isinstance(value, bool)):
                raise ConfigError(f"expected {f.type}, got {value!r}", field=f.name)
        if self.alpha < 0:
            raise ConfigError("must be non-negative", field="alpha")
        if self.codec_mode not in ("identity", "autoencoder"):
            raise ConfigError(f"unknown codec mode {self.codec_mode!r}", field="codec_mode")
        if self.steps < 0 or self.batch_size < 1 or self.timesteps < 1:
            raise ConfigError("steps, batch_size and timesteps must be positive", field="steps")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate_paths(self) -> None:
        if not self.dataset or not (Path(self.dataset) / "manifest.jsonl").exists():
            raise ConfigError(f"dataset {self.dataset!r} has no manifest.jsonl", field="dataset")
        if self.use_vaps and (not self.bank or not Path(self.bank).exists()):
            raise ConfigError(f"bank file {self.bank!r} not found (required when use_vaps)", field="bank")
        if self.eval_bank and not Path(self.eval_bank).exists():
            raise ConfigError(f"eval bank {self.eval_bank!r} not found", field="eval_bank")


KEYS = tuple(f.name for f in fields(TrainConfig))


def config_from_dict(data: dict, base_dir: str | Path | None = None) -> TrainConfig:
    unknown = sorted(set(data) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", field=unknown[0])
    data = dict(data)
    if base_dir is not None:
        for key in PATH_KEYS:
            if data.get(key):
                p = Path(data[key])
                data[key] = str(p if p.is_absolute() else Path(base_dir) / p)
    return TrainConfig(**data)


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", field="config")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}", field="config") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"tables are not allowed: {nested}", field=nested[0])
    data.update(overrides or {})
    return config_from_dict(data, base_dir=path.parent)


def dump_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n")
