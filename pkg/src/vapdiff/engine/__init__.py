from .ablation import ARMS, ablation_run, downstream_run, synthesize, validate_arms
from .config import KEYS, TrainConfig, config_from_dict, dump_config, load_config
from .sampler import Provenance, SampleRequest, Sampler, generate
from .trainer import CheckpointManifest, Trainer, load_checkpoint, restore_model, train

__all__ = [
    "ARMS",
    "ablation_run",
    "downstream_run",
    "synthesize",
    "validate_arms",
    "KEYS",
    "TrainConfig",
    "config_from_dict",
    "dump_config",
    "load_config",
    "Provenance",
    "SampleRequest",
    "Sampler",
    "generate",
    "CheckpointManifest",
    "Trainer",
    "load_checkpoint",
    "restore_model",
    "train",
]
