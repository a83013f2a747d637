"""Ablation and downstream-augmentation drivers on top of train/generate."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .. import bank as bank_io
from ..data import ImageDataset
from ..errors import ValidationError
from ..evalkit import downstream as ds
from ..evalkit.features import Extractor
from ..evalkit.metrics import FeatureSet, fid, inception_score, precision_recall
from .config import TrainConfig
from .sampler import Sampler
from .trainer import Trainer

log = logging.getLogger(__name__)

ARMS = {
    "full": {"use_vaps": True, "use_pcm": True},
    "no_vaps": {"use_vaps": False, "use_pcm": False},
    "no_pcm": {"use_vaps": True, "use_pcm": False},
}


def validate_arms(cfg: TrainConfig, arms: Iterable[str]) -> list[str]:
    arms = list(arms)
    if not arms:
        raise ValidationError("no arms requested", field="arms")
    for arm in arms:
        parts = set(arm.split("+"))
        if {"no_pcm", "no_vaps"} <= parts:
            raise ValidationError(
                f"arm {arm!r}: the prototype branch is inactive without descriptions, so no_pcm cannot combine with no_vaps",
                field="arms",
            )
        if arm not in ARMS:
            raise ValidationError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}", field="arms")
        if ARMS[arm]["use_vaps"] and not cfg.use_vaps:
            what = "no_pcm" if arm == "no_pcm" else arm
            raise ValidationError(f"arm {what!r} requires descriptions but the config disables use_vaps", field="arms")
    return arms


def arm_config(cfg: TrainConfig, arm: str, seed: int | None = None) -> TrainConfig:
    changes = dict(ARMS[arm])
    if seed is not None:
        changes["seed"] = seed
    return cfg.replace(**changes)


def eval_prompts(bank, classes: Sequence[int], seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    snap = bank.snapshot()
    return [snap.retrieve_random(int(c), rng).text for c in classes]


def evaluate_sampler(
    sampler: Sampler,
    extractor: Extractor,
    real: torch.Tensor,
    per_class: int,
    num_classes: int,
    seed: int,
    bank=None,
    k: int = 3,
) -> dict:
    classes = [c for c in range(num_classes) for _ in range(per_class)]
    if sampler.cfg.use_vaps:
        texts = eval_prompts(bank, classes, seed)
    else:
        texts = [None] * len(classes)
    fake = sampler.sample(classes, texts, seed)
    real_f = FeatureSet(extractor.features(real), extractor.extractor_id)
    fake_f = FeatureSet(extractor.features(fake), extractor.extractor_id)
    precision, recall = precision_recall(real_f, fake_f, k=k)
    row = {
        "fid": fid(real_f, fake_f),
        "precision": precision,
        "recall": recall,
        "n_real": len(real_f),
        "n_fake": len(fake_f),
        "extractor_id": extractor.extractor_id,
    }
    if hasattr(extractor, "class_probs"):
        row["is_mean"] = inception_score(extractor.class_probs(fake))[0]
    return row


def ablation_run(
    cfg: TrainConfig,
    arms: Iterable[str],
    extractor: Extractor,
    seeds: Sequence[int] | None = None,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Train and evaluate every arm under each seed; one row per (arm, seed).

    Evaluation conditions on ``eval_bank`` (held-out descriptions) when set,
    otherwise on the training bank, and compares against the dataset's test
    split (or the training split when there is none).
    """
    arms = validate_arms(cfg, arms)
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    dataset = ImageDataset(cfg.dataset)
    real_split = "test" if dataset.split("test") else "train"
    real, _, _ = dataset.tensors(real_split)
    eval_bank = None
    if cfg.use_vaps:
        eval_bank = bank_io.load(cfg.eval_bank or cfg.bank)
    rows = []
    for seed in seeds:
        for arm in arms:
            acfg = arm_config(cfg, arm, seed)
            arm_dir = Path(out_dir) / f"{arm}_seed{seed}" if out_dir is not None else None
            trainer = Trainer(acfg, arm_dir)
            trainer.run()
            if arm_dir is not None:
                trainer.save(arm_dir / "checkpoint.pt")
                trainer.write_loss_csv(arm_dir / "loss.csv")
            metrics = evaluate_sampler(
                Sampler.from_trainer(trainer), extractor, real, acfg.eval_per_class,
                dataset.num_classes, seed, eval_bank, k=acfg.eval_k,
            )
            row = {"arm": arm, "seed": seed, **metrics, "config_hash": acfg.hash()}
            log.info("arm %s seed %d: fid %.3f recall %.3f", arm, seed, row["fid"], row["recall"])
            rows.append(row)
    return rows


def synthesize(sampler: Sampler, bank, count: int, num_classes: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """``count`` class-balanced synthetic images with bank-drawn prompts."""
    classes = [i % num_classes for i in range(count)]
    texts = eval_prompts(bank, classes, seed) if sampler.cfg.use_vaps else [None] * count
    images = sampler.sample(classes, texts, seed)
    return images, torch.tensor(classes)


def downstream_run(
    sampler: Sampler,
    dataset: ImageDataset,
    real_fraction: float,
    synthetic_count: int,
    seed: int,
    bank=None,
    classifier: ds.ClassifierConfig = ds.ClassifierConfig(),
) -> tuple[ds.DownstreamReport, ds.DownstreamReport]:
    real, labels, _ = dataset.tensors("train")
    test, test_labels, _ = dataset.tensors("test")
    syn, syn_labels = synthesize(sampler, bank, synthetic_count, dataset.num_classes, seed)
    return ds.downstream_eval(
        real, labels, real_fraction, syn, syn_labels, test, test_labels, dataset.num_classes, classifier, seed
    )
