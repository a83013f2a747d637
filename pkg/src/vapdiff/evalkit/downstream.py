"""Classification-augmentation harness.

Train a small classifier on a stratified fraction of the real training set,
once as-is and once with synthetic images added, and score both on a
held-out test set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import f1_score, roc_auc_score
from torch import nn

from ..errors import ValidationError


@dataclass(frozen=True)
class ClassifierConfig:
    kind: str = "cnn"  # "cnn" or "chance"
    steps: int = 300
    batch_size: int = 32
    lr: float = 2e-3


@dataclass
class DownstreamReport:
    real_fraction: float
    classifier_id: str
    augmentation: str
    mauc: float
    f1: float | None
    n_train: int

    def to_row(self) -> dict:
        return asdict(self)


def mean_auc(labels: np.ndarray, probs: np.ndarray) -> float:
    """Macro one-vs-rest ROC AUC; plain AUC for two classes."""
    labels = np.asarray(labels)
    if probs.shape[1] == 2:
        return float(roc_auc_score(labels, probs[:, 1]))
    return float(roc_auc_score(labels, probs, multi_class="ovr", average="macro", labels=np.arange(probs.shape[1])))


def stratified_subset(labels: torch.Tensor, fraction: float, num_classes: int, seed: int) -> torch.Tensor:
    if not 0 < fraction <= 1:
        raise ValidationError(f"must lie in (0, 1], got {fraction}", field="real_fraction")
    rng = np.random.default_rng(seed)
    keep = []
    y = labels.numpy()
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        if len(idx) == 0:
            raise ValidationError(f"class {c} has no real training images", field="real_fraction")
        n = min(len(idx), max(1, int(round(fraction * len(idx)))))
        keep.extend(rng.choice(idx, size=n, replace=False).tolist())
    return torch.tensor(sorted(keep))


class SmallCNN(nn.Module):
    def __init__(self, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(), nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(32, num_classes),
        )

    def forward(self, x):
        return self.net(x * 2 - 1)


def train_classifier(images, labels, num_classes: int, cfg: ClassifierConfig, seed: int):
    """Return a callable mapping images to class probabilities."""
    if cfg.kind == "chance":
        def chance(x):
            rng = np.random.default_rng(seed)
            return rng.dirichlet(np.ones(num_classes), size=len(x))
        return chance
    if cfg.kind != "cnn":
        raise ValidationError(f"unknown classifier kind {cfg.kind!r}", field="classifier")
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SmallCNN(num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    for _ in range(cfg.steps):
        idx = torch.randint(len(images), (min(cfg.batch_size, len(images)),), generator=gen)
        loss = F.cross_entropy(model(images[idx]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()

    @torch.no_grad()
    def predict(x):
        return torch.cat([model(b).softmax(-1) for b in x.split(256)]).double().numpy()

    return predict


def evaluate(predict, images, labels, multilabel: bool = False) -> tuple[float, float | None]:
    probs = predict(images)
    y = labels.numpy()
    mauc = mean_auc(y, probs)
    f1 = None if multilabel else float(f1_score(y, probs.argmax(1), average="macro"))
    return mauc, f1


def downstream_eval(
    real_images: torch.Tensor,
    real_labels: torch.Tensor,
    real_fraction: float,
    synthetic_images: torch.Tensor | None,
    synthetic_labels: torch.Tensor | None,
    test_images: torch.Tensor,
    test_labels: torch.Tensor,
    num_classes: int,
    cfg: ClassifierConfig = ClassifierConfig(),
    seed: int = 0,
) -> tuple[DownstreamReport, DownstreamReport]:
    """Return (baseline, augmented) reports trained under the same seed."""
    keep = stratified_subset(real_labels, real_fraction, num_classes, seed)
    x, y = real_images[keep], real_labels[keep]
    base = train_classifier(x, y, num_classes, cfg, seed)
    base_auc, base_f1 = evaluate(base, test_images, test_labels)
    if synthetic_images is not None and len(synthetic_images):
        x_aug = torch.cat([x, synthetic_images])
        y_aug = torch.cat([y, synthetic_labels.long()])
    else:
        x_aug, y_aug = x, y
    aug = train_classifier(x_aug, y_aug, num_classes, cfg, seed)
    aug_auc, aug_f1 = evaluate(aug, test_images, test_labels)
    n_syn = 0 if synthetic_images is None else len(synthetic_images)
    return (
        DownstreamReport(real_fraction, cfg.kind, "none", base_auc, base_f1, len(x)),
        DownstreamReport(real_fraction, cfg.kind, f"synthetic:{n_syn}", aug_auc, aug_f1, len(x_aug)),
    )
