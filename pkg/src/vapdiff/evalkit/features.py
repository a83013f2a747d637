"""Pluggable feature extractors.

``pixel`` (downsampled raw pixels) is always available.  ``toy-cnn`` is a
small CNN trained once on the toy benchmark's class labels, with auxiliary
attribute heads so its features also separate colour, size and texture.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..data import TOY_BACKGROUNDS, TOY_COLORS, TOY_SIZES, TOY_TEXTURES, ImageDataset, generate_toy_dataset
from ..errors import ValidationError
from .metrics import FeatureSet


class Extractor(Protocol):
    extractor_id: str
    dim: int

    def features(self, images: torch.Tensor) -> np.ndarray: ...


class PixelExtractor:
    def __init__(self, size: int = 8):
        self.size = size
        self.extractor_id = f"pixel-{size}"
        self.dim = 3 * size * size

    def features(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            x = F.adaptive_avg_pool2d(images.float(), self.size)
        return x.flatten(1).double().numpy()


class _ToyNet(nn.Module):
    def __init__(self, n_classes: int, dim: int, aux_sizes: tuple[int, ...]):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
            nn.Linear(256, dim),
        )
        self.cls = nn.Linear(dim, n_classes)
        self.aux = nn.ModuleList(nn.Linear(dim, n) for n in aux_sizes)

    def forward(self, x):
        f = self.body(x)
        return f, self.cls(F.relu(f)), [h(F.relu(f)) for h in self.aux]


class ToyCNNExtractor:
    """Frozen CNN; ``features`` returns the embedding layer, ``class_probs`` the softmax."""

    AUX = (list(TOY_COLORS), list(TOY_SIZES), list(TOY_TEXTURES), list(TOY_BACKGROUNDS))

    def __init__(self, net: _ToyNet, extractor_id: str):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.extractor_id = extractor_id
        self.dim = net.cls.in_features

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> np.ndarray:
        return torch.cat([self.net(b.float() * 2 - 1)[0] for b in images.split(256)]).double().numpy()

    @torch.no_grad()
    def class_probs(self, images: torch.Tensor) -> np.ndarray:
        logits = torch.cat([self.net(b.float() * 2 - 1)[1] for b in images.split(256)]).double()
        return logits.softmax(-1).numpy()

    def save(self, path: str | Path) -> None:
        torch.save({"state": self.net.state_dict(), "extractor_id": self.extractor_id, "dim": self.dim}, path)

    @classmethod
    def load(cls, path: str | Path) -> "ToyCNNExtractor":
        blob = torch.load(path, weights_only=False)
        net = _ToyNet(len(blob["state"]["cls.bias"]), blob["dim"], tuple(len(a) for a in cls.AUX))
        net.load_state_dict(blob["state"])
        return cls(net, blob["extractor_id"])

    @classmethod
    def fit(cls, dataset: ImageDataset, epochs: int = 15, dim: int = 64, seed: int = 0) -> "ToyCNNExtractor":
        gen = torch.Generator().manual_seed(seed)
        images, labels, ids = dataset.tensors(None)
        rows = _read_attrs(dataset)
        aux_targets = []
        for attr, vocab in zip(("color", "size", "texture", "background"), cls.AUX):
            aux_targets.append(torch.tensor([vocab.index(rows[i][attr]) for i in ids]))
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            net = _ToyNet(dataset.num_classes, dim, tuple(len(a) for a in cls.AUX))
        opt = torch.optim.Adam(net.parameters(), lr=2e-3)
        for _ in range(epochs):
            order = torch.randperm(len(images), generator=gen)
            for i in range(0, len(images), 32):
                idx = order[i:i + 32]
                _, logits, aux = net(images[idx] * 2 - 1)
                loss = F.cross_entropy(logits, labels[idx])
                loss = loss + 0.5 * sum(F.cross_entropy(a, t[idx]) for a, t in zip(aux, aux_targets))
                opt.zero_grad()
                loss.backward()
                opt.step()
        digest = hashlib.sha256(b"".join(p.detach().numpy().tobytes() for p in net.parameters())).hexdigest()[:8]
        return cls(net, f"toy-cnn-{digest}")


def _read_attrs(dataset: ImageDataset) -> dict[str, dict]:
    rows = {}
    for line in (dataset.root / "attributes.jsonl").read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            rows[d["image_id"]] = d
    return rows


def fit_toy_extractor(work_dir: str | Path, seed: int = 1234, n: int = 600) -> ToyCNNExtractor:
    """Train (or reload) the reference toy extractor on its own generated set."""
    work_dir = Path(work_dir)
    ckpt = work_dir / f"toy_extractor_{seed}_{n}.pt"
    if ckpt.exists():
        return ToyCNNExtractor.load(ckpt)
    data = generate_toy_dataset(work_dir / f"extractor_data_{seed}", n=n, seed=seed)
    ext = ToyCNNExtractor.fit(data, seed=seed)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    ext.save(ckpt)
    return ext


_REGISTRY: dict[str, Extractor] = {}


def register_extractor(extractor: Extractor) -> str:
    _REGISTRY[extractor.extractor_id] = extractor
    return extractor.extractor_id


def get_extractor(extractor_id: str) -> Extractor:
    try:
        return _REGISTRY[extractor_id]
    except KeyError:
        raise ValidationError(
            f"unknown extractor {extractor_id!r}; registered: {sorted(_REGISTRY)}", field="extractor"
        ) from None


def extract_features(images: torch.Tensor, extractor_id: str) -> FeatureSet:
    ext = get_extractor(extractor_id)
    return FeatureSet(ext.features(images), ext.extractor_id)


register_extractor(PixelExtractor(8))
