"""Dataset layout and the procedural toy benchmark.

Layout: ``root/<class_name>/<image_id>.png`` plus ``root/manifest.jsonl``
with one ``{"image_id", "class", "split"}`` object per line.  Class ids are
the positions of the class names in sorted order.  The toy generator also
writes ``attributes.jsonl`` holding the ground-truth description of each
image, which stands in for MLLM output in hermetic runs.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ValidationError

TOY_CLASSES = ("round", "square", "triangle")
TOY_COLORS = {
    "red": (0.85, 0.2, 0.2),
    "brown": (0.5, 0.3, 0.12),
    "dark violet": (0.22, 0.1, 0.35),
}
TOY_SIZES = {"small": 0.17, "medium": 0.27, "large": 0.38}
TOY_TEXTURES = ("smooth", "speckled")
TOY_BACKGROUNDS = {"pale": (0.93, 0.83, 0.76), "tan": (0.76, 0.6, 0.45)}


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    class_name: str
    class_id: int
    split: str
    path: Path

    def read_bytes(self) -> bytes:
        return self.path.read_bytes()


class ImageDataset:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.exists():
            raise ValidationError(f"no manifest.jsonl under {self.root}", field="dataset")
        rows = []
        for n, line in enumerate(manifest.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except ValueError as exc:
                raise ValidationError(f"manifest line {n}: {exc}", field="dataset") from exc
        self.class_names = sorted({r["class"] for r in rows})
        ids = {name: i for i, name in enumerate(self.class_names)}
        self.records = [
            ImageRecord(
                image_id=r["image_id"],
                class_name=r["class"],
                class_id=ids[r["class"]],
                split=r.get("split", "train"),
                path=self.root / r["class"] / f"{r['image_id']}.png",
            )
            for r in rows
        ]
        attr = self.root / "attributes.jsonl"
        self.descriptions: dict[str, str] = {}
        if attr.exists():
            for line in attr.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    self.descriptions[d["image_id"]] = d["description"]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def tensors(self, split: str | None = "train") -> tuple[torch.Tensor, torch.Tensor, list[str]]:
        """Images in [0, 1] as (N, C, H, W) float32, labels (N,), ids."""
        recs = self.records if split is None else self.split(split)
        if not recs:
            raise ValidationError(f"split {split!r} is empty", field="dataset")
        images = torch.stack([read_png(r.path) for r in recs])
        labels = torch.tensor([r.class_id for r in recs])
        return images, labels, [r.image_id for r in recs]


def read_png(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def png_bytes(image: torch.Tensor | np.ndarray) -> bytes:
    """Encode a (C, H, W) array in [0, 1] as 8-bit PNG."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(image, path: str | Path) -> None:
    Path(path).write_bytes(png_bytes(image))


def _shape_mask(shape: str, size: float, cx: float, cy: float, res: int) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    r = size * res
    if shape == "round":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    if shape == "square":
        half = r * 0.9
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # upward triangle inscribed around the centre
    top, base = cy - r * 1.1, cy + r * 0.9
    t = (yy - top) / (base - top)
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * r * 1.15)


def toy_image(rng: np.random.Generator, shape: str, color: str, size: str, texture: str, background: str, res: int = 32):
    bg = np.array(TOY_BACKGROUNDS[background])[:, None, None]
    grain = gaussian_filter(rng.standard_normal((res, res)), sigma=2.0) * 0.25
    img = bg + grain[None] * 0.15 + rng.standard_normal((3, res, res)) * 0.01
    cx, cy = res / 2 + rng.uniform(-3, 3), res / 2 + rng.uniform(-3, 3)
    mask = _shape_mask(shape, TOY_SIZES[size], cx, cy, res)
    lesion = np.array(TOY_COLORS[color])[:, None, None] * np.ones((3, res, res))
    if texture == "speckled":
        dots = rng.random((res, res)) < 0.18
        lesion = np.where(dots[None], lesion * 0.45 + 0.05, lesion)
    soft = gaussian_filter(mask.astype(np.float64), sigma=0.6)
    img = img * (1 - soft[None]) + lesion * soft[None]
    return np.clip(img, 0.0, 1.0)


def toy_description(shape: str, color: str, size: str, texture: str, background: str) -> str:
    return f"a {size} {color} {shape} lesion with {texture} texture on {background} skin"


def generate_toy_dataset(
    out: str | Path,
    n: int = 60,
    seed: int = 0,
    n_test: int = 0,
    res: int = 32,
) -> ImageDataset:
    """Write ``n`` train (+ ``n_test`` test) images balanced over three shape classes.

    Colour, size, texture and background vary independently within a class.
    """
    out = Path(out)
    rng = np.random.default_rng(seed)
    for name in TOY_CLASSES:
        (out / name).mkdir(parents=True, exist_ok=True)
    manifest, attrs = [], []
    colors, sizes, backgrounds = list(TOY_COLORS), list(TOY_SIZES), list(TOY_BACKGROUNDS)
    for idx in range(n + n_test):
        split = "train" if idx < n else "test"
        shape = TOY_CLASSES[idx % len(TOY_CLASSES)]
        color = colors[rng.integers(len(colors))]
        size = sizes[rng.integers(len(sizes))]
        texture = TOY_TEXTURES[rng.integers(len(TOY_TEXTURES))]
        background = backgrounds[rng.integers(len(backgrounds))]
        image_id = f"{split}_{idx:05d}"
        img = toy_image(rng, shape, color, size, texture, background, res)
        write_png(img, out / shape / f"{image_id}.png")
        manifest.append({"image_id": image_id, "class": shape, "split": split})
        attrs.append({
            "image_id": image_id,
            "description": toy_description(shape, color, size, texture, background),
            "color": color, "size": size, "texture": texture, "background": background,
        })
    (out / "manifest.jsonl").write_text("".join(json.dumps(m) + "\n" for m in manifest))
    (out / "attributes.jsonl").write_text("".join(json.dumps(a) + "\n" for a in attrs))
    return ImageDataset(out)
