"""Class-keyed store of training descriptions with seeded random retrieval.

On disk a bank is JSON lines: a header ``{"bank_id", "num_classes",
"count"}`` followed by one ``{"class", "image_id", "text", "split_tag"}``
object per record, in per-class insertion order.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import ConflictError, EmptyClassError, ParseError, ValidationError


@dataclass(frozen=True)
class DescriptionRecord:
    text: str
    class_id: int
    image_id: str
    split_tag: str = "seen"
    embedding_ref: str | None = None

    def to_dict(self) -> dict:
        d = {"class": self.class_id, "image_id": self.image_id, "text": self.text, "split_tag": self.split_tag}
        if self.embedding_ref is not None:
            d["embedding_ref"] = self.embedding_ref
        return d


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class PromptBank:
    """Per-class description lists.

    Writers go through :meth:`insert`; :meth:`snapshot` hands out a frozen
    copy for sampling runs.
    """

    def __init__(self, num_classes: int, bank_id: str = "bank", records: Iterable[DescriptionRecord] = ()):
        if num_classes < 1:
            raise ValidationError("need at least one class", field="num_classes")
        self.num_classes = num_classes
        self.bank_id = bank_id
        self._by_class: dict[int, list[DescriptionRecord]] = {c: [] for c in range(num_classes)}
        self._keys: set[tuple[int, str]] = set()
        self._lock = threading.Lock()
        self.frozen = False
        for r in records:
            self.insert(r)

    def _check_class(self, c: int) -> None:
        if not isinstance(c, (int, np.integer)) or not 0 <= c < self.num_classes:
            raise ValidationError(f"class {c!r} outside [0, {self.num_classes})", field="class")

    def insert(self, record: DescriptionRecord) -> "PromptBank":
        if self.frozen:
            raise ValidationError("bank snapshot is read-only", field="bank")
        self._check_class(record.class_id)
        if not record.text or not record.text.strip():
            raise ValidationError(f"empty text for image {record.image_id}", field="text")
        key = (int(record.class_id), record.image_id)
        with self._lock:
            if key in self._keys:
                raise ConflictError(f"class {key[0]} already holds image {key[1]!r}", field="image_id")
            self._keys.add(key)
            self._by_class[int(record.class_id)].append(record)
        return self

    def records(self, c: int) -> tuple[DescriptionRecord, ...]:
        self._check_class(c)
        return tuple(self._by_class[c])

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self._by_class.items()}

    def __len__(self) -> int:
        return len(self._keys)

    def __iter__(self):
        for c in range(self.num_classes):
            yield from self._by_class[c]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PromptBank):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.bank_id == other.bank_id
            and self._by_class == other._by_class
        )

    def by_image(self) -> Mapping[str, DescriptionRecord]:
        return MappingProxyType({r.image_id: r for r in self})

    def snapshot(self) -> "PromptBank":
        snap = PromptBank(self.num_classes, self.bank_id, list(self))
        snap.frozen = True
        return snap

    def retrieve_random(self, c: int, seed=None) -> DescriptionRecord:
        """Uniform draw from class ``c``; ``seed`` is an int or a numpy Generator."""
        self._check_class(c)
        items = self._by_class[c]
        if not items:
            raise EmptyClassError(c)
        return items[int(_rng(seed).integers(len(items)))]


def retrieve_random(bank: PromptBank, c: int, seed=None) -> DescriptionRecord:
    return bank.retrieve_random(c, seed)


def split_bank(bank: PromptBank, holdout: float, seed=0) -> tuple[PromptBank, PromptBank]:
    """Per-class disjoint split into (seen, unseen); ``holdout`` is the unseen fraction."""
    if not 0 < holdout < 1:
        raise ValidationError(f"must lie in (0, 1), got {holdout}", field="holdout")
    for c, n in bank.counts().items():
        if n < 2:
            raise ValidationError(f"class {c} has {n} record(s); need at least 2 to split", field="class")
    rng = _rng(seed)
    seen = PromptBank(bank.num_classes, f"{bank.bank_id}-seen")
    unseen = PromptBank(bank.num_classes, f"{bank.bank_id}-unseen")
    for c in range(bank.num_classes):
        items = bank.records(c)
        n_unseen = min(max(int(round(holdout * len(items))), 1), len(items) - 1)
        held = set(rng.permutation(len(items))[:n_unseen].tolist())
        for i, r in enumerate(items):
            if i in held:
                unseen.insert(replace(r, split_tag="unseen"))
            else:
                seen.insert(replace(r, split_tag="seen"))
    return seen, unseen


def save(bank: PromptBank, path: str | Path) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"bank_id": bank.bank_id, "num_classes": bank.num_classes, "count": len(bank)})]
    lines += [json.dumps(r.to_dict(), ensure_ascii=False) for r in bank]
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load(path: str | Path) -> PromptBank:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise ParseError(f"cannot read bank file {path}: {exc}") from exc
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("missing header", line=1)
    try:
        header = json.loads(lines[0])
        bank = PromptBank(int(header["num_classes"]), str(header["bank_id"]))
        expected = int(header["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad header: {exc}", line=1) from exc
    for n, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            record = DescriptionRecord(
                text=d["text"],
                class_id=int(d["class"]),
                image_id=str(d["image_id"]),
                split_tag=d.get("split_tag", "seen"),
                embedding_ref=d.get("embedding_ref"),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed record: {exc}", line=n) from exc
        try:
            bank.insert(record)
        except ValidationError as exc:
            raise ParseError(str(exc), line=n) from exc
    if len(bank) != expected:
        raise ParseError(f"header declares {expected} records, found {len(bank)} (truncated file?)", line=len(lines) + 1)
    return bank
