"""Three-turn description protocol and its batch driver."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from ..errors import BatchAbortError, ProtocolError, ValidationError, VapError
from .clients import MllmClient, image_part, text_part
from .providers import TextEmbedding, TextProvider, encode_description
from .templates import get_templates

log = logging.getLogger(__name__)


@dataclass
class MllmTranscript:
    image_id: str
    modality: str
    t1: str
    t2: str
    tmix: str
    turns: list[dict] = field(default_factory=list)
    started_at: float = 0.0
    finished_at: float = 0.0

    def __post_init__(self):
        if len(self.turns) != 3 or [t["turn"] for t in self.turns] != [1, 2, 3]:
            raise ProtocolError(f"transcript for {self.image_id} must hold turns 1, 2, 3 in order")
        if not self.tmix.strip():
            raise ProtocolError(f"empty summary for {self.image_id}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MllmTranscript":
        return cls(**json.loads(line))


def _summarize(messages) -> list[dict]:
    """JSON-safe record of a request: text verbatim, images by digest."""
    out = []
    for m in messages:
        parts = []
        for p in m["content"]:
            if p["type"] == "text":
                parts.append({"type": "text", "text": p["text"]})
            else:
                parts.append({"type": "image", "sha256": hashlib.sha256(p["data"]).hexdigest()})
        out.append({"role": m["role"], "content": parts})
    return out


def _ask(client: MllmClient, messages, turn: int, image_id: str) -> tuple[str, dict]:
    reply = client.chat(messages)
    if not isinstance(reply, str) or not reply.strip():
        raise ProtocolError(f"empty reply at turn {turn} for image {image_id}")
    return reply.strip(), {"turn": turn, "request": _summarize(messages), "response": reply.strip()}


def run_vaps(image: bytes, modality: str, client: MllmClient, image_id: str = "") -> MllmTranscript:
    """Run the impression / attribute-reflection / grounded-summary exchange.

    Turn 2 is sent as a fresh conversation holding only the second question,
    so its answer cannot depend on the image or on turn 1.  Turn 3 carries
    ``t1, t2, image, q3`` in that order.  Any failure raises before a
    transcript exists.
    """
    if not image:
        raise ValidationError("image is empty", field="image")
    tpl = get_templates(modality)
    started = time.time()
    t1, turn1 = _ask(client, [{"role": "user", "content": [image_part(image), text_part(tpl.q1)]}], 1, image_id)
    t2, turn2 = _ask(client, [{"role": "user", "content": [text_part(tpl.q2)]}], 2, image_id)
    msg3 = [{"role": "user", "content": [text_part(t1), text_part(t2), image_part(image), text_part(tpl.q3)]}]
    tmix, turn3 = _ask(client, msg3, 3, image_id)
    return MllmTranscript(
        image_id=image_id,
        modality=modality,
        t1=t1,
        t2=t2,
        tmix=tmix,
        turns=[turn1, turn2, turn3],
        started_at=started,
        finished_at=time.time(),
    )


@dataclass
class DescribeRecord:
    image_id: str
    transcript: MllmTranscript
    embedding: TextEmbedding


def _read_ids(path: Path, key: str | None = None) -> set[str]:
    if not path.exists():
        return set()
    ids = set()
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            ids.add(json.loads(line)[key] if key else line)
        except (ValueError, KeyError):
            continue
    return ids


def batch_describe(
    items: Iterable[tuple[str, bytes | Path]],
    modality: str,
    client: MllmClient,
    provider: TextProvider,
    out_dir: str | Path,
    workers: int = 4,
    max_failure_rate: float = 0.5,
) -> Iterator[DescribeRecord]:
    """Describe every image, yielding records as they complete.

    Transcripts append to ``transcripts_<modality>.jsonl``; finished ids go to
    ``completed_<modality>.txt`` and failures to ``failures_<modality>.jsonl``.
    Ids already completed are skipped, so an interrupted run can be resumed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    get_templates(modality)
    store = out_dir / f"transcripts_{modality}.jsonl"
    ledger = out_dir / f"completed_{modality}.txt"
    failures = out_dir / f"failures_{modality}.jsonl"
    done = _read_ids(ledger) | _read_ids(store, "image_id")
    pending = [(i, src) for i, src in items if i not in done]
    if len(done):
        log.info("resuming: %d already described, %d pending", len(done), len(pending))
    lock = threading.Lock()
    n_failed = 0

    def work(image_id: str, src: bytes | Path):
        data = src if isinstance(src, bytes) else Path(src).read_bytes()
        transcript = run_vaps(data, modality, client, image_id=image_id)
        emb = encode_description(transcript.tmix, provider)
        # persist from the worker so finished work survives an abandoned generator
        with lock:
            with store.open("a") as fh:
                fh.write(transcript.to_json() + "\n")
            with ledger.open("a") as fh:
                fh.write(image_id + "\n")
        return transcript, emb

    queue = iter(pending)
    pool = ThreadPoolExecutor(max_workers=max(1, workers))
    running: dict = {}
    try:
        for image_id, src in itertools.islice(queue, max(1, workers)):
            running[pool.submit(work, image_id, src)] = image_id
        while running:
            finished, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in finished:
                image_id = running.pop(fut)
                nxt = next(queue, None)
                if nxt is not None:
                    running[pool.submit(work, *nxt)] = nxt[0]
                try:
                    transcript, emb = fut.result()
                except (VapError, OSError) as exc:
                    n_failed += 1
                    log.warning("describe failed for %s: %s", image_id, exc)
                    with lock, failures.open("a") as fh:
                        fh.write(json.dumps({"image_id": image_id, "error": str(exc), "kind": type(exc).__name__}) + "\n")
                    continue
                yield DescribeRecord(image_id, transcript, emb)
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    if pending and n_failed / len(pending) > max_failure_rate:
        raise BatchAbortError(f"{n_failed} of {len(pending)} images failed; see {failures}")


def load_transcripts(path: str | Path) -> list[MllmTranscript]:
    return [MllmTranscript.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


__all__ = [
    "MllmTranscript",
    "DescribeRecord",
    "run_vaps",
    "batch_describe",
    "load_transcripts",
]
