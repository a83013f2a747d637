import time

import pytest
import torch

from vapdiff.bank import DescriptionRecord, PromptBank, save
from vapdiff.data import generate_toy_dataset
from vapdiff.engine import TrainConfig

torch.set_num_threads(1)


def bank_from_dataset(ds, split="train", bank_id="bank"):
    bank = PromptBank(ds.num_classes, bank_id)
    for r in ds.split(split):
        bank.insert(DescriptionRecord(ds.descriptions[r.image_id], r.class_id, r.image_id))
    return bank


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """60 train + 60 test toy images with train/test banks beside them."""
    root = tmp_path_factory.mktemp("toy")
    ds = generate_toy_dataset(root / "data", n=60, n_test=60, seed=7)
    save(bank_from_dataset(ds, "train"), root / "bank.jsonl")
    save(bank_from_dataset(ds, "test", "unseen"), root / "unseen.jsonl")
    return root


@pytest.fixture
def tiny_cfg(toy_root):
    return TrainConfig(
        dataset=str(toy_root / "data"),
        bank=str(toy_root / "bank.jsonl"),
        eval_bank=str(toy_root / "unseen.jsonl"),
        timesteps=20,
        patch_size=8,
        embed_dim=32,
        encoder_depth=1,
        middle_depth=1,
        decoder_depth=1,
        heads=2,
        text_dim=16,
        batch_size=8,
        steps=10,
        lr=1e-3,
    )


_ACCEPTANCE: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str, budget_s: float):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.detail = ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        ok = exc_type is None and elapsed < self.budget_s
        if exc_type is None and not ok:
            self.detail += f" over budget {self.budget_s:.0f}s"
        reason = f" [{exc_type.__name__}: {str(exc)[:160]}]" if exc_type is not None else ""
        line = (f"ACCEPTANCE {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}"
                f"  ({elapsed:.1f}s{'; ' + self.detail.strip() if self.detail.strip() else ''}){reason}")
        _ACCEPTANCE.append(line)
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title, budget_s) as c:`` times a block and records its PASS/FAIL line."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
