import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vapdiff.bank import DescriptionRecord, PromptBank, load, retrieve_random, save, split_bank
from vapdiff.errors import ConflictError, EmptyClassError, ParseError, ValidationError


def filled(counts, num_classes=None):
    bank = PromptBank(num_classes or len(counts), "b")
    for c, n in enumerate(counts):
        for i in range(n):
            bank.insert(DescriptionRecord(f"class {c} text {i}", c, f"c{c}_{i}"))
    return bank


def test_insert_and_duplicates():
    bank = PromptBank(2)
    bank.insert(DescriptionRecord("a", 0, "x"))
    bank.insert(DescriptionRecord("b", 1, "x"))
    assert bank.counts() == {0: 1, 1: 1}
    with pytest.raises(ConflictError):
        bank.insert(DescriptionRecord("again", 0, "x"))
    with pytest.raises(ValidationError):
        bank.insert(DescriptionRecord("z", 2, "y"))
    assert len(bank) == 2


def test_empty_class_is_an_error():
    bank = filled([2, 0])
    with pytest.raises(EmptyClassError) as exc:
        retrieve_random(bank, 1, 0)
    assert exc.value.class_id == 1


def test_single_record_always_returned():
    bank = filled([1])
    assert {retrieve_random(bank, 0, s).image_id for s in range(20)} == {"c0_0"}


def test_retrieval_is_uniform():
    bank = filled([4])
    rng = np.random.default_rng(2024)
    counts = Counter(retrieve_random(bank, 0, rng).image_id for _ in range(100_000))
    assert len(counts) == 4
    for n in counts.values():
        assert 0.24 <= n / 100_000 <= 0.26


def test_retrieval_reproducible_by_seed():
    bank = filled([10])
    a = [retrieve_random(bank, 0, s).image_id for s in range(30)]
    b = [retrieve_random(bank, 0, s).image_id for s in range(30)]
    assert a == b


def test_retrieval_stays_in_class():
    bank = filled([3, 5, 2])
    rng = np.random.default_rng(0)
    for c in range(3):
        assert all(retrieve_random(bank, c, rng).class_id == c for _ in range(50))


def test_roundtrip(tmp_path):
    bank = filled([3, 1, 2])
    bank.insert(DescriptionRecord("unicode é ✓", 1, "u", split_tag="unseen", embedding_ref="e/1"))
    save(bank, tmp_path / "b.jsonl")
    again = load(tmp_path / "b.jsonl")
    assert again == bank
    assert [r.text for r in again.records(1)] == [r.text for r in bank.records(1)]


def test_empty_bank_roundtrip(tmp_path):
    bank = PromptBank(3, "empty")
    save(bank, tmp_path / "e.jsonl")
    again = load(tmp_path / "e.jsonl")
    assert len(again) == 0 and again.num_classes == 3


def test_truncated_file_reports_line(tmp_path):
    save(filled([3, 3]), tmp_path / "b.jsonl")
    lines = (tmp_path / "b.jsonl").read_text().splitlines()
    (tmp_path / "cut.jsonl").write_text("\n".join(lines[:3]) + "\n" + lines[3][:10])
    with pytest.raises(ParseError) as exc:
        load(tmp_path / "cut.jsonl")
    assert exc.value.line == 4
    (tmp_path / "short.jsonl").write_text("\n".join(lines[:4]) + "\n")
    with pytest.raises(ParseError):
        load(tmp_path / "short.jsonl")


def test_split_is_deterministic_disjoint_and_complete():
    bank = filled([10, 6, 3])
    seen, unseen = split_bank(bank, 0.3, seed=5)
    seen2, unseen2 = split_bank(bank, 0.3, seed=5)
    assert seen == seen2 and unseen == unseen2
    for c in range(3):
        a = {r.image_id for r in seen.records(c)}
        b = {r.image_id for r in unseen.records(c)}
        assert not a & b
        assert a | b == {r.image_id for r in bank.records(c)}
        assert a and b
    assert all(r.split_tag == "unseen" for r in unseen)


def test_split_needs_two_records():
    with pytest.raises(ValidationError):
        split_bank(filled([1, 4]), 0.5)


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.integers(2, 12), min_size=1, max_size=4), frac=st.floats(0.01, 0.99),
       seed=st.integers(0, 10**6))
def test_split_partitions_every_class(counts, frac, seed):
    bank = filled(counts)
    seen, unseen = split_bank(bank, frac, seed)
    assert len(seen) + len(unseen) == len(bank)
    for c, n in enumerate(counts):
        assert 1 <= len(unseen.records(c)) <= n - 1


def test_snapshot_is_frozen():
    bank = filled([2])
    snap = bank.snapshot()
    bank.insert(DescriptionRecord("new", 0, "new"))
    assert len(snap) == 2
    with pytest.raises(Exception):
        snap.insert(DescriptionRecord("x", 0, "zz"))
