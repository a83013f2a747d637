import csv

import numpy as np
import pytest
import torch

from vapdiff.data import ImageDataset, generate_toy_dataset, read_png, write_png
from vapdiff.errors import ValidationError
from vapdiff.evalkit import downstream as ds
from vapdiff.evalkit.features import (
    PixelExtractor,
    ToyCNNExtractor,
    extract_features,
    get_extractor,
)
from vapdiff.evalkit.reports import plot_bars, write_csv


def brute_auc(y, s):
    pos = [v for v, t in zip(s, y) if t]
    neg = [v for v, t in zip(s, y) if not t]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_mean_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 90)
    probs = rng.dirichlet(np.ones(3), 90)
    oracle = np.mean([brute_auc(y == c, probs[:, c]) for c in range(3)])
    assert ds.mean_auc(y, probs) == pytest.approx(oracle, abs=1e-12)
    assert ds.mean_auc(np.eye(3)[y].argmax(1), np.eye(3)[y]) == 1.0


def test_binary_auc():
    y = np.array([0, 0, 1, 1])
    p = np.array([[0.9, 0.1], [0.6, 0.4], [0.65, 0.35], [0.2, 0.8]])
    assert ds.mean_auc(y, p) == pytest.approx(brute_auc(y == 1, p[:, 1]))


def test_chance_classifier_sits_near_half():
    rng = np.random.default_rng(1)
    labels = torch.tensor(rng.integers(0, 3, 3000))
    images = torch.zeros(3000, 3, 4, 4)
    predict = ds.train_classifier(images, labels, 3, ds.ClassifierConfig(kind="chance"), seed=5)
    mauc, _ = ds.evaluate(predict, images, labels)
    assert abs(mauc - 0.5) <= 0.05


def test_stratified_subset():
    labels = torch.tensor([0] * 20 + [1] * 10 + [2] * 30)
    keep = ds.stratified_subset(labels, 0.1, 3, seed=0)
    assert torch.bincount(labels[keep]).tolist() == [2, 1, 3]
    assert torch.equal(keep, ds.stratified_subset(labels, 0.1, 3, seed=0))
    assert ds.stratified_subset(labels, 0.01, 3, 0).numel() == 3
    with pytest.raises(ValidationError):
        ds.stratified_subset(labels, 0.0, 3, 0)
    with pytest.raises(ValidationError):
        ds.stratified_subset(labels, 0.5, 4, 0)


def test_downstream_eval_without_synthetic_is_identical_training():
    gen = torch.Generator().manual_seed(0)
    x, y = torch.rand(30, 3, 8, 8, generator=gen), torch.arange(30) % 3
    base, aug = ds.downstream_eval(x, y, 0.5, None, None, x, y, 3, ds.ClassifierConfig(steps=5), seed=1)
    assert base.mauc == aug.mauc
    assert base.n_train == aug.n_train == 15


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    return generate_toy_dataset(tmp_path_factory.mktemp("ek"), n=30, n_test=6, seed=2)


def test_toy_dataset_layout(small_ds):
    assert small_ds.class_names == ["round", "square", "triangle"]
    assert len(small_ds.split("train")) == 30 and len(small_ds.split("test")) == 6
    x, y, ids = small_ds.tensors("train")
    assert x.shape == (30, 3, 32, 32) and 0 <= x.min() and x.max() <= 1
    assert torch.bincount(y).tolist() == [10, 10, 10]
    assert set(ids) <= set(small_ds.descriptions)


def test_toy_generation_is_deterministic(tmp_path):
    a = generate_toy_dataset(tmp_path / "a", n=9, seed=11)
    b = generate_toy_dataset(tmp_path / "b", n=9, seed=11)
    for ra, rb in zip(a.split("train"), b.split("train")):
        assert ra.read_bytes() == rb.read_bytes()
    assert a.descriptions == b.descriptions
    again = ImageDataset(tmp_path / "a")
    assert again.descriptions == a.descriptions


def test_png_roundtrip(tmp_path):
    img = torch.randint(0, 256, (3, 8, 8)).float() / 255
    write_png(img, tmp_path / "x.png")
    torch.testing.assert_close(read_png(tmp_path / "x.png"), img, rtol=0, atol=1e-6)


def test_pixel_extractor_and_registry():
    imgs = torch.rand(4, 3, 32, 32)
    fs = extract_features(imgs, "pixel-8")
    assert fs.features.shape == (4, 192) and fs.extractor_id == "pixel-8"
    np.testing.assert_allclose(fs.features, PixelExtractor(8).features(imgs))
    with pytest.raises(ValidationError, match="pixel-8"):
        get_extractor("inception")


def test_toy_extractor_fit_save_load(small_ds, tmp_path):
    ext = ToyCNNExtractor.fit(small_ds, epochs=1, dim=16, seed=0)
    assert ext.extractor_id.startswith("toy-cnn-")
    imgs = small_ds.tensors("test")[0]
    probs = ext.class_probs(imgs)
    np.testing.assert_allclose(probs.sum(1), 1.0)
    ext.save(tmp_path / "e.pt")
    again = ToyCNNExtractor.load(tmp_path / "e.pt")
    assert again.extractor_id == ext.extractor_id
    np.testing.assert_array_equal(again.features(imgs), ext.features(imgs))
    assert ToyCNNExtractor.fit(small_ds, epochs=1, dim=16, seed=0).extractor_id == ext.extractor_id


def test_reports(tmp_path):
    rows = [{"arm": "full", "fid": 1.0}, {"arm": "no_vaps", "fid": 2.0}]
    write_csv(rows, tmp_path / "r.csv")
    write_csv(rows[:1], tmp_path / "r.csv", append=True)
    with open(tmp_path / "r.csv") as fh:
        assert [r["arm"] for r in csv.DictReader(fh)] == ["full", "no_vaps", "full"]
    assert plot_bars(rows, "arm", ["fid"], tmp_path / "p.png").stat().st_size > 0
