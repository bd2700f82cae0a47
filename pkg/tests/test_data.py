import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fate import data, toy
from fate.data import BatchSampler, DataError, Dataset, load_dataset, make_one_shot_split


def _toy(per_class=6, classes=5, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(rng.random((len(labels), 8, 8, 1)).astype(np.float32), labels, [f"c{i}" for i in range(classes)])


def test_idx_round_trip(tmp_path):
    ds = _toy(per_class=20)
    data.save_dataset(ds, tmp_path)
    raw = (tmp_path / "images.idx").read_bytes()
    assert struct.unpack(">I", raw[:4])[0] == 0x803
    back = load_dataset(tmp_path, "idx-binary")
    assert len(back) == 100 and back.images.shape == (100, 8, 8, 1)
    np.testing.assert_allclose(back.images, np.round(ds.images * 255) / 255, atol=1e-7)
    assert back.class_names == ds.class_names


def test_idx_errors(tmp_path):
    ds = _toy()
    data.save_dataset(ds, tmp_path)
    good = (tmp_path / "images.idx").read_bytes()
    (tmp_path / "images.idx").write_bytes(b"\x00\x00\x09\x03" + good[4:])
    with pytest.raises(DataError) as exc:
        load_dataset(tmp_path)
    assert exc.value.code == "header"
    (tmp_path / "images.idx").write_bytes(good[:-5])
    with pytest.raises(DataError) as exc:
        load_dataset(tmp_path)
    assert exc.value.code == "truncated"


def test_png_dir(tmp_path):
    (tmp_path / "images").mkdir()
    rows = [("b.png", 1), ("a.png", 0), ("c.png", 1)]
    for i, (name, _) in enumerate(rows):
        Image.fromarray(np.full((4, 4), 60 * i, np.uint8)).save(tmp_path / "images" / name)
    (tmp_path / "labels.csv").write_text("filename,label\n" + "".join(f"{n},{l}\n" for n, l in rows))
    ds = load_dataset(tmp_path, "png-dir", class_names=["x", "y"])
    assert len(ds) == 3
    assert ds.labels.tolist() == [1, 0, 1]
    np.testing.assert_allclose(ds.images[:, 0, 0, 0], [0, 60 / 255, 120 / 255])


def test_png_label_range(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "images" / "a.png")
    (tmp_path / "labels.csv").write_text("filename,label\na.png,12\n")
    with pytest.raises(DataError) as exc:
        load_dataset(tmp_path, "png-dir", class_names=[str(i) for i in range(10)])
    assert exc.value.code == "label-range"
    (tmp_path / "labels.csv").write_text("name,label\na.png,1\n")
    with pytest.raises(DataError):
        load_dataset(tmp_path, "png-dir")


def test_split_examples():
    ds = _toy(per_class=6, classes=10)
    sp = make_one_shot_split(ds, 1, 0)
    assert len(sp.labeled) == 10
    assert sp.labeled.tolist() == make_one_shot_split(ds, 1, 0).labeled.tolist()
    sp2 = make_one_shot_split(_toy(classes=5), 2, 3)
    assert len(sp2.labeled) == 10
    assert np.bincount(_toy(classes=5).labels[sp2.labeled]).tolist() == [2] * 5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 3), st.integers(2, 6))
def test_split_invariants(seed, lpc, classes):
    ds = _toy(per_class=5, classes=classes, seed=seed % 7)
    sp = make_one_shot_split(ds, lpc, seed)
    assert len(sp.labeled) == classes * lpc
    assert (np.bincount(ds.labels[sp.labeled], minlength=classes) == lpc).all()
    assert not set(sp.labeled) & set(sp.unlabeled)
    assert sorted(set(sp.labeled) | set(sp.unlabeled)) == list(range(len(ds)))


def test_split_class_too_small():
    ds = Dataset(np.zeros((3, 4, 4, 1)), [0, 0, 1], ["a", "b"])
    with pytest.raises(DataError) as exc:
        make_one_shot_split(ds)
    assert "b" in str(exc.value)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 4, 4, 1)), [0, 5], ["a", "b"])
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 4, 4, 1)), [0, 0], ["a", "b"])


@pytest.mark.parametrize("B,mu", [(32, 1), (4, 16)])
def test_batch_shapes(B, mu):
    ds = _toy(per_class=30, classes=10)
    sp = make_one_shot_split(ds)
    s = BatchSampler(sp, ds.labels, 10, B, mu, np.random.default_rng(0))
    for _ in range(20):
        bp = s.sample()
        assert len(bp.labeled_idx) == B and len(bp.unlabeled_idx) == int(B * mu)
        assert bp.labeled_onehot.shape == (B, 10)
        assert set(bp.labeled_idx) <= set(sp.labeled)
        assert set(bp.unlabeled_idx) <= set(sp.unlabeled)


def test_batch_errors():
    ds = _toy()
    sp = make_one_shot_split(ds)
    with pytest.raises(ValueError):
        BatchSampler(sp, ds.labels, 5, 4, 0.3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        BatchSampler(sp, ds.labels, 5, 4, 0.0, np.random.default_rng(0))


def test_unlabeled_pass_has_no_repeats():
    ds = _toy(per_class=21, classes=5)
    sp = make_one_shot_split(ds)
    s = BatchSampler(sp, ds.labels, 5, 10, 1, np.random.default_rng(1))
    seen = np.concatenate([s.sample().unlabeled_idx for _ in range(s.steps_per_epoch)])
    assert len(seen) == len(set(seen.tolist()))


def test_labeled_draws_are_uniform():
    ds = _toy(per_class=8, classes=10)
    sp = make_one_shot_split(ds)
    s = BatchSampler(sp, ds.labels, 10, 32, 1, np.random.default_rng(2))
    counts = np.zeros(10)
    for _ in range(10_000):
        counts += np.bincount(ds.labels[s.sample().labeled_idx], minlength=10)
    n = 320_000
    expected, sigma = n / 10, np.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - expected) < 3 * sigma)


def test_toy_classes_disjoint_and_domains():
    assert not set(toy.auxiliary_classes()) & set(toy.DOWNSTREAM)
    words = {w for c in toy.auxiliary_classes() for w in c.split()}
    assert {w for c in toy.DOWNSTREAM for w in c.split()} <= words
    aux, train, test = toy.make_toy_task(0, 2, 3, 2)
    assert train.images.shape[1:] == (28, 28, 1)
    assert train.images.min() >= 0 and train.images.max() <= 1
    # downstream images come from the brighter target rendering
    assert np.median(train.images) > np.median(aux.images) + 0.2
