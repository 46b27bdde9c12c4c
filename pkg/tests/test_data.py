import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tempalign.data import (
    CsvSchema,
    DataError,
    Recording,
    SchemaError,
    WindowedDataset,
    generate_synthetic,
    generate_synthetic_pair,
    load_manifest,
    load_recordings_csv,
    majority_label,
    make_windows,
    normalize_channels,
    select_labeled_subset,
    window_starts,
    write_dataset,
)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(4, 60, 20, 6, seed=1)


def test_csv_examples(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a,b\n0,1.0,2.0\n1,1.5,2.5\n2,2.0,3.0\n")
    rec = load_recordings_csv(p)
    assert rec.samples.shape == (3, 2)
    assert rec.channel_names == ("a", "b")
    assert rec.labels is None

    p.write_text("t,a,label\n" + "".join(f"{i},{i * 0.5},0\n" for i in range(5)))
    rec = load_recordings_csv(p, CsvSchema(label_column="label"))
    assert rec.labels.tolist() == [0] * 5

    p.write_text("t,a\n" + "".join(f"{i},{'oops' if i == 6 else i}\n" for i in range(10)))
    with pytest.raises(DataError, match=r"row 7\b"):
        load_recordings_csv(p)


def test_csv_schema_errors(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a\n0,1\n")
    with pytest.raises(SchemaError, match="label"):
        load_recordings_csv(p, CsvSchema(label_column="label"))
    with pytest.raises(SchemaError):
        load_recordings_csv(p, CsvSchema(channels=("a", "gyro_x")))
    p.write_text("")
    with pytest.raises(SchemaError):
        load_recordings_csv(p)


def test_window_examples():
    assert window_starts(100, 50, 0.5) == [0, 25, 50]
    assert window_starts(50, 50, 0.5) == [0]
    assert window_starts(100, 25, 0.0) == [0, 25, 50, 75]
    with pytest.raises(DataError):
        window_starts(40, 50, 0.5)
    with pytest.raises(DataError):
        window_starts(100, 50, 1.0)


@given(st.integers(1, 300), st.integers(1, 300), st.floats(0, 0.95))
def test_window_starts_progression(n, T, overlap):
    if T > n:
        with pytest.raises(DataError):
            window_starts(n, T, overlap)
        return
    starts = window_starts(n, T, overlap)
    stride = max(1, math.ceil(T * (1 - overlap)))
    assert starts[0] == 0
    assert all(b - a == stride for a, b in zip(starts, starts[1:]))
    assert starts[-1] + T <= n < starts[-1] + stride + T


def test_majority_label_ties_lowest():
    assert majority_label(np.array([2, 2, 1, 1])) == 1
    assert majority_label(np.array([3, 0, 3])) == 3


def test_make_windows_labels():
    labels = np.array([0] * 30 + [1] * 70)
    rec = Recording(np.arange(200.0).reshape(100, 2), 50.0, labels)
    ws = make_windows(rec, 50, 0.5)
    assert [w.label for w in ws] == [0, 1, 1]
    assert np.array_equal(ws[1].values, rec.samples[25:75])


def test_normalize_examples():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 8, 3))
    X[..., 1] = 5.0
    split = np.array(["train"] * 6 + ["test"] * 4)
    X[split == "test", :, 0] += 3.0
    ds = normalize_channels(WindowedDataset(X, None, split, 1))
    assert np.all(ds.X[..., 1] == 0)
    train = ds.X[:6].reshape(-1, 3)
    assert np.allclose(train[:, [0, 2]].mean(0), 0, atol=1e-12)
    assert np.allclose(train[:, [0, 2]].std(0), 1, atol=1e-12)
    assert abs(ds.X[6:, :, 0].mean()) > 1.0
    twice = normalize_channels(ds)
    assert np.allclose(twice.X, ds.X, atol=1e-6)
    assert "norm_mean" in ds.meta and "norm_std" in ds.meta


def test_synthetic_examples():
    ds = generate_synthetic(4, 500, 50, 6, seed=42)
    assert len(ds) == 2000
    assert np.bincount(ds.y).tolist() == [500] * 4
    again = generate_synthetic(4, 500, 50, 6, seed=42)
    assert np.array_equal(ds.X, again.X) and np.array_equal(ds.split, again.split)
    for c in range(4):
        counts = {s: int(np.sum((ds.y == c) & (ds.split == s))) for s in ("train", "val", "test")}
        assert counts == {"train": 350, "val": 75, "test": 75}
    with pytest.raises(DataError):
        generate_synthetic(1, 10, 50, 6, 0)
    with pytest.raises(DataError):
        generate_synthetic(2, 10, 50, 2, 0)


def test_noiseless_synthetic_is_periodic():
    T = 60
    ds = generate_synthetic(4, 5, T, 3, seed=3, noise_sigma=0.0)
    for x, c in zip(ds.X, ds.y):
        period = T // (c + 1)
        assert np.allclose(x[period:], x[:-period], atol=1e-9)


def test_orientation_only_rotates_triads():
    fixed = generate_synthetic(3, 10, 20, 7, seed=5, orientation=False)
    turned = generate_synthetic(3, 10, 20, 7, seed=5)
    norms = lambda X: np.linalg.norm(X[:, :, :6].reshape(30, 20, 2, 3), axis=-1)
    assert np.allclose(norms(turned.X), norms(fixed.X), atol=1e-12)
    assert np.array_equal(turned.X[:, :, 6], fixed.X[:, :, 6])
    assert not np.allclose(turned.X, fixed.X)
    assert turned.meta["orientation"] and not fixed.meta["orientation"]


def test_synthetic_pair_alignment():
    a, b = generate_synthetic_pair(3, 20, 50, 6, 30, 4, seed=0)
    assert a.X.shape == (60, 50, 6) and b.X.shape == (60, 30, 4)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.split, b.split)


def test_labeled_subset_examples(small):
    sub = select_labeled_subset(small, seed=0, k=1)
    train = sub.split == "train"
    assert train.sum() == 4
    assert sorted(sub.y[train].tolist()) == [0, 1, 2, 3]
    assert (sub.split != "train").sum() == (small.split != "train").sum()
    n_train = int((small.split == "train").sum())
    half = select_labeled_subset(small, seed=0, p=0.5)
    assert (half.split == "train").sum() == math.ceil(0.5 * n_train)
    other = select_labeled_subset(small, seed=1, k=5)
    first = select_labeled_subset(small, seed=0, k=5)
    assert not np.array_equal(other.meta["source_index"], first.meta["source_index"])
    assert len(other) == len(first)


def test_labeled_subset_errors(small):
    with pytest.raises(DataError, match="class 0"):
        select_labeled_subset(small, seed=0, k=1000)
    with pytest.raises(DataError):
        select_labeled_subset(small, seed=0)
    with pytest.raises(DataError):
        select_labeled_subset(small, seed=0, p=0.0)
    with pytest.raises(DataError):
        select_labeled_subset(small.without_labels(), seed=0, k=1)


@given(st.integers(0, 10_000), st.one_of(st.integers(1, 42).map(lambda k: ("k", k)),
                                         st.floats(0.01, 1.0).map(lambda p: ("p", p))))
def test_labeled_subset_contract(small, seed, mode):
    kind, value = mode
    sub = select_labeled_subset(small, seed, **{kind: value})
    idx = sub.meta["source_index"]
    assert np.array_equal(sub.X, small.X[idx])
    chosen = idx[sub.split == "train"]
    assert np.all(small.split[chosen] == "train")
    counts = np.bincount(small.y[chosen], minlength=4)
    if kind == "k":
        assert counts.tolist() == [value] * 4
    else:
        n_train = int((small.split == "train").sum())
        assert counts.sum() == math.ceil(value * n_train)
        assert counts.max() - counts.min() <= 1  # classes are balanced in the train split


def test_dataset_round_trip(tmp_path, small):
    manifest = write_dataset(tmp_path, small, 50.0)
    back = load_manifest(manifest, small.window_len, 0.0, CsvSchema(label_column="label"), small.num_classes)
    order = np.concatenate([np.flatnonzero(small.split == s) for s in ("train", "val", "test")])
    assert np.allclose(back.X, small.X[order], atol=1e-8)
    assert np.array_equal(back.y, small.y[order])
    assert np.array_equal(back.split, small.split[order])


def test_manifest_errors(tmp_path):
    m = tmp_path / "m.txt"
    m.write_text("a.csv,holdout\n")
    with pytest.raises(DataError, match="line 1"):
        load_manifest(m, 10, 0.5)
