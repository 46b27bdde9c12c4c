"""Recordings, sliding windows, normalization and synthetic datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass
class Recording:
    samples: np.ndarray  # (T_raw, S)
    sample_rate_hz: float = 1.0
    labels: np.ndarray | None = None
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise DataError(f"recording must be a non-empty T x S matrix, got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise DataError("sample_rate_hz must be positive")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.samples.shape[0],):
                raise DataError("labels must have one entry per timestep")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def num_channels(self) -> int:
        return self.samples.shape[1]


@dataclass
class TimeWindow:
    values: np.ndarray  # (T, S)
    label: int | None = None


@dataclass
class WindowedDataset:
    """Windows stacked as one (N, T, S) array with per-window labels and split tags."""

    X: np.ndarray
    y: np.ndarray | None
    split: np.ndarray
    num_classes: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.split = np.asarray(self.split, dtype="<U5")
        if self.X.ndim != 3:
            raise DataError(f"windows must be (N, T, S), got {self.X.shape}")
        if self.split.shape != (len(self.X),):
            raise DataError("one split tag per window required")
        bad = set(np.unique(self.split)) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split tags {sorted(bad)}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (len(self.X),):
                raise DataError("one label per window required")
            if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
                raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.X)

    @property
    def window_len(self) -> int:
        return self.X.shape[1]

    @property
    def num_channels(self) -> int:
        return self.X.shape[2]

    def select(self, index) -> "WindowedDataset":
        index = np.asarray(index)
        return replace(
            self,
            X=self.X[index],
            y=None if self.y is None else self.y[index],
            split=self.split[index],
            meta=dict(self.meta),
        )

    def part(self, name: str) -> "WindowedDataset":
        return self.select(np.flatnonzero(self.split == name))

    def without_labels(self) -> "WindowedDataset":
        return replace(self, y=None, meta=dict(self.meta))

    def windows(self) -> list[TimeWindow]:
        labels = [None] * len(self) if self.y is None else [int(v) for v in self.y]
        return [TimeWindow(x, lab) for x, lab in zip(self.X, labels)]


@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a recording CSV.

    ``channels=None`` takes every column other than the time and label columns.
    """

    time_column: str | None = "t"
    channels: tuple[str, ...] | None = None
    label_column: str | None = None
    sample_rate_hz: float = 50.0


def load_recordings_csv(path, schema: CsvSchema = CsvSchema()) -> Recording:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None

        declared = [c for c in (schema.time_column, schema.label_column) if c is not None]
        if schema.channels is not None:
            declared += list(schema.channels)
        missing = [c for c in declared if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing declared column(s) {missing}")

        if schema.channels is None:
            skip = {schema.time_column, schema.label_column}
            channels = [h for h in header if h not in skip]
        else:
            channels = list(schema.channels)
        if not channels:
            raise SchemaError(f"{path}: no channel columns")
        ch_idx = [header.index(c) for c in channels]
        lab_idx = header.index(schema.label_column) if schema.label_column else None

        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            data_row = lineno - 1
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno} (row {data_row}): expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in ch_idx])
                if lab_idx is not None:
                    labels.append(int(row[lab_idx]))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno} (row {data_row}): {exc}") from None

    if not rows:
        raise DataError(f"{path}: no data rows")
    return Recording(
        samples=np.array(rows, dtype=np.float64),
        sample_rate_hz=schema.sample_rate_hz,
        labels=np.array(labels, dtype=np.int64) if lab_idx is not None else None,
        channel_names=tuple(channels),
    )


def write_recording_csv(path, rec: Recording):
    names = rec.channel_names or tuple(f"ch{i}" for i in range(rec.num_channels))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["t", *names] + (["label"] if rec.labels is not None else [])) + "\n")
        for t in range(rec.num_samples):
            cells = [f"{t / rec.sample_rate_hz:.9g}"] + [f"{v:.9g}" for v in rec.samples[t]]
            if rec.labels is not None:
                cells.append(str(int(rec.labels[t])))
            fh.write(",".join(cells) + "\n")


def window_starts(num_samples: int, window_len: int, overlap: float) -> list[int]:
    if not 0 <= overlap < 1:
        raise DataError("overlap must lie in [0, 1)")
    if window_len < 1 or window_len > num_samples:
        raise DataError(f"window_len {window_len} exceeds recording length {num_samples}")
    stride = max(1, math.ceil(window_len * (1 - overlap)))
    return list(range(0, num_samples - window_len + 1, stride))


def majority_label(labels: np.ndarray) -> int:
    # argmax returns the first maximum, i.e. the lowest class id on ties
    return int(np.bincount(labels).argmax())


def make_windows(rec: Recording, window_len: int, overlap: float = 0.5) -> list[TimeWindow]:
    out = []
    for s in window_starts(rec.num_samples, window_len, overlap):
        lab = None if rec.labels is None else majority_label(rec.labels[s : s + window_len])
        out.append(TimeWindow(rec.samples[s : s + window_len].copy(), lab))
    return out


def channel_stats(ds: WindowedDataset) -> tuple[np.ndarray, np.ndarray]:
    train = ds.X[ds.split == "train"]
    if len(train) == 0:
        raise DataError("normalization needs a non-empty train split")
    flat = train.reshape(-1, ds.num_channels)
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR)


def normalize_channels(ds: WindowedDataset) -> WindowedDataset:
    mean, std = channel_stats(ds)
    out = replace(ds, X=(ds.X - mean) / std, meta=dict(ds.meta))
    out.meta["norm_mean"] = mean.tolist()
    out.meta["norm_std"] = std.tolist()
    return out


def stratified_split(y: np.ndarray, rng: np.random.Generator, fractions=(0.7, 0.15, 0.15)) -> np.ndarray:
    split = np.empty(len(y), dtype="<U5")
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        split[idx[:n_train]] = "train"
        split[idx[n_train : n_train + n_val]] = "val"
        split[idx[n_train + n_val :]] = "test"
    return split


def _class_waveforms(rng, labels, T, S, f0, harmonics, noise_sigma, phase=None, mix=None):
    """Per-window sums of harmonics of the class frequency (c + 1) * f0.

    Frequencies are in cycles per window. Each window draws its own phase and
    per-channel harmonic weights, so only the fundamental identifies the class.
    """
    n = len(labels)
    t = np.arange(T) / T
    if phase is None:
        phase = rng.uniform(0, 2 * np.pi, size=n)
    if mix is None:
        mix = rng.uniform(0.0, 1.0, size=(n, S, harmonics))
        mix[:, :, 0] = rng.uniform(0.5, 1.0, size=(n, S))
    ch_phase = np.linspace(0, np.pi, S, endpoint=False)
    freq = (labels + 1) * f0
    X = np.zeros((n, T, S))
    for h in range(1, harmonics + 1):
        arg = 2 * np.pi * h * freq[:, None, None] * t[None, :, None] + h * (phase[:, None, None] + ch_phase[None, None, :])
        X += mix[:, None, :, h - 1] * np.sin(arg)
    if noise_sigma > 0:
        X += rng.normal(0.0, noise_sigma, size=X.shape)
    return X, phase, mix


def random_orientation(X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotate every channel triad of each window by one uniform random rotation.

    Stands in for an unknown sensor orientation; trailing channels that do not
    fill a triad are left as is.
    """
    n, T, S = X.shape
    Q, R = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    Q = Q * np.sign(np.diagonal(R, axis1=1, axis2=2))[:, None, :]
    Q[np.linalg.det(Q) < 0, :, 0] *= -1
    k = S // 3 * 3
    out = X.copy()
    out[:, :, :k] = np.einsum("ntgj,nij->ntgi", X[:, :, :k].reshape(n, T, S // 3, 3), Q).reshape(n, T, k)
    return out


def generate_synthetic(
    num_classes: int,
    windows_per_class: int,
    T: int,
    S: int,
    seed: int,
    noise_sigma: float = 0.1,
    f0: float = 1.0,
    harmonics: int = 3,
    orientation: bool = True,
) -> WindowedDataset:
    if num_classes < 2:
        raise DataError("num_classes must be at least 2")
    if S < 3:
        raise DataError("synthetic data needs at least 3 channels")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(num_classes), windows_per_class)
    X, _, _ = _class_waveforms(rng, y, T, S, f0, harmonics, noise_sigma)
    if orientation:
        X = random_orientation(X, rng)
    split = stratified_split(y, rng)
    meta = {"source": "synthetic", "f0": f0, "noise_sigma": noise_sigma, "harmonics": harmonics, "orientation": orientation}
    return WindowedDataset(X, y, split, num_classes, seed, meta)


def generate_synthetic_pair(
    num_classes: int,
    windows_per_class: int,
    T_a: int,
    S_a: int,
    T_b: int,
    S_b: int,
    seed: int,
    noise_sigma: float = 0.1,
    f0: float = 1.0,
    harmonics: int = 3,
    orientation: bool = True,
) -> tuple[WindowedDataset, WindowedDataset]:
    """Two index-aligned streams observing the same instances.

    Window j of both streams shares class and phase; channel mixes, noise and
    orientation are drawn independently per stream and lengths may differ.
    """
    if num_classes < 2 or min(S_a, S_b) < 3:
        raise DataError("need num_classes >= 2 and at least 3 channels per stream")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(num_classes), windows_per_class)
    Xa, phase, _ = _class_waveforms(rng, y, T_a, S_a, f0, harmonics, noise_sigma)
    Xb, _, _ = _class_waveforms(rng, y, T_b, S_b, f0, harmonics, noise_sigma, phase=phase)
    if orientation:
        Xa, Xb = random_orientation(Xa, rng), random_orientation(Xb, rng)
    split = stratified_split(y, rng)
    meta = {"source": "synthetic-pair", "f0": f0, "noise_sigma": noise_sigma, "harmonics": harmonics,
            "orientation": orientation}
    return (
        WindowedDataset(Xa, y, split, num_classes, seed, dict(meta, stream="a")),
        WindowedDataset(Xb, y.copy(), split.copy(), num_classes, seed, dict(meta, stream="b")),
    )


def select_labeled_subset(ds: WindowedDataset, seed: int, k: int | None = None, p: float | None = None) -> WindowedDataset:
    """Keep val/test and a labeled subset of train.

    ``k`` draws k windows per class; ``p`` draws ceil(p * |train|) windows
    stratified by class (largest-remainder allocation).
    """
    if (k is None) == (p is None):
        raise DataError("give exactly one of k or p")
    if ds.y is None:
        raise DataError("labeled subset requires labels")
    rng = np.random.default_rng(seed)
    train_idx = np.flatnonzero(ds.split == "train")
    by_class = {c: train_idx[ds.y[train_idx] == c] for c in range(ds.num_classes)}
    if k is not None:
        if k < 1:
            raise DataError("k must be >= 1")
        for c, idx in by_class.items():
            if k > len(idx):
                raise DataError(f"k={k} exceeds the {len(idx)} training windows of class {c}")
        quota = {c: k for c in by_class}
    else:
        if not 0 < p <= 1:
            raise DataError("p must lie in (0, 1]")
        total = math.ceil(p * len(train_idx))
        exact = {c: total * len(idx) / len(train_idx) for c, idx in by_class.items()}
        quota = {c: int(math.floor(v)) for c, v in exact.items()}
        remainder = sorted(by_class, key=lambda c: (-(exact[c] - quota[c]), c))
        for c in remainder[: total - sum(quota.values())]:
            quota[c] += 1
    chosen = [rng.choice(by_class[c], size=quota[c], replace=False) for c in sorted(by_class)]
    keep = np.sort(np.concatenate([np.concatenate(chosen), np.flatnonzero(ds.split != "train")]))
    out = ds.select(keep)
    out.meta["source_index"] = keep
    out.meta["labeled_subset"] = {"mode": "per_class_k" if k is not None else "percentage", "k": k, "p": p, "seed": seed}
    return out


def load_manifest(path, window_len: int, overlap: float, schema: CsvSchema = CsvSchema(label_column="label"),
                  num_classes: int | None = None) -> WindowedDataset:
    """Read ``path,split`` lines and window every listed recording."""
    path = Path(path)
    X, y, split = [], [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise DataError(f"{path}: line {lineno}: expected '<file>,<train|val|test>'")
        rec_path = Path(parts[0])
        if not rec_path.is_absolute():
            rec_path = path.parent / rec_path
        rec = load_recordings_csv(rec_path, schema)
        for w in make_windows(rec, window_len, overlap):
            X.append(w.values)
            y.append(w.label)
            split.append(parts[1])
    if not X:
        raise DataError(f"{path}: manifest produced no windows")
    labels = None if y[0] is None else np.array(y)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels is not None else 1
    return WindowedDataset(np.stack(X), labels, np.array(split), num_classes, 0, {"source": str(path)})


def write_dataset(out_dir, ds: WindowedDataset, sample_rate_hz: float = 50.0, prefix: str = "") -> Path:
    """Write each split as one concatenated recording plus a manifest.

    Reloading with ``overlap=0`` and the same window length recovers the windows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in SPLITS:
        part = ds.part(name)
        if len(part) == 0:
            continue
        samples = part.X.reshape(-1, ds.num_channels)
        labels = None if part.y is None else np.repeat(part.y, ds.window_len)
        fname = f"{prefix}{name}.csv"
        write_recording_csv(out_dir / fname, Recording(samples, sample_rate_hz, labels))
        lines.append(f"{fname},{name}")
    manifest = out_dir / f"{prefix}manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
