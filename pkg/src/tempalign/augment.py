"""Stochastic time-series augmentations over (T, S) windows.

Every function takes an explicit ``numpy.random.Generator``; nothing touches
global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TimeWindow

KINDS = ("jitter", "scale", "rotate", "permute", "shift", "resized_crop", "shear")

DEFAULT_PARAMS = {
    "jitter": {"sigma": 0.05},
    "scale": {"sigma": 0.1},
    "rotate": {"max_angle": math.pi},
    "permute": {"min_segments": 2, "max_segments": 5},
    "shift": {"min_shift": 5, "max_shift": 10},
    "resized_crop": {"min_frac": 0.5},
    "shear": {"max_shear": 0.3},
}


class AugmentationError(ValueError):
    pass


@dataclass
class AugmentationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    probability: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentationError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise AugmentationError(f"{self.kind}: probability must lie in [0, 1]")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise AugmentationError(f"{self.kind}: unknown parameter(s) {sorted(unknown)}")
        self.params = {**DEFAULT_PARAMS[self.kind], **self.params}
        p = self.params
        if self.kind in ("jitter", "scale") and p["sigma"] < 0:
            raise AugmentationError(f"{self.kind}: sigma must be >= 0")
        if self.kind == "permute" and not 1 <= p["min_segments"] <= p["max_segments"]:
            raise AugmentationError("permute: need 1 <= min_segments <= max_segments")
        if self.kind == "shift" and not 0 <= p["min_shift"] <= p["max_shift"]:
            raise AugmentationError("shift: need 0 <= min_shift <= max_shift")
        if self.kind == "resized_crop" and not 0 < p["min_frac"] <= 1:
            raise AugmentationError("resized_crop: min_frac must lie in (0, 1]")


def _values(w):
    return w.values if isinstance(w, TimeWindow) else np.asarray(w, dtype=np.float64)


def _rewrap(w, values):
    return TimeWindow(values, w.label) if isinstance(w, TimeWindow) else values


def jitter(x, rng, sigma=0.05):
    return x + rng.normal(0.0, sigma, size=x.shape)


def scale(x, rng, sigma=0.1):
    return x * rng.normal(1.0, sigma, size=(1, x.shape[1]))


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def rotate(x, rng, max_angle=math.pi):
    T, S = x.shape
    if S % 3:
        raise AugmentationError(f"rotate: channel count {S} is not divisible by 3")
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    R = rotation_matrix(axis, rng.uniform(0.0, max_angle))
    return (x.reshape(T, S // 3, 3) @ R.T).reshape(T, S)


def permute(x, rng, min_segments=2, max_segments=5):
    m = int(rng.integers(min_segments, max_segments + 1))
    segments = np.array_split(x, m, axis=0)
    order = rng.permutation(m)
    return np.concatenate([segments[i] for i in order], axis=0)


def shift(x, rng, min_shift=5, max_shift=10):
    k = int(rng.integers(min_shift, max_shift + 1))
    return np.roll(x, k, axis=0)


def resized_crop(x, rng, min_frac=0.5):
    T = x.shape[0]
    length = int(rng.integers(max(1, math.ceil(min_frac * T)), T + 1))
    start = int(rng.integers(0, T - length + 1))
    crop = x[start : start + length]
    if length == 1:
        return np.repeat(crop, T, axis=0)
    pos = np.linspace(0.0, length - 1, T)
    grid = np.arange(length)
    return np.stack([np.interp(pos, grid, crop[:, s]) for s in range(x.shape[1])], axis=1)


def shear(x, rng, max_shear=0.3):
    T, S = x.shape
    if S % 2:
        raise AugmentationError(f"shear: channel count {S} is not divisible by 2")
    sx, sy = rng.uniform(-max_shear, max_shear, size=2)
    M = np.array([[1.0, sx], [sy, 1.0]])
    return (x.reshape(T, S // 2, 2) @ M.T).reshape(T, S)


_FUNCS = {
    "jitter": jitter,
    "scale": scale,
    "rotate": rotate,
    "permute": permute,
    "shift": shift,
    "resized_crop": resized_crop,
    "shear": shear,
}


def apply_augmentation(spec: AugmentationSpec, w, rng: np.random.Generator):
    x = _values(w)
    out = _FUNCS[spec.kind](x, rng, **spec.params)
    assert out.shape == x.shape
    return _rewrap(w, out)


def compose_pipeline(specs, w, rng: np.random.Generator):
    if not specs:
        raise AugmentationError("augmentation pipeline is empty")
    x = _values(w)
    for spec in specs:
        # the gate is always drawn so the stream layout does not depend on outcomes
        if rng.random() < spec.probability:
            x = apply_augmentation(spec, x, rng)
    return _rewrap(w, x)


def make_views(w, pipeline, rng: np.random.Generator):
    return compose_pipeline(pipeline, w, rng), compose_pipeline(pipeline, w, rng)


def augment_batch(X: np.ndarray, pipeline, rng: np.random.Generator) -> np.ndarray:
    """One independent pipeline pass per window of an (N, T, S) batch."""
    if not pipeline:
        return X.copy()
    return np.stack([compose_pipeline(pipeline, x, rng) for x in X])
