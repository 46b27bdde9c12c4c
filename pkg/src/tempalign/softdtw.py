"""Soft-DTW alignment cost, its gradient, a hard-DTW oracle, and the batched
temporal feature alignment loss.

Boundary cells of the DP table hold ``BIG`` (1e30) instead of +inf. Soft-min
terms that far above the running minimum underflow to exactly zero weight,
so the result matches an infinite boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BIG = 1e30


class AlignmentError(ValueError):
    pass


@dataclass
class DpTable:
    values: np.ndarray  # (T_i + 1, T_s + 1)
    gamma: float


def _check_gamma(gamma):
    if not gamma > 0:
        raise AlignmentError(f"gamma must be positive, got {gamma}")


def pairwise_sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise AlignmentError(f"feature sizes differ: {a.shape[-1]} vs {b.shape[-1]}")
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...h,...h->...", diff, diff)


def soft_min3(x: float, y: float, z: float, gamma: float) -> float:
    _check_gamma(gamma)
    m = min(x, y, z)
    if math.isinf(m):
        return math.inf
    total = sum(math.exp(-(v - m) / gamma) for v in (x, y, z) if not math.isinf(v))
    return m - gamma * math.log(total)


def _diagonal(d, n, m):
    i = np.arange(max(1, d - m), min(n, d - 1) + 1)
    return i, d - i


def softdtw_forward_batch(D: np.ndarray, gamma: float) -> np.ndarray:
    """DP tables for a stack of equal-shape cost matrices, shape (B, n+1, m+1)."""
    _check_gamma(gamma)
    B, n, m = D.shape
    # float64 unless the caller passes a wider float (finite-difference oracles use longdouble)
    R = np.full((B, n + 1, m + 1), BIG, dtype=np.result_type(D.dtype, np.float64))
    R[:, 0, 0] = 0.0
    for d in range(2, n + m + 1):
        i, j = _diagonal(d, n, m)
        r = np.stack([R[:, i - 1, j - 1], R[:, i - 1, j], R[:, i, j - 1]])
        rmin = r.min(axis=0)
        soft = rmin - gamma * np.log(np.exp(-(r - rmin) / gamma).sum(axis=0))
        R[:, i, j] = D[:, i - 1, j - 1] + soft
    return R


def softdtw_backward_batch(D: np.ndarray, R: np.ndarray, gamma: float) -> np.ndarray:
    """Expected alignment matrices E = d value / d D for a stack of tables."""
    B, n, m = D.shape
    if R.shape != (B, n + 1, m + 1):
        raise AlignmentError(f"table shape {R.shape} does not match cost shape {D.shape}")
    Dx = np.zeros((B, n + 2, m + 2))
    Dx[:, 1 : n + 1, 1 : m + 1] = D
    Rx = np.full((B, n + 2, m + 2), -np.inf)
    Rx[:, 1 : n + 1, 1 : m + 1] = R[:, 1:, 1:]
    Rx[:, n + 1, m + 1] = R[:, n, m]
    E = np.zeros((B, n + 2, m + 2))
    E[:, n + 1, m + 1] = 1.0
    for d in range(n + m, 1, -1):
        i, j = _diagonal(d, n, m)
        r = Rx[:, i, j]
        a = np.exp((Rx[:, i + 1, j] - r - Dx[:, i + 1, j]) / gamma)
        b = np.exp((Rx[:, i, j + 1] - r - Dx[:, i, j + 1]) / gamma)
        c = np.exp((Rx[:, i + 1, j + 1] - r - Dx[:, i + 1, j + 1]) / gamma)
        E[:, i, j] = a * E[:, i + 1, j] + b * E[:, i, j + 1] + c * E[:, i + 1, j + 1]
    return E[:, 1 : n + 1, 1 : m + 1]


def _as_cost(D):
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.size == 0:
        raise AlignmentError(f"cost matrix must be a non-empty 2-D array, got shape {D.shape}")
    if not np.all(np.isfinite(D)):
        raise AlignmentError("cost matrix has non-finite entries")
    return D


def softdtw_value(D: np.ndarray, gamma: float) -> tuple[float, DpTable]:
    D = _as_cost(D)
    R = softdtw_forward_batch(D[None], gamma)[0]
    return float(R[-1, -1]), DpTable(R, gamma)


def softdtw_grad(D: np.ndarray, table: DpTable, gamma: float | None = None) -> np.ndarray:
    D = _as_cost(D)
    gamma = table.gamma if gamma is None else gamma
    if table.values.shape != (D.shape[0] + 1, D.shape[1] + 1):
        raise AlignmentError(f"table shape {table.values.shape} does not match cost shape {D.shape}")
    return softdtw_backward_batch(D[None], table.values[None], gamma)[0]


def hard_dtw(D: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    D = _as_cost(D)
    n, m = D.shape
    R = np.full((n + 1, m + 1), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[i, j] = D[i - 1, j - 1] + min(R[i - 1, j - 1], R[i - 1, j], R[i, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        # candidates in tie-break order: diagonal, vertical, horizontal
        moves = [(i - 1, j - 1), (i - 1, j), (i, j - 1)]
        i, j = min(moves, key=lambda ij: R[ij])
        path.append((i - 1, j - 1))
    return float(R[n, m]), path[::-1]


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)


def tfa_batch_loss(pairs, gamma: float, normalize: bool = True) -> tuple[float, list[np.ndarray]]:
    """Mean Soft-DTW cost over pairs of feature sequences.

    Returns the loss and, per pair, the alignment matrix E (the gradient of
    that pair's cost w.r.t. its distance matrix, before the 1/N mean).
    """
    pairs = list(pairs)
    if not pairs:
        raise AlignmentError("empty batch")
    values, grads = [], []
    for a, b in pairs:
        if normalize:
            a, b = l2_normalize_rows(np.asarray(a, float)), l2_normalize_rows(np.asarray(b, float))
        D = pairwise_sq_distances(a, b)
        v, table = softdtw_value(D, gamma)
        values.append(v)
        grads.append(softdtw_grad(D, table))
    total = 0.0
    for v in values:
        total += v
    return total / len(values), grads


def tfa_loss_and_feature_grads(ha: np.ndarray, hb: np.ndarray, gamma: float):
    """Batched TFA on row-normalized features ``ha`` (N, Ta, H), ``hb`` (N, Tb, H).

    Inputs are assumed already normalized; returns the mean cost and its
    gradients w.r.t. ``ha`` and ``hb``.
    """
    N = ha.shape[0]
    if hb.shape[0] != N or ha.shape[-1] != hb.shape[-1]:
        raise AlignmentError(f"incompatible feature batches {ha.shape} and {hb.shape}")
    D = pairwise_sq_distances(ha, hb)
    R = softdtw_forward_batch(D, gamma)
    E = softdtw_backward_batch(D, R, gamma)
    total = 0.0
    for v in R[:, -1, -1]:
        total += float(v)
    # D[t,u] = |a_t - b_u|^2
    rows = E.sum(axis=2)[..., None]
    cols = E.sum(axis=1)[..., None]
    ga = 2.0 * (rows * ha - E @ hb) / N
    gb = 2.0 * (cols * hb - np.swapaxes(E, 1, 2) @ ha) / N
    return total / N, ga, gb
