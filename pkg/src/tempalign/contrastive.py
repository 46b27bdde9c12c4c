"""NT-Xent and two-stream InfoNCE losses with gradients w.r.t. the projections."""

from __future__ import annotations

import numpy as np

NORM_FLOOR = 1e-12


class ContrastiveError(ValueError):
    pass


def _unit_rows(Z):
    Z = np.asarray(Z, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] < NORM_FLOOR)
    if bad.size:
        raise ContrastiveError(f"row {bad[0]} has zero norm")
    return Z / norms, norms


def cosine_similarity_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    Ua, _ = _unit_rows(A)
    Ub, _ = _unit_rows(B)
    return Ua @ Ub.T


def _unit_rows_backward(U, norms, gU):
    # d(z/|z|) = (I - u u^T) / |z|
    return (gU - U * np.sum(U * gU, axis=1, keepdims=True)) / norms


def _log_softmax(logits, mask=None):
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def _temperature(tau, literal_delta):
    if not tau > 0:
        raise ContrastiveError(f"temperature must be positive, got {tau}")
    # exp(s)/tau scales every term of the ratio alike, so tau cancels
    return 1.0 if literal_delta else tau


def partner_index(n_rows: int) -> np.ndarray:
    """Positive partner of each row when pairs occupy adjacent rows (0,1), (2,3), ..."""
    return np.arange(n_rows) ^ 1


def ntxent_loss(Z: np.ndarray, tau: float, literal_delta: bool = False) -> tuple[float, np.ndarray]:
    """Mean NT-Xent over all 2N directed positive pairs.

    ``Z`` has 2N rows with positives on adjacent rows. Returns the loss and
    its gradient w.r.t. ``Z``.
    """
    n2 = len(Z)
    if n2 < 2 or n2 % 2:
        raise ContrastiveError(f"NT-Xent needs an even number of rows >= 2, got {n2}")
    t = _temperature(tau, literal_delta)
    U, norms = _unit_rows(Z)
    S = U @ U.T / t
    partner = partner_index(n2)
    rows = np.arange(n2)
    mask = ~np.eye(n2, dtype=bool)
    logp = _log_softmax(S, mask)
    loss = -logp[rows, partner].mean()
    G = np.exp(logp)  # zero on the diagonal
    G[rows, partner] -= 1.0
    G /= n2
    gU = (G + G.T) @ U / t
    return float(loss), _unit_rows_backward(U, norms, gU)


def infonce_directional(anchor: np.ndarray, other: np.ndarray, j: int, tau: float, literal_delta: bool = False) -> float:
    anchor = np.asarray(anchor, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if anchor.shape != other.shape:
        raise ContrastiveError(f"stream shapes differ: {anchor.shape} vs {other.shape}")
    if not 0 <= j < len(anchor):
        raise ContrastiveError(f"index {j} out of range for {len(anchor)} rows")
    t = _temperature(tau, literal_delta)
    s = cosine_similarity_matrix(anchor[j : j + 1], other)[0] / t
    mx = s.max()
    return float(-(s[j] - mx) + np.log(np.exp(s - mx).sum()))


def cmc_loss(A: np.ndarray, B: np.ndarray, tau: float, literal_delta: bool = False, return_parts: bool = False):
    """Symmetric cross-stream InfoNCE: row j of A and row j of B are positives.

    Returns ``(loss, grad_A, grad_B)``; with ``return_parts`` also the two
    directed means (A->B, B->A), each averaged over N.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ContrastiveError(f"stream shapes differ: {A.shape} vs {B.shape}")
    n = len(A)
    t = _temperature(tau, literal_delta)
    Ua, na = _unit_rows(A)
    Ub, nb = _unit_rows(B)
    S = Ua @ Ub.T / t
    idx = np.arange(n)
    logp_ab = _log_softmax(S)
    logp_ba = _log_softmax(S.T)
    l_ab = -logp_ab[idx, idx]
    l_ba = -logp_ba[idx, idx]
    loss = (l_ab.sum() + l_ba.sum()) / (2 * n)
    G_ab = np.exp(logp_ab)
    G_ab[idx, idx] -= 1.0
    G_ba = np.exp(logp_ba)
    G_ba[idx, idx] -= 1.0
    G = (G_ab + G_ba.T) / (2 * n)  # gradient w.r.t. S
    gA = _unit_rows_backward(Ua, na, G @ Ub / t)
    gB = _unit_rows_backward(Ub, nb, G.T @ Ua / t)
    if return_parts:
        return float(loss), gA, gB, (float(l_ab.mean()), float(l_ba.mean()))
    return float(loss), gA, gB


def combined_objective(contrastive: float, tfa: float, alpha: float) -> float:
    if alpha < 0:
        raise ContrastiveError("alpha must be non-negative")
    return contrastive + alpha * tfa
