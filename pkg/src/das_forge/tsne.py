"""Exact t-SNE (O(N^2)), adequate for a few hundred points."""

from __future__ import annotations

import numpy as np

EARLY_EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_SWITCH = 250


def _row_affinities(d2_row: np.ndarray, target_entropy: float, tol: float = 1e-5, max_iter: int = 100):
    """Gaussian conditional probabilities for one point with precision
    ``beta`` bisected until the entropy matches log(perplexity)."""
    beta, lo, hi = 1.0, 0.0, np.inf
    d = d2_row - d2_row.min()
    for _ in range(max_iter):
        p = np.exp(-d * beta)
        s = p.sum()
        p /= s
        entropy = beta * np.dot(d, p) + np.log(s)
        diff = entropy - target_entropy
        if abs(diff) < tol:
            break
        if diff > 0:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
        else:
            hi = beta
            beta = (beta + lo) / 2.0
    return p


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    n = x.shape[0]
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        others = np.r_[0:i, i + 1 : n]
        P[i, others] = _row_affinities(d2[i, others], target)
    P = (P + P.T) / (2.0 * n)
    return np.maximum(P, 1e-12)


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    sq = (Y * Y).sum(axis=1)
    num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T)
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = ~np.eye(len(Y), dtype=bool)
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_2d(
    x: np.ndarray,
    perplexity: float = 30.0,
    n_iter: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
):
    """Embed ``x`` (N, D) in 2-D.

    Returns ``(Y, kl_history)``; the history holds the true (unexaggerated)
    KL divergence after every iteration.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("t-SNE needs at least 2 points")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x75E]))
    perplexity = min(perplexity, (n - 1) / 3.0)
    # break exact duplicates, which otherwise give zero distances everywhere
    x = x + 1e-10 * rng.standard_normal(x.shape)
    P = joint_probabilities(x, perplexity)
    Y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    scale = 1.0
    kl = kl_divergence(P, Y)
    history = []
    for it in range(n_iter):
        exaggerate = EARLY_EXAGGERATION if it < EXAGGERATION_ITERS else 1.0
        momentum = 0.5 if it < MOMENTUM_SWITCH else 0.8
        sq = (Y * Y).sum(axis=1)
        num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T)
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exaggerate * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = np.sign(grad) == np.sign(velocity)
        new_gains = np.maximum(np.where(same, gains * 0.8, gains + 0.2), 0.01)
        new_velocity = momentum * velocity - scale * learning_rate * new_gains * grad
        cand = Y + new_velocity
        cand -= cand.mean(axis=0)
        cand_kl = kl_divergence(P, cand)
        if it > EXAGGERATION_ITERS and cand_kl > kl:
            # reject an uphill step: drop momentum and shrink the step
            velocity = np.zeros_like(Y)
            gains = np.ones_like(Y)
            scale *= 0.5
        else:
            Y, velocity, gains, kl = cand, new_velocity, new_gains, cand_kl
            scale = min(1.0, scale * 1.1)
        history.append(kl)
    return Y, history
