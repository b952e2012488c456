"""Loss functions: kernel matching, operator invariance, multi-view and
implementation-level BarlowTwins / VICReg, and the spectral-contrastive
decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .graph import KernelMatrix
from .kernel import FeatureMap, KernelOperator, inner, invariance_form

__all__ = [
    "FeatureMap",
    "LossConfig",
    "idealized_loss",
    "operator_invariance_loss",
    "invariance_terms",
    "multi_aug_loss",
    "pairwise_loss",
    "barlow_twins_loss",
    "vicreg_loss",
    "spectral_contrastive_decomposition",
    "fit_invariance_features",
]


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.0
    mu: float = 25.0
    m: int = 2

    def __post_init__(self):
        if self.beta < 0 or self.mu < 0:
            raise ValueError("beta and mu must be non-negative")
        if self.m < 1:
            raise ValueError("m must be at least 1")


def idealized_loss(f: FeatureMap, k: KernelMatrix) -> float:
    """Weighted mean over vertex pairs of (k(x, z) - F(x)^T F(z))^2."""
    if f.n != k.n:
        raise ValueError(f"dimension mismatch: features on {f.n} inputs, kernel on {k.n}")
    mu = k.marginal / k.marginal.sum()
    resid = k.w - f.weights.T @ f.weights
    return float(mu @ (resid ** 2) @ mu)


def invariance_terms(f: FeatureMap, t_m: KernelOperator) -> np.ndarray:
    """Per-feature ||T f_i - f_i||^2 in the operator's measure."""
    if not t_m.is_square or f.n != t_m.shape[1]:
        raise ValueError(f"dimension mismatch: features on {f.n} inputs, operator {t_m.shape}")
    resid = t_m.apply(f.weights.T) - f.weights.T
    return (t_m.out_measure @ resid ** 2)


def operator_invariance_loss(f: FeatureMap, t_m: KernelOperator, beta: float) -> float:
    """sum_i ||T f_i - f_i||^2 + beta * sum_ij ((f_i, f_j) - delta_ij)^2."""
    inv = float(invariance_terms(f, t_m).sum())
    if beta == 0:
        return inv
    gram = inner(f, f, t_m.in_measure)
    return inv + beta * float(np.sum((gram - np.eye(f.d)) ** 2))


def _sq_dist(a: np.ndarray, b: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum((a - b) ** 2, axis=0) @ weights)


def _check_views(embeddings) -> list[np.ndarray]:
    views = [np.atleast_2d(np.asarray(z, dtype=float)) for z in embeddings]
    if len(views) < 2:
        raise ValueError("need at least m = 2 views")
    if any(v.shape != views[0].shape for v in views):
        raise ValueError("all view embeddings must share the shape [d, n_images]")
    return views


def _image_weights(n, weights):
    if weights is None:
        return np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise ValueError("image weights must have length n_images")
    return weights


def _ortho_penalty(views, zbar, w, on):
    if on == "mean":
        grams = [(zbar * w) @ zbar.T]
    elif on == "views":
        grams = [(z * w) @ z.T for z in views]
    else:
        raise ValueError("penalty_on must be 'mean' or 'views'")
    eye = np.eye(zbar.shape[0])
    return float(np.mean([np.sum((g - eye) ** 2) for g in grams]))


def multi_aug_loss(embeddings: Sequence[np.ndarray], beta: float, *, weights=None,
                   penalty_on: str = "mean", return_parts: bool = False):
    """Invariance to the per-image mean embedding, linear in the number of views.

    ``embeddings`` holds one [d, n_images] array per view.  The invariance
    term is E_x sum_j ||zbar(x) - z_j(x)||^2; the orthonormality penalty is
    applied to the averaged embedding (or averaged over the per-view
    embeddings with ``penalty_on="views"``).
    """
    views = _check_views(embeddings)
    w = _image_weights(views[0].shape[1], weights)
    zbar = np.mean(views, axis=0)
    inv = sum(_sq_dist(zbar, z, w) for z in views)
    pen = beta * _ortho_penalty(views, zbar, w, penalty_on) if beta else 0.0
    return (inv, pen) if return_parts else inv + pen


def pairwise_loss(embeddings: Sequence[np.ndarray], beta: float, *, weights=None,
                  penalty_on: str = "mean", return_parts: bool = False):
    """Invariance summed over every ordered pair of views; quadratic in m."""
    views = _check_views(embeddings)
    w = _image_weights(views[0].shape[1], weights)
    inv = 0.0
    for j, zj in enumerate(views):
        for k, zk in enumerate(views):
            if j != k:
                inv += _sq_dist(zj, zk, w)
    zbar = np.mean(views, axis=0)
    pen = beta * _ortho_penalty(views, zbar, w, penalty_on) if beta else 0.0
    return (inv, pen) if return_parts else inv + pen


def _centered_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    return (a - a.mean(axis=0)).T @ (b - b.mean(axis=0)) / (n - 1)


def _check_batch(z1, z2):
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z1.ndim != 2 or z1.shape != z2.shape:
        raise ValueError("z1 and z2 must be [batch, d] arrays of the same shape")
    if z1.shape[0] < 2:
        raise ValueError("batch size must be at least 2")
    return z1, z2


def barlow_twins_loss(z1, z2, beta: float) -> float:
    """sum_i (C_ii - 1)^2 + beta sum_{i != j} C_ij^2 with C the centered
    cross-covariance (1/(n-1) scaling, no standardization)."""
    z1, z2 = _check_batch(z1, z2)
    c = _centered_cov(z1, z2)
    diag = np.diag(c)
    off = c - np.diag(diag)
    return float(np.sum((diag - 1.0) ** 2) + beta * np.sum(off ** 2))


def vicreg_loss(z1, z2, mu: float) -> float:
    """Invariance + hinge variance + off-diagonal covariance terms."""
    z1, z2 = _check_batch(z1, z2)
    n, d = z1.shape

    def v(z):
        return np.mean(np.maximum(0.0, 1.0 - z.std(axis=0, ddof=1)))

    def c(z):
        cov = _centered_cov(z, z)
        return (np.sum(cov ** 2) - np.sum(np.diag(cov) ** 2)) / d

    invariance = mu / n * np.sum((z1 - z2) ** 2)
    return float(invariance + 0.5 * mu * (v(z1) + v(z2)) + 0.5 * (c(z1) + c(z2)))


class ContrastiveDecomposition(NamedTuple):
    total: float
    covariance: float
    variance: float
    alignment: float
    kappa: float


def spectral_contrastive_decomposition(z, w_bar: KernelMatrix) -> ContrastiveDecomposition:
    """Split ||Z Z^T - W||_F^2 into covariance, variance and alignment terms.

    total = ||Z^T Z - I||^2 + 2 sum_{i,x} (1 - w_xx) z_xi^2
            - 2 sum_i sum_{x != x'} w_xx' z_xi z_x'i + kappa,
    with kappa = ||W||_F^2 - d independent of Z.
    """
    z = np.asarray(z, dtype=float)
    w = w_bar.w if isinstance(w_bar, KernelMatrix) else np.asarray(w_bar, dtype=float)
    if z.ndim != 2 or z.shape[0] != w.shape[0]:
        raise ValueError("z must be [n_vertices, d] matching the kernel")
    d = z.shape[1]
    total = float(np.sum((z @ z.T - w) ** 2))
    covariance = float(np.sum((z.T @ z - np.eye(d)) ** 2))
    variance = float(2.0 * np.sum((1.0 - np.diag(w))[:, None] * z ** 2))
    off = w - np.diag(np.diag(w))
    alignment = float(-2.0 * np.sum(z * (off @ z)))
    kappa = float(np.sum(w ** 2) - d)
    return ContrastiveDecomposition(total, covariance, variance, alignment, kappa)


def _orthonormal_rows(g: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(g.T)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs[None, :]).T


def fit_invariance_features(t_m: KernelOperator, d: int, *, mode: str = "projection",
                            beta: float = 1.0, steps: int = 50_000, lr: float | None = None,
                            seed: int = 0, tol: float = 1e-14) -> FeatureMap:
    """Minimize the operator invariance loss by gradient descent.

    ``mode="projection"`` re-orthonormalizes the features (in the measure)
    after every step, enforcing the constraint exactly; ``mode="penalty"``
    adds ``beta * ||Gram - I||^2`` instead.  Iteration stops once the
    largest update falls below ``tol``.
    """
    if mode not in ("projection", "penalty"):
        raise ValueError("mode must be 'projection' or 'penalty'")
    b = invariance_form(t_m)
    n = b.shape[0]
    if not 1 <= d <= n:
        raise ValueError(f"d must lie in [1, {n}]")
    s = np.sqrt(b.in_measure)
    sym = s[:, None] * b.matrix / s[None, :]
    sym = 0.5 * (sym + sym.T)
    scale = max(np.linalg.norm(sym, 2), 1e-12)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, n))
    if mode == "projection":
        lr = 0.5 / scale if lr is None else lr
        g = _orthonormal_rows(g)
        for _ in range(steps):
            new = _orthonormal_rows(g - lr * 2.0 * g @ sym)
            delta = np.abs(new - g).max()
            g = new
            if delta < tol:
                break
    else:
        lr = 0.05 / (scale + beta) if lr is None else lr
        g = g / np.sqrt(n)
        eye = np.eye(d)
        for _ in range(steps):
            grad = 2.0 * g @ sym + 4.0 * beta * (g @ g.T - eye) @ g
            step = lr * grad
            g = g - step
            if np.abs(step).max() < tol:
                break
    return FeatureMap(g / s[None, :])
