"""Linear probe: closed-form one-vs-all least squares on frozen features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import keyed_rng
from .kernel import subspace_alignment

RIDGE = 1e-8


class ClassAbsentError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    weights: np.ndarray
    alignment: float | None = None


def split_indices(labels, train_frac: float, seed, stratify: bool = True):
    """Deterministic train/test split; stratified splits keep >= 1 sample per class on each side."""
    labels = np.asarray(labels)
    n = labels.size
    rng = keyed_rng(seed, 1)
    if not stratify:
        perm = rng.permutation(n)
        n_train = min(max(int(round(train_frac * n)), 1), n - 1)
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if idx.size < 2:
            raise ClassAbsentError(f"class {c} has fewer than 2 samples; cannot appear in both splits")
        k = min(max(int(round(train_frac * idx.size)), 1), idx.size - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def fit_least_squares(x: np.ndarray, y: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """One-vs-all ridge regression on [x, 1]; returns weights [n_classes x (d + 1)]."""
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    targets = (y[:, None] == classes[None, :]).astype(float)
    gram = xb.T @ xb + RIDGE * np.eye(xb.shape[1])
    return np.linalg.solve(gram, xb.T @ targets).T


def predict(weights: np.ndarray, x: np.ndarray, classes: np.ndarray) -> np.ndarray:
    scores = np.hstack([x, np.ones((x.shape[0], 1))]) @ weights.T
    # argmax returns the first maximum, so ties go to the lower class index
    return classes[np.argmax(scores, axis=1)]


def linear_probe(features, labels, train_frac: float = 0.5, seed=0, *, stratify: bool = True,
                 reference=None, sample_weight=None) -> ProbeResult:
    """Fit a linear classifier on features [d x n] and score it on held-out vertices.

    ``reference`` (a [k x n] basis such as the top eigenvectors) fills the
    ``alignment`` field.  ``sample_weight`` weights test vertices when
    computing accuracy (e.g. by their marginal probability).
    """
    f = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels)
    if f.shape[1] != labels.size:
        raise ValueError(f"features cover {f.shape[1]} vertices but {labels.size} labels given")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("need at least 2 classes")
    train, test = split_indices(labels, train_frac, seed, stratify)
    missing = np.setdiff1d(classes, labels[train])
    if missing.size:
        raise ClassAbsentError(f"classes {missing.tolist()} absent from the training split")
    x = f.T
    weights = fit_least_squares(x[train], labels[train], classes)
    correct = (predict(weights, x[test], classes) == labels[test]).astype(float)
    if sample_weight is None:
        accuracy = float(correct.mean())
    else:
        w = np.asarray(sample_weight, dtype=float)[test]
        accuracy = float(correct @ w / w.sum())
    alignment = None if reference is None else subspace_alignment(f, reference)
    return ProbeResult(accuracy, weights[:, :-1].copy(), alignment)
