"""Finite augmentation graphs.

A graph is a set of source images, a set of augmented views, and the
conditional probabilities ``cond[i, a] = p(a | image i)``.  Everything the
rest of the package needs (kernels, operators, covariances) is derived from
``cond`` and the image prior, so the same objects give exact population
quantities and Monte-Carlo estimates from sampled views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12
FORMAT_NAME = "augmentation-graph"
FORMAT_VERSION = 1


class UnreachableVertexError(ValueError):
    """Raised when some view has zero marginal probability."""

    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        super().__init__(f"unreachable vertices (p(x) = 0): {self.indices}")


@dataclass(frozen=True, eq=False)
class AugmentationGraph:
    cond: np.ndarray
    image_prior: np.ndarray
    labels: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        cond = np.array(self.cond, dtype=float)
        prior = np.array(self.image_prior, dtype=float)
        labels = np.array(self.labels, dtype=int)
        groups = np.array(self.groups, dtype=int)
        if cond.ndim != 2 or cond.size == 0:
            raise ValueError("cond must be a non-empty 2-d array")
        if prior.shape != (cond.shape[0],):
            raise ValueError("image_prior length must equal the number of images")
        if labels.shape != (cond.shape[1],) or groups.shape != (cond.shape[1],):
            raise ValueError("labels and groups must have length n_views")
        if not (np.all(np.isfinite(cond)) and np.all(np.isfinite(prior))):
            raise ValueError("cond and image_prior must be finite")
        if np.any(cond < 0) or np.any(prior < 0):
            raise ValueError("probabilities must be non-negative")
        bad = np.flatnonzero(np.abs(cond.sum(axis=1) - 1.0) > ROW_TOL)
        if bad.size:
            raise ValueError(f"cond rows {bad.tolist()} do not sum to 1")
        if abs(prior.sum() - 1.0) > ROW_TOL:
            raise ValueError("image_prior must sum to 1")
        for name, arr in (("cond", cond), ("image_prior", prior),
                          ("labels", labels), ("groups", groups)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_images(self) -> int:
        return self.cond.shape[0]

    @property
    def n_views(self) -> int:
        return self.cond.shape[1]

    def marginal(self) -> np.ndarray:
        """p(x) = sum_i prior[i] cond[i, x]."""
        return self.image_prior @ self.cond

    def image_labels(self) -> np.ndarray:
        """Class of each source image, taken from its most likely view."""
        return self.labels[np.argmax(self.cond, axis=1)]

    def subset(self, images) -> "AugmentationGraph":
        """Restrict to a subset of source images, renormalizing the prior."""
        images = np.asarray(images, dtype=int)
        if images.size == 0:
            raise ValueError("empty image subset")
        prior = self.image_prior[images]
        if prior.sum() <= 0:
            raise ValueError("image subset has zero prior mass")
        return AugmentationGraph(self.cond[images], prior / prior.sum(),
                                 self.labels, self.groups)


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Symmetric edge weights over views plus the vertex marginals."""

    w: np.ndarray
    marginal: np.ndarray
    normalized: bool = field(default=False)

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        marginal = np.array(self.marginal, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("w must be square")
        if marginal.shape != (w.shape[0],):
            raise ValueError("marginal length must match w")
        if not np.allclose(w, w.T, rtol=0, atol=1e-12 * max(1.0, np.abs(w).max())):
            raise ValueError("w must be symmetric")
        w.setflags(write=False)
        marginal.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "marginal", marginal)

    @property
    def n(self) -> int:
        return self.w.shape[0]


def _check_simplex(values, names):
    values = np.asarray(values, dtype=float)
    if np.any(values < 0):
        raise ValueError(f"{', '.join(names)} must be non-negative")
    if abs(values.sum() - 1.0) > ROW_TOL:
        raise ValueError(f"{' + '.join(names)} must equal 1, got {values.sum()!r}")


def build_toy_graph(rho: float, mu: float, nu: float, delta: float) -> AugmentationGraph:
    """Two classes, two pixel-similarity groups, one image each.

    Images (and their views) are ordered (class 0, group 0), (class 0,
    group 1), (class 1, group 0), (class 1, group 1).  The arguments are the
    augmentation probabilities: ``rho`` keeps the image, ``mu`` jumps to the
    same class in the other group, ``nu`` to the other class in the same
    group and ``delta`` changes both.
    """
    _check_simplex([rho, mu, nu, delta], ["rho", "mu", "nu", "delta"])
    return build_block_graph(2, 2, 1, rho, mu, nu, delta)


def build_block_graph(
    n_classes: int,
    groups_per_class: int,
    views_per_image: int,
    within_image: float,
    within_class: float,
    within_group: float,
    background: float,
    seed: int = 0,
    jitter: float = 0.0,
) -> AugmentationGraph:
    """Block-structured graph with one image per (class, group) cell.

    Each image owns ``views_per_image`` views.  The weight of a view in
    ``cond[i]`` is one of the four relative weights depending on whether the
    view's owner is image ``i``, shares only its class, shares only its group,
    or shares neither.  Rows are then normalized.  ``jitter`` in [0, 1)
    perturbs every weight by a factor ``1 + jitter * U(-1, 1)`` drawn from
    ``seed``, which splits the exact eigenvalue multiplicities.
    """
    weights = np.array([within_image, within_class, within_group, background], dtype=float)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("block weights must be finite and non-negative")
    if min(n_classes, groups_per_class, views_per_image) < 1:
        raise ValueError("graph would have zero vertices")
    if not 0.0 <= jitter < 1.0:
        raise ValueError("jitter must lie in [0, 1)")

    n_images = n_classes * groups_per_class
    img_class = np.repeat(np.arange(n_classes), groups_per_class)
    img_group = np.tile(np.arange(groups_per_class), n_classes)
    owner = np.repeat(np.arange(n_images), views_per_image)

    same_img = owner[None, :] == np.arange(n_images)[:, None]
    same_cls = img_class[owner][None, :] == img_class[:, None]
    same_grp = img_group[owner][None, :] == img_group[:, None]
    raw = np.select(
        [same_img, same_cls & ~same_grp, ~same_cls & same_grp],
        [weights[0], weights[1], weights[2]],
        default=weights[3],
    )
    if jitter:
        rng = np.random.default_rng(seed)
        raw = raw * (1.0 + jitter * rng.uniform(-1.0, 1.0, size=raw.shape))
    rows = raw.sum(axis=1, keepdims=True)
    if np.any(rows <= 0):
        raise ValueError("block weights cannot be normalized (a row sums to zero)")
    cond = raw / rows
    prior = np.full(n_images, 1.0 / n_images)
    return AugmentationGraph(cond, prior, img_class[owner], img_group[owner])


def build_cosine_graph(eigenvalues, n_classes: int = 2) -> AugmentationGraph:
    """Images on a line whose centered normalized adjacency has a prescribed spectrum.

    Views coincide with images and ``cond`` is the symmetric, doubly
    stochastic matrix with cosine eigenvectors and eigenvalues
    ``1, sqrt(eigenvalues)``; the centered normalized adjacency then has
    exactly ``eigenvalues`` (plus one zero for the constant mode).  Classes
    are contiguous segments of the line and groups alternate along it.
    Spectra whose kernel would have negative entries are rejected.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    n = lam.size + 1
    if lam.ndim != 1 or n < 2 or not 1 <= n_classes <= n:
        raise ValueError("need at least one eigenvalue and 1 <= n_classes <= n_images")
    if np.any(lam < 0) or np.any(lam >= 1):
        raise ValueError("eigenvalues must lie in [0, 1)")
    k = np.arange(n)
    basis = np.sqrt(2.0 / n) * np.cos(np.pi * np.outer(k + 0.5, k) / n)
    basis[:, 0] = 1.0 / np.sqrt(n)
    cond = (basis * np.concatenate([[1.0], np.sqrt(lam)])) @ basis.T
    if cond.min() < -1e-12:
        raise ValueError("spectrum is not realizable: augmentation probabilities would be negative")
    cond = np.maximum(cond, 0.0)
    cond = cond / cond.sum(axis=1, keepdims=True)
    labels = k * n_classes // n
    prior = np.full(n, 1.0 / n)
    return AugmentationGraph(cond, prior, labels, k % 2)


def build_chain_graph(n_images: int, n_classes: int, decay: float) -> AugmentationGraph:
    """Cosine graph with the geometric spectrum ``decay ** (2k)``, k = 1..n-1."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    return build_cosine_graph(decay ** (2 * np.arange(1, n_images)), n_classes)


def toy_eigenvalues(rho, mu, nu, delta) -> np.ndarray:
    """Closed-form spectrum of the 4x4 matrix with rows (rho, mu, nu, delta), ...

    Returned in the fixed order of the eigenvectors [1,1,1,1], [1,1,-1,-1],
    [1,-1,1,-1], [1,-1,-1,1].
    """
    return np.array([
        rho + mu + nu + delta,
        rho + mu - nu - delta,
        rho - mu + nu - delta,
        rho - mu - nu + delta,
    ])


TOY_EIGENVECTORS = np.array([
    [1, 1, 1, 1],
    [1, 1, -1, -1],
    [1, -1, 1, -1],
    [1, -1, -1, 1],
], dtype=float).T / 2.0


def toy_entries(w: np.ndarray) -> tuple[float, float, float, float]:
    """Read (rho, mu, nu, delta) off a 4x4 matrix with the toy block layout.

    Each parameter occupies four positions; the mean over them is returned so
    the function also works on noisy estimates.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (4, 4):
        raise ValueError("toy layout needs a 4x4 matrix")
    pattern = np.array([[0, 1, 2, 3], [1, 0, 3, 2], [2, 3, 0, 1], [3, 2, 1, 0]])
    return tuple(float(w[pattern == k].mean()) for k in range(4))


def _require_reachable(p):
    zero = np.flatnonzero(p <= 0)
    if zero.size:
        raise UnreachableVertexError(zero)


def adjacency(graph: AugmentationGraph) -> KernelMatrix:
    """Augmentation kernel w_xz = E_i[p(x|i) p(z|i)] / (p(x) p(z))."""
    p = graph.marginal()
    _require_reachable(p)
    joint = (graph.cond.T * graph.image_prior) @ graph.cond
    w = joint / np.outer(p, p)
    return KernelMatrix(0.5 * (w + w.T), p)


def normalize(k: KernelMatrix) -> KernelMatrix:
    """Degree-normalized adjacency D^{-1/2} J D^{-1/2}.

    ``J = D k D`` is the joint-probability adjacency whose degrees are the
    marginals ``D``, so the result equals ``D^{1/2} k D^{1/2}``.  Its top
    eigenvalue is 1, attained at ``sqrt(marginal)``.
    """
    if k.normalized:
        return k
    p = k.marginal
    _require_reachable(p)
    s = np.sqrt(p)
    w_bar = s[:, None] * k.w * s[None, :]
    w_bar = 0.5 * (w_bar + w_bar.T)
    top = np.linalg.eigvalsh(w_bar)[-1]
    if top > 1.0 + 1e-9:
        raise ValueError(f"marginal inconsistent with w: normalized spectral radius {top:.6g} > 1")
    return KernelMatrix(w_bar, p, normalized=True)


def _seed_sequence(seed, *extra) -> np.random.SeedSequence:
    if isinstance(seed, (tuple, list)):
        entropy = [int(s) for s in seed]
    else:
        entropy = [int(seed)]
    return np.random.SeedSequence(entropy + [int(e) for e in extra])


def keyed_rng(seed, *key) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(_seed_sequence(seed, *key)))


def sample_views(graph: AugmentationGraph, m: int, seed) -> np.ndarray:
    """Draw ``m`` i.i.d. views per image; row ``i`` uses the stream (seed, i)."""
    if m < 1:
        raise ValueError("m must be at least 1")
    out = np.empty((graph.n_images, m), dtype=np.int64)
    for i in range(graph.n_images):
        out[i] = keyed_rng(seed, i).choice(graph.n_views, size=m, p=graph.cond[i])
    return out


def view_counts(views: np.ndarray, n_views: int) -> np.ndarray:
    """Histogram of sampled views per image, shape [n_images, n_views]."""
    n_images = views.shape[0]
    counts = np.zeros((n_images, n_views))
    np.add.at(counts, (np.repeat(np.arange(n_images), views.shape[1]), views.ravel()), 1.0)
    return counts


def pair_joint(counts: np.ndarray, prior: np.ndarray, m: int) -> np.ndarray:
    """Unbiased joint estimate from ordered pairs of distinct views of the same image."""
    joint = (counts.T * prior) @ counts - np.diag(prior @ counts)
    return joint / (m * (m - 1))


def empirical_adjacency(graph: AugmentationGraph, m: int, seed) -> KernelMatrix:
    """Monte-Carlo estimate of :func:`adjacency` from ``m`` views per image.

    Co-occurrences are counted over ordered pairs of *distinct* draws, which
    makes the joint estimate unbiased; the population marginals are used in
    the denominator.
    """
    if m < 2:
        raise ValueError("m must be at least 2 to form view pairs")
    p = graph.marginal()
    _require_reachable(p)
    counts = view_counts(sample_views(graph, m, seed), graph.n_views)
    joint = pair_joint(counts, graph.image_prior, m)
    return KernelMatrix(joint / np.outer(p, p), p)


def _fmt_row(values) -> str:
    return "[" + ", ".join(format(float(v), ".17g") for v in values) + "]"


def graph_to_text(graph: AugmentationGraph) -> str:
    """Serialize to JSON with 17 significant digits per probability."""
    lines = [
        "{",
        f'  "format": "{FORMAT_NAME}",',
        f'  "version": {FORMAT_VERSION},',
        f'  "n_images": {graph.n_images},',
        f'  "n_views": {graph.n_views},',
        '  "cond": [',
        ",\n".join("    " + _fmt_row(row) for row in graph.cond),
        "  ],",
        f'  "prior": {_fmt_row(graph.image_prior)},',
        f'  "labels": {json.dumps(graph.labels.tolist())},',
        f'  "groups": {json.dumps(graph.groups.tolist())}',
        "}",
    ]
    return "\n".join(lines) + "\n"


def graph_from_text(text: str) -> AugmentationGraph:
    data = json.loads(text)
    if data.get("format") != FORMAT_NAME:
        raise ValueError(f"not an {FORMAT_NAME} document")
    graph = AugmentationGraph(data["cond"], data["prior"], data["labels"], data["groups"])
    if (graph.n_images, graph.n_views) != (data["n_images"], data["n_views"]):
        raise ValueError("declared sizes do not match cond")
    return graph


def save_graph(graph: AugmentationGraph, path) -> None:
    Path(path).write_text(graph_to_text(graph))


def load_graph(path) -> AugmentationGraph:
    return graph_from_text(Path(path).read_text())
