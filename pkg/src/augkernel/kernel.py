"""Finite kernel operators in measure-weighted L2 spaces.

Functions on a finite set are vectors; an operator is a matrix together with
the measures of its domain and codomain.  Adjoints, orthonormality and
spectral decompositions all use the weighted inner product
``(f, g) = sum_x mu(x) f(x) g(x)``.

Two spaces appear throughout: functions on source images (measure = image
prior) and functions on views (measure = view marginal).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import AugmentationGraph, KernelMatrix, _require_reachable

SYMMETRY_TOL = 1e-10
EIGENGAP_MIN = 1e-3


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Linear features; row ``p`` holds feature ``f_p`` on the basis inputs."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim == 1:
            w = w[None, :]
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError("feature weights must be a [d, n] matrix with d >= 1")
        if not np.all(np.isfinite(w)):
            raise ValueError("feature weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @property
    def n(self) -> int:
        return self.weights.shape[1]


def _as_weights(f) -> np.ndarray:
    return f.weights if isinstance(f, FeatureMap) else np.atleast_2d(np.asarray(f, dtype=float))


@dataclass(frozen=True, eq=False)
class KernelOperator:
    matrix: np.ndarray
    in_measure: np.ndarray
    out_measure: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        mu_in = np.array(self.in_measure, dtype=float)
        mu_out = np.array(self.out_measure, dtype=float)
        if m.ndim != 2 or m.shape != (mu_out.size, mu_in.size):
            raise ValueError("matrix must be [n_out, n_in] matching the measures")
        for mu in (mu_in, mu_out):
            if not (np.all(np.isfinite(mu)) and np.all(mu > 0)):
                raise ValueError("measures must be strictly positive and finite")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "in_measure", mu_in)
        object.__setattr__(self, "out_measure", mu_out)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def is_square(self) -> bool:
        return (self.matrix.shape[0] == self.matrix.shape[1]
                and np.allclose(self.in_measure, self.out_measure, rtol=1e-12, atol=0))

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f

    def adjoint(self) -> "KernelOperator":
        """Adjoint with respect to the measure-weighted inner products."""
        adj = (self.matrix.T * self.out_measure[None, :]) / self.in_measure[:, None]
        return KernelOperator(adj, self.out_measure, self.in_measure)

    def __matmul__(self, other: "KernelOperator") -> "KernelOperator":
        """Composition ``self o other`` (apply ``other`` first)."""
        if other.matrix.shape[0] != self.matrix.shape[1] or not np.allclose(
                other.out_measure, self.in_measure, rtol=1e-12, atol=0):
            raise ValueError("cannot compose: codomain of right operand != domain of left")
        return KernelOperator(self.matrix @ other.matrix, other.in_measure, self.out_measure)

    def __sub__(self, other: "KernelOperator") -> "KernelOperator":
        if self.shape != other.shape:
            raise ValueError("dimension mismatch")
        return KernelOperator(self.matrix - other.matrix, self.in_measure, self.out_measure)


def inner(f, g, measure) -> np.ndarray:
    """Gram matrix ``(f_i, g_j)`` for row-stacked functions."""
    return (_as_weights(f) * measure[None, :]) @ _as_weights(g).T


def identity(measure) -> KernelOperator:
    measure = np.asarray(measure, dtype=float)
    return KernelOperator(np.eye(measure.size), measure, measure)


def kernel_operator(k: KernelMatrix) -> KernelOperator:
    """T_k f(x) = E_{z ~ marginal}[k(z, x) f(z)]."""
    mu = k.marginal / k.marginal.sum()
    return KernelOperator(k.w * mu[None, :], mu, mu)


def forward_operator(graph: AugmentationGraph) -> KernelOperator:
    """Averaging operator from image functions to view functions.

    ``(T f)(x) = sum_i p(i | x) f(i)`` with the posterior from Bayes' rule.
    Its adjoint averages a view function over the augmentations of each
    image, ``(T* g)(i) = sum_x p(x | i) g(x)``.
    """
    p = graph.marginal()
    _require_reachable(p)
    posterior = (graph.cond * graph.image_prior[:, None]).T / p[:, None]
    return KernelOperator(posterior, graph.image_prior, p)


def backward_kernel(graph: AugmentationGraph) -> KernelOperator:
    """Backward augmentation kernel on images, as an operator.

    k(i, j) = E_{x ~ p}[p(i|x)/prior(i) * p(j|x)/prior(j)], expanded with
    Bayes' rule to sum_x cond[i, x] cond[j, x] / p(x).
    """
    p = graph.marginal()
    _require_reachable(p)
    prior = graph.image_prior
    k = np.einsum("ix,jx,x->ij", graph.cond, graph.cond, 1.0 / p)
    k = 0.5 * (k + k.T)
    return KernelOperator(k * prior[None, :], prior, prior)


def modulus(t: KernelOperator) -> KernelOperator:
    """Positive factor |T| = (T* T)^{1/2} of the polar decomposition.

    It acts on the domain of ``T`` and satisfies ||T f|| = || |T| f || for
    every f, so it is the square operator through which ``T f - f`` makes
    sense when domain and codomain differ.
    """
    tt = t.adjoint() @ t
    spec = spectral_decompose(tt)
    root = np.sqrt(np.clip(spec.eigenvalues, 0.0, None))
    phi = spec.eigenvectors
    mat = (phi * root[None, :]) @ (phi.T * tt.in_measure[None, :])
    return KernelOperator(mat, tt.in_measure, tt.in_measure)


def invariance_form(t_m: KernelOperator) -> KernelOperator:
    """(T - I)* (T - I) for a square operator."""
    if not t_m.is_square:
        raise ValueError(
            f"dimension mismatch: invariance form needs a square operator, got {t_m.shape}; "
            "pass modulus(t_m) for a rectangular T")
    diff = t_m - identity(t_m.in_measure)
    return diff.adjoint() @ diff


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    measure: np.ndarray

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    def kernel(self) -> np.ndarray:
        """sum_j lambda_j phi_j phi_j^T."""
        return (self.eigenvectors * self.eigenvalues[None, :]) @ self.eigenvectors.T

    def projector(self, idx) -> np.ndarray:
        """Orthogonal projector (in the symmetric coordinates) onto the given eigenvectors."""
        u = self.eigenvectors[:, idx] * np.sqrt(self.measure)[:, None]
        return u @ u.T

    def clusters(self, tol: float = 1e-6) -> list[np.ndarray]:
        """Index groups of eigenvalues closer than ``tol`` to their neighbour."""
        groups, start = [], 0
        for j in range(1, self.n + 1):
            if j == self.n or self.eigenvalues[j - 1] - self.eigenvalues[j] > tol:
                groups.append(np.arange(start, j))
                start = j
        return groups


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs[None, :]


def spectral_decompose(k) -> SpectralDecomposition:
    """Descending eigenpairs of a self-adjoint operator or symmetric kernel matrix.

    A :class:`KernelMatrix` (or plain array) is decomposed in the Euclidean
    geometry; a :class:`KernelOperator` in its measure geometry, with
    eigenvectors orthonormal under that measure.  Each eigenvector is signed
    so its largest-magnitude entry (first one on ties) is positive.
    """
    if isinstance(k, KernelOperator):
        if not k.is_square:
            raise ValueError("spectral decomposition needs a square operator")
        mu = k.in_measure
        mat = k.matrix
    else:
        mat = k.w if isinstance(k, KernelMatrix) else np.asarray(k, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("kernel must be square")
        mu = np.ones(mat.shape[0])
    s = np.sqrt(mu)
    sym = s[:, None] * mat / s[None, :]
    asym = np.abs(sym - sym.T).max()
    if asym > SYMMETRY_TOL * max(1.0, np.abs(sym).max()):
        raise ValueError(f"operator is not self-adjoint (asymmetry {asym:.3g})")
    vals, vecs = np.linalg.eigh(0.5 * (sym + sym.T))
    order = np.argsort(vals, kind="stable")[::-1]
    vecs = _fix_signs(vecs[:, order] / s[:, None])
    return SpectralDecomposition(vals[order], vecs, mu)


def mercer_features(spec: SpectralDecomposition, d: int) -> FeatureMap:
    """Top-d Mercer features G_j = sqrt(lambda_j) phi_j."""
    if not 1 <= d <= spec.n:
        raise ValueError(f"d must lie in [1, {spec.n}], got {d}")
    lam = spec.eigenvalues[:d]
    if lam.min() < -1e-9:
        raise ValueError("Mercer features need non-negative eigenvalues")
    return FeatureMap(np.sqrt(np.clip(lam, 0.0, None))[:, None] * spec.eigenvectors[:, :d].T)


def top_eigenspace(spec: SpectralDecomposition, d: int, gap_min: float = EIGENGAP_MIN):
    """Top-d eigenvectors as a FeatureMap, or None when the rank-d gap is too small."""
    if d < spec.n and spec.eigenvalues[d - 1] - spec.eigenvalues[d] <= gap_min:
        return None
    return FeatureMap(spec.eigenvectors[:, :d].T)


def _row_basis(w: np.ndarray, measure, rtol: float) -> np.ndarray:
    if measure is not None:
        w = w * np.sqrt(np.asarray(measure, dtype=float))[None, :]
    _, s, vt = np.linalg.svd(w, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise ValueError("zero-rank feature map")
    return vt[s > rtol * s[0]]


def principal_angles(f, g, measure=None, rtol: float = 1e-10) -> np.ndarray:
    """Principal angles (radians, ascending) between the row spans of f and g."""
    qf = _row_basis(_as_weights(f), measure, rtol)
    qg = _row_basis(_as_weights(g), measure, rtol)
    cos = np.linalg.svd(qf @ qg.T, compute_uv=False)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def subspace_alignment(f, g, measure=None, rtol: float = 1e-10) -> float:
    """Fraction of the span of ``g`` captured by the span of ``f``.

    Computed as ``||P_f P_g||_F^2 / dim V(g)``, i.e. the mean squared cosine
    of the principal angles, with the directions of ``g`` that have no
    partner in ``f`` counting as zero.  Equal dimensions make it symmetric
    and equal to 1 exactly when the spans coincide.  Singular directions
    below ``rtol`` times the largest are treated as absent.
    """
    wf, wg = _as_weights(f), _as_weights(g)
    if wf.shape[1] != wg.shape[1]:
        raise ValueError("feature maps have different input dimensions")
    qf = _row_basis(wf, measure, rtol)
    qg = _row_basis(wg, measure, rtol)
    overlap = float(np.sum((qf @ qg.T) ** 2))
    return min(1.0, overlap / qg.shape[0])


def eigenspace_distance(spec_a: SpectralDecomposition, spec_b: SpectralDecomposition, idx) -> float:
    """Spectral-norm distance between the projectors onto the same index cluster."""
    return float(np.linalg.norm(spec_a.projector(idx) - spec_b.projector(idx), 2))
