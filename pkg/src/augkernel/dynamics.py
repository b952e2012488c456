"""Gradient-flow dynamics of the BarlowTwins loss for linear features.

With whitened one-hot view inputs, a feature map is a weight matrix
``W`` [d x n_views] and the cross-covariance of two augmented views is
``C = W T W^T`` where ``T`` is the centered, degree-normalized augmentation
kernel.  The flow ``dW/dt = -eta dL/dW`` is integrated with forward Euler.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graph import (AugmentationGraph, adjacency, keyed_rng, normalize, pair_joint,
                    view_counts)
from .kernel import subspace_alignment

STABILITY_BOUND = 0.1
DIVERGENCE_LIMIT = 1e6
SMALL_INIT = 1e-2
ZERO_MODE = 1e-9
STATIONARY_RTOL = 1e-12
# h_p settles at 0 from above; rounding can leave it a few ulps negative
H_ROUNDOFF = 1e-12
ROW_ROUNDOFF = 1e3 * np.finfo(float).eps


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        self.step = int(step)
        super().__init__(f"integration diverged at step {self.step}")


class PreconditionError(ValueError):
    """A sign- or power-law check was asked to run outside its assumptions."""


def augmentation_covariance(graph: AugmentationGraph) -> np.ndarray:
    """Population cross-covariance of two views of the same image.

    Views enter as one-hot vectors scaled by 1/sqrt(p(x)); after centering
    this is the normalized adjacency minus its constant mode.
    """
    k = normalize(adjacency(graph))
    s = np.sqrt(k.marginal)
    t = k.w - np.outer(s, s)
    return 0.5 * (t + t.T)


def draw_views(cdf: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of m views for every row of ``cdf``."""
    u = rng.random((cdf.shape[0], m))
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    return np.minimum(idx, cdf.shape[1] - 1)


class CovarianceSampler:
    """Unbiased estimates of :func:`augmentation_covariance` from m views per image.

    Call with a step index; the draw for step ``t`` uses the stream
    ``(seed, t)`` so estimates do not depend on call order.
    """

    def __init__(self, graph: AugmentationGraph, m: int, seed):
        if m < 2:
            raise ValueError("m must be at least 2")
        self.graph = graph
        self.m = m
        self.seed = seed
        self.p = graph.marginal()
        self._s = np.sqrt(self.p)
        self._cdf = np.cumsum(graph.cond, axis=1)

    def __call__(self, step: int) -> np.ndarray:
        views = draw_views(self._cdf, self.m, keyed_rng(self.seed, step))
        counts = view_counts(views, self.graph.n_views)
        joint = pair_joint(counts, self.graph.image_prior, self.m)
        t = joint / np.outer(self._s, self._s) - np.outer(self._s, self._s)
        return 0.5 * (t + t.T)


def bt_loss(w: np.ndarray, t_matrix: np.ndarray, beta: float) -> float:
    """sum_p (C_pp - 1)^2 + beta sum_{p != q} C_pq^2 with C = W T W^T."""
    c = w @ t_matrix @ w.T
    diag = np.diag(c)
    return float(np.sum((diag - 1.0) ** 2) + beta * (np.sum(c ** 2) - np.sum(diag ** 2)))


def bt_gradient(w: np.ndarray, t_matrix: np.ndarray, beta: float) -> np.ndarray:
    """(1 - beta)(C_pp - 1)[W T]_pq + beta [(C - I) W T]_pq.

    The true gradient of :func:`bt_loss` is four times this; the flow is
    ``dW/dt = -4 eta * bt_gradient``.
    """
    w = np.asarray(w, dtype=float)
    t_matrix = np.asarray(t_matrix, dtype=float)
    if t_matrix.ndim != 2 or t_matrix.shape[0] != t_matrix.shape[1] or w.shape[1] != t_matrix.shape[0]:
        raise ValueError(f"shape mismatch: W {w.shape}, T {t_matrix.shape}")
    wt = w @ t_matrix
    c = wt @ w.T
    diag = np.diag(c) - 1.0
    return (1.0 - beta) * diag[:, None] * wt + beta * (c - np.eye(c.shape[0])) @ wt


def orthonormalize_rows(w: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(w.T)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs[None, :]).T


def eigh_desc(t_matrix: np.ndarray):
    lam, v = np.linalg.eigh(t_matrix)
    return lam[::-1], v[:, ::-1]


@dataclass(frozen=True, eq=False)
class Trajectory:
    steps: np.ndarray
    times: np.ndarray
    weights: np.ndarray
    modes: np.ndarray
    loss_values: np.ndarray
    diag_c: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    eta: float
    beta: float
    mode: str

    @property
    def final_weights(self) -> np.ndarray:
        return self.weights[-1]


def integrate(w0, t_matrix, eta: float, beta: float, steps: int, record_every: int = 1, *,
              mode: str = "penalty", sampler: Callable[[int], np.ndarray] | None = None,
              stop: Callable[[int, np.ndarray], bool] | None = None) -> Trajectory:
    """Forward-Euler integration of the BarlowTwins gradient flow.

    ``mode="projection"`` orthonormalizes the rows of W after every step
    (strong orthogonalization).  With a ``sampler`` the gradient at step t
    uses ``sampler(t)`` instead of ``t_matrix``; losses, modes and
    eigenvectors always refer to ``t_matrix``.  ``stop(step, W)`` may end
    the run early; the stopping state is recorded.
    """
    w = np.array(w0, dtype=float)
    t_matrix = np.asarray(t_matrix, dtype=float)
    if eta <= 0:
        raise ValueError("eta must be positive")
    if record_every < 1:
        raise ValueError("record_every must be at least 1")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if mode not in ("penalty", "projection"):
        raise ValueError("mode must be 'penalty' or 'projection'")
    if np.abs(t_matrix - t_matrix.T).max() > 1e-10 * max(1.0, np.abs(t_matrix).max()):
        raise ValueError("t_matrix must be symmetric")
    if w.ndim != 2 or w.shape[1] != t_matrix.shape[0]:
        raise ValueError(f"shape mismatch: W {w.shape}, T {t_matrix.shape}")
    lam, v = eigh_desc(t_matrix)
    if eta * np.abs(lam).max() >= STABILITY_BOUND:
        warnings.warn(f"eta * ||T|| = {eta * np.abs(lam).max():.3g} reaches the stability "
                      f"bound {STABILITY_BOUND}", RuntimeWarning, stacklevel=2)
    if mode == "projection":
        w = orthonormalize_rows(w)

    rec_steps, rec_w = [], []

    def record(step):
        rec_steps.append(step)
        rec_w.append(w.copy())

    record(0)
    for step in range(1, steps + 1):
        t_step = t_matrix if sampler is None else sampler(step)
        w = w - 4.0 * eta * bt_gradient(w, t_step, beta)
        if mode == "projection":
            w = orthonormalize_rows(w)
        if not np.all(np.isfinite(w)) or np.abs(w).max() > DIVERGENCE_LIMIT:
            raise DivergenceError(step)
        done = stop is not None and stop(step, w)
        if step % record_every == 0 or step == steps or done:
            record(step)
        if done:
            break

    ws = np.array(rec_w)
    cs = np.einsum("kdn,nm,kem->kde", ws, t_matrix, ws)
    diag_c = np.diagonal(cs, axis1=1, axis2=2).copy()
    off = np.sum(cs ** 2, axis=(1, 2)) - np.sum(diag_c ** 2, axis=1)
    losses = np.sum((diag_c - 1.0) ** 2, axis=1) + beta * off
    steps_arr = np.array(rec_steps)
    return Trajectory(steps_arr, steps_arr * eta, ws, ws @ v, losses, diag_c, lam, v,
                      float(eta), float(beta), mode)


@dataclass
class SignLawReport:
    compliance: np.ndarray
    n_checked: np.ndarray

    @property
    def overall(self) -> float:
        total = self.n_checked.sum()
        if total == 0:
            return 1.0
        return float(np.sum(self.compliance * self.n_checked) / total)


def _h(traj: Trajectory, lam) -> np.ndarray:
    return 1.0 - np.einsum("kdi,i->kd", traj.modes ** 2, lam)


def check_sign_law(traj: Trajectory, lam=None) -> SignLawReport:
    """Fraction of recorded steps where sign(dz_pi / z_pi) = sign(lambda_i).

    Coordinates with |z| < 1e-9 and updates below floating-point resolution
    (|dz| <= 1e-12 |z| plus ~1e3 ulps of the row norm) are excluded.  A mode with lambda_i = 0 has no
    eligible steps and counts as vacuously compliant.
    """
    lam = traj.eigenvalues if lam is None else np.asarray(lam, dtype=float)
    if traj.beta != 0:
        raise PreconditionError(f"sign law assumes beta = 0, got {traj.beta}")
    if traj.mode != "penalty":
        raise PreconditionError("sign law is stated for the unprojected flow")
    z0 = np.abs(traj.modes[0]).max()
    if z0 > SMALL_INIT:
        raise PreconditionError(f"initialization not small: max |z(0)| = {z0:.3g} > {SMALL_INIT}")
    h = _h(traj, lam)
    if np.any(h < -H_ROUNDOFF):
        k, p = np.argwhere(h < -H_ROUNDOFF)[0]
        raise PreconditionError(f"h_p(t) <= 0 for row {p} at step {traj.steps[k]}")
    z = traj.modes[:-1]
    dz = np.diff(traj.modes, axis=0)
    # changes at the rounding level of the whole row carry no sign information
    floor = ROW_ROUNDOFF * np.linalg.norm(z, axis=2, keepdims=True)
    eligible = (np.abs(z) >= ZERO_MODE) & (np.abs(dz) > STATIONARY_RTOL * np.abs(z) + floor)
    eligible &= (lam != 0)[None, None, :]
    agree = np.sign(dz / np.where(z == 0, 1.0, z)) == np.sign(lam)[None, None, :]
    n_checked = eligible.sum(axis=0)
    hits = (agree & eligible).sum(axis=0)
    compliance = np.where(n_checked > 0, hits / np.maximum(n_checked, 1), 1.0)
    return SignLawReport(compliance, n_checked)


@dataclass
class PowerLawFit:
    row: int
    i: int
    j: int
    expected: float
    slope: float
    n_points: int
    status: str

    @property
    def rel_error(self) -> float:
        return abs(self.slope - self.expected) / abs(self.expected)


def check_power_law(traj: Trajectory, lam=None, pairs=None, window=(2.0, 100.0),
                    rtol: float = 0.05) -> list[PowerLawFit]:
    """Regress log(z_pi(t)/z_pi(0)) on log(z_pj(t)/z_pj(0)) for positive modes.

    Only recorded steps where both growth ratios lie in ``window`` are
    used.  ``status`` is "pass", "fail" or "insufficient-growth".
    """
    lam = traj.eigenvalues if lam is None else np.asarray(lam, dtype=float)
    if traj.beta != 0:
        raise PreconditionError(f"power law assumes beta = 0, got {traj.beta}")
    if np.abs(traj.modes[0]).max() > SMALL_INIT:
        raise PreconditionError("initialization not small")
    positive = np.flatnonzero(lam > ZERO_MODE * np.abs(lam).max())
    if pairs is None:
        pairs = [(i, j) for i in positive for j in positive if i < j]
    lo, hi = window
    out = []
    for p in range(traj.modes.shape[1]):
        z0 = traj.modes[0, p]
        for i, j in pairs:
            if lam[i] <= 0 or lam[j] <= 0:
                raise PreconditionError(f"modes {i}, {j} must both have positive eigenvalues")
            expected = lam[i] / lam[j]
            if i == j:
                out.append(PowerLawFit(p, i, j, 1.0, 1.0, len(traj.steps), "pass"))
                continue
            ri = traj.modes[:, p, i] / z0[i]
            rj = traj.modes[:, p, j] / z0[j]
            mask = (ri >= lo) & (ri <= hi) & (rj >= lo) & (rj <= hi)
            if mask.sum() < 3:
                out.append(PowerLawFit(p, i, j, expected, float("nan"), int(mask.sum()),
                                       "insufficient-growth"))
                continue
            x, y = np.log(rj[mask]), np.log(ri[mask])
            slope = float(np.polyfit(x, y, 1)[0])
            status = "pass" if abs(slope - expected) <= rtol * abs(expected) else "fail"
            out.append(PowerLawFit(p, i, j, expected, slope, int(mask.sum()), status))
    return out


def effective_rank(z) -> float:
    """exp of the Shannon entropy of the normalized squared singular values."""
    s = np.linalg.svd(np.atleast_2d(np.asarray(z, dtype=float)), compute_uv=False)
    energy = s ** 2
    if energy.sum() == 0:
        raise ValueError("effective rank of a zero matrix is undefined")
    q = energy / energy.sum()
    q = q[q > 0]
    return float(np.exp(-np.sum(q * np.log(q))))


@dataclass
class CollapseResult:
    trajectory: Trajectory
    effective_rank: float
    alignment: float
    n_positive: int


def positive_modes(lam: np.ndarray, rtol: float = 1e-9) -> int:
    return int(np.sum(lam > rtol * max(np.abs(lam).max(), 1e-300)))


def collapse_diagnostics(w: np.ndarray, lam: np.ndarray, v: np.ndarray,
                         align_rtol: float = 0.1) -> tuple[float, float, int]:
    """Effective rank over the positive modes and alignment with the top eigenspace.

    The target is the top ``min(d, #positive)`` eigenvectors.  Directions of
    W with singular value below ``align_rtol`` times the largest are not
    counted as learned features.
    """
    r = positive_modes(lam)
    d = w.shape[0]
    z = w @ v[:, :r]
    target = v[:, :min(d, r)].T
    return effective_rank(z), subspace_alignment(w, target, rtol=align_rtol), r


def small_init(d: int, n: int, scale: float, seed) -> np.ndarray:
    return scale * keyed_rng(seed, 0).standard_normal((d, n))


def collapse_experiment(graph: AugmentationGraph | np.ndarray, d: int, beta: float,
                        init_scale: float = 1e-3, seed=0, steps: int = 5000, *,
                        eta: float = 0.01, mode: str = "penalty", record_every: int = 50,
                        align_rtol: float = 0.1, t_matrix=None) -> CollapseResult:
    """Run the flow from a small random init and measure redundancy.

    ``graph`` may be an :class:`AugmentationGraph` or a symmetric matrix
    used directly as T.
    """
    if t_matrix is None:
        t_matrix = (augmentation_covariance(graph) if isinstance(graph, AugmentationGraph)
                    else np.asarray(graph, dtype=float))
    w0 = small_init(d, t_matrix.shape[0], init_scale, seed)
    traj = integrate(w0, t_matrix, eta, beta, steps, record_every, mode=mode)
    er, al, r = collapse_diagnostics(traj.final_weights, traj.eigenvalues, traj.eigenvectors,
                                     align_rtol)
    return CollapseResult(traj, er, al, r)
