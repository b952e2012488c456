"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run under pytest (``pytest tests/test_acceptance.py -v``) or directly
(``python tests/test_acceptance.py``).  Tolerances are pinned as module
constants next to each check.
"""

import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from conftest import random_graph  # noqa: E402

from augkernel.cli import main as cli_main  # noqa: E402
from augkernel.dynamics import (bt_gradient, bt_loss, check_power_law, check_sign_law,  # noqa: E402
                                collapse_experiment, integrate, small_init)
from augkernel.experiments import make_graph, run_experiment  # noqa: E402
from augkernel.graph import adjacency, build_toy_graph, normalize, toy_eigenvalues  # noqa: E402
from augkernel.kernel import (backward_kernel, forward_operator, invariance_form,  # noqa: E402
                              modulus, spectral_decompose, subspace_alignment)
from augkernel.losses import (fit_invariance_features, multi_aug_loss, pairwise_loss,  # noqa: E402
                              spectral_contrastive_decomposition)


def _rotated(rng, eigenvalues):
    n = len(eigenvalues)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.asarray(eigenvalues, float)) @ q.T


def _line(n, title, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} [{n:2d}] {title}: {detail}"


# 1 -------------------------------------------------------------------------------------

TOY_TOL, TOY_SECONDS = 1e-9, 1.0


def check_toy_spectrum():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        params = rng.dirichlet(np.ones(4))
        w_bar = normalize(adjacency(build_toy_graph(*params))).w
        numeric = np.sort(np.linalg.eigvalsh(w_bar))
        closed = np.sort(toy_eigenvalues(*params) ** 2)
        worst = max(worst, np.abs(numeric - closed).max())
    secs = time.perf_counter() - t0
    ok = worst <= TOY_TOL and secs < TOY_SECONDS
    return ok, f"max |err| {worst:.2e} (tol {TOY_TOL:g}), {secs:.2f}s (< {TOY_SECONDS:g}s)"


# 2 -------------------------------------------------------------------------------------

FACTOR_TOL, FACTOR_SECONDS = 1e-10, 10.0


def check_factorization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(50):
        n_img = int(rng.integers(2, 201))
        n_views = 200 if k == 0 else int(rng.integers(2, 201))
        g = random_graph(rng, n_img, n_views, sparsity=0.5 if k % 2 else 0.0)
        t = forward_operator(g)
        kb = backward_kernel(g).matrix
        worst = max(worst, np.linalg.norm(kb - (t.adjoint() @ t).matrix) / np.linalg.norm(kb))
    secs = time.perf_counter() - t0
    ok = worst < FACTOR_TOL and secs < FACTOR_SECONDS
    return ok, f"max rel err {worst:.2e} (< {FACTOR_TOL:g}), {secs:.2f}s (< {FACTOR_SECONDS:g}s)"


# 3 -------------------------------------------------------------------------------------

EIGEN_TOL = 1e-8


def check_eigenfunction_equivalence():
    rng = np.random.default_rng(3)
    worst_proj = worst_val = 0.0
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(2, 12)), int(rng.integers(2, 14)))
        t = forward_operator(g)
        var = spectral_decompose(t.adjoint() @ t)
        inv = spectral_decompose(invariance_form(modulus(t)))
        n = var.n
        for idx in var.clusters():
            # lambda -> (sqrt(lambda) - 1)^2 reverses the order on [0, 1]
            mirror = np.sort(n - 1 - idx)
            lam = np.clip(var.eigenvalues[idx], 0.0, None)
            mapped = (np.sqrt(lam) - 1.0) ** 2
            worst_val = max(worst_val, np.abs(inv.eigenvalues[mirror] - mapped[::-1]).max())
            diff = np.linalg.norm(var.projector(idx) - inv.projector(mirror), 2)
            worst_proj = max(worst_proj, diff)
    ok = worst_proj <= EIGEN_TOL and worst_val <= EIGEN_TOL
    return ok, (f"max projector gap {worst_proj:.2e}, max eigenvalue-map err {worst_val:.2e} "
                f"(tol {EIGEN_TOL:g})")


# 4 -------------------------------------------------------------------------------------

PAIRWISE_TOL, DECOMP_TOL = 1e-12, 1e-10


def check_loss_identities():
    rng = np.random.default_rng(4)
    worst_pair = worst_dec = 0.0
    for m in (2, 3, 4, 8):
        for _ in range(10):
            views = [rng.standard_normal((4, 9)) for _ in range(m)]
            multi = multi_aug_loss(views, 0.0)
            pair = pairwise_loss(views, 0.0)
            worst_pair = max(worst_pair, abs(pair - 2 * m * multi) / max(1.0, abs(pair)))
    for _ in range(20):
        w_bar = normalize(adjacency(random_graph(rng)))
        dec = spectral_contrastive_decomposition(rng.standard_normal((w_bar.n, 3)), w_bar)
        parts = dec.covariance + dec.variance + dec.alignment + dec.kappa
        worst_dec = max(worst_dec, abs(parts - dec.total) / max(1.0, abs(dec.total)))
    ok = worst_pair <= PAIRWISE_TOL and worst_dec <= DECOMP_TOL
    return ok, (f"pairwise vs 2m*multi rel err {worst_pair:.2e} (tol {PAIRWISE_TOL:g}); "
                f"decomposition rel err {worst_dec:.2e} (tol {DECOMP_TOL:g})")


# 5 -------------------------------------------------------------------------------------

FD_TOL, FD_STEP = 1e-5, 1e-6


def _fd_gradient(w, t, beta):
    g = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        e = np.zeros_like(w)
        e[idx] = FD_STEP
        g[idx] = (bt_loss(w + e, t, beta) - bt_loss(w - e, t, beta)) / (2 * FD_STEP)
    return g


def check_gradient():
    rng = np.random.default_rng(5)
    betas = [0.0, 0.005, 1.0] + list(rng.uniform(0, 2, 17))
    worst = 0.0
    for beta in betas:
        n, d = int(rng.integers(3, 8)), int(rng.integers(1, 4))
        t = _rotated(rng, rng.standard_normal(n))
        w = 0.5 * rng.standard_normal((d, n))
        num = _fd_gradient(w, t, beta)
        worst = max(worst, np.linalg.norm(4 * bt_gradient(w, t, beta) - num) / np.linalg.norm(num))
    return worst < FD_TOL, f"max rel err {worst:.2e} over 20 triples (< {FD_TOL:g})"


# 6 -------------------------------------------------------------------------------------

SIGN_SECONDS = 30.0
MIXED_SPECTRUM = [1.0, 0.5, 1 / 3, 0.2, -0.3, -0.6]


def check_sign_law_seeds():
    t0 = time.perf_counter()
    worst, checked = 1.0, 0
    for seed in range(20):
        t = _rotated(np.random.default_rng(600 + seed), MIXED_SPECTRUM)
        traj = integrate(small_init(2, 6, 1e-3, seed), t, 0.01, 0.0, 1500, 1)
        report = check_sign_law(traj)
        worst = min(worst, report.overall)
        checked += int(report.n_checked.sum())
    secs = time.perf_counter() - t0
    ok = worst == 1.0 and secs < SIGN_SECONDS
    return ok, (f"min compliance {worst:.4f} over 20 seeds ({checked} checked updates; need 1.0), "
                f"{secs:.1f}s (< {SIGN_SECONDS:g}s)")


# 7 -------------------------------------------------------------------------------------

POWER_RTOL = 0.05
POWER_SPECTRUM = [1.0, 1 / 2, 1 / 3, 1 / 5, -0.4]


def check_power_law_seeds():
    worst, statuses = 0.0, set()
    for seed in range(20):
        t = _rotated(np.random.default_rng(700 + seed), POWER_SPECTRUM)
        traj = integrate(small_init(1, 5, 1e-4, seed), t, 0.002, 0.0, 5000, 1)
        fits = check_power_law(traj, pairs=[(0, 1), (0, 2), (0, 3)], rtol=POWER_RTOL)
        statuses |= {f.status for f in fits}
        worst = max(worst, max(f.rel_error for f in fits))
    ok = worst <= POWER_RTOL and statuses == {"pass"}
    return ok, f"ratios 2, 3, 5: max rel slope err {worst:.4f} (tol {POWER_RTOL:g}), 20 seeds"


# 8 -------------------------------------------------------------------------------------

RECOVERY_TOL, GAP_MIN = 1e-6, 1e-3


def check_recovery():
    worst, monotone, used = 1.0, True, 0
    rng = np.random.default_rng(8)
    while used < 10:
        g = random_graph(rng, int(rng.integers(4, 9)), int(rng.integers(5, 12)))
        t = forward_operator(g)
        var = spectral_decompose(t.adjoint() @ t)
        gaps = var.eigenvalues[:-1] - var.eigenvalues[1:]
        d = next((k for k in (3, 2) if gaps[k - 1] > GAP_MIN), None)
        if d is None:
            continue
        used += 1
        target = var.eigenvectors[:, :d].T
        al = [subspace_alignment(fit_invariance_features(modulus(t), k, steps=200_000), target,
                                 measure=t.in_measure) for k in range(1, d + 1)]
        worst = min(worst, al[-1])
        monotone &= bool(np.all(np.diff(al) >= -1e-12))
    ok = worst >= 1 - RECOVERY_TOL and monotone
    return ok, (f"min alignment at full d {worst:.10f} (>= 1 - {RECOVERY_TOL:g}), "
                f"non-decreasing in feature count: {monotone}, 10 graphs")


# 9 -------------------------------------------------------------------------------------

COLLAPSE_MAX, RESTORED_MIN, PDIM_SECONDS = 2.0, 3.5, 300.0
COSINE = {"kind": "cosine", "eigenvalues": [0.5, 0.15, 0.12, 0.096]}


def check_collapse_and_pdim():
    t0 = time.perf_counter()
    g = make_graph(COSINE)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        collapsed = collapse_experiment(g, 4, 0.0, 1e-3, 0, 2000, eta=0.1).effective_rank
        restored = collapse_experiment(g, 4, 1.0, 1e-3, 0, 2000, eta=0.1,
                                       mode="projection").effective_rank
        sweep = run_experiment("pdim_beta").summary
    secs = time.perf_counter() - t0
    ok = (collapsed <= COLLAPSE_MAX and restored >= RESTORED_MIN
          and sweep.get("non_increasing") is True
          and sweep.get("log10_product_range", np.inf) <= 1.0 and secs < PDIM_SECONDS)
    return ok, (f"effective rank beta=0 {collapsed:.3f} (<= {COLLAPSE_MAX}), projection "
                f"{restored:.3f} (>= {RESTORED_MIN}); beta* {sweep['beta_star']}, non-increasing "
                f"{sweep.get('non_increasing')}, log10(beta*.d) range "
                f"{sweep.get('log10_product_range', float('nan')):.2f} (<= 1); "
                f"{secs:.0f}s (< {PDIM_SECONDS:g}s)")


# 10 ------------------------------------------------------------------------------------

SLOPE_TARGET, SLOPE_TOL = -0.5, 0.15


def check_estimator_rate():
    slope = run_experiment("estimator").summary["slope"]
    shrinking = run_experiment("ansatz").summary["spread_strictly_shrinking"]
    ok = abs(slope - SLOPE_TARGET) <= SLOPE_TOL and shrinking
    return ok, (f"slope {slope:.3f} ({SLOPE_TARGET} +/- {SLOPE_TOL}) over m = 2..64, 100 seeds; "
                f"ansatz spread strictly shrinking: {shrinking}")


# 11 ------------------------------------------------------------------------------------

SIGN_TEST_ALPHA = 0.05


def check_convergence():
    summary = run_experiment("convergence").summary
    mean = summary["mean_steps"]
    test = summary["m4_vs_m2"]
    ok = mean[4] < mean[2] and test["p_value"] < SIGN_TEST_ALPHA
    return ok, (f"mean steps m=4 {mean[4]:.1f} vs m=2 {mean[2]:.1f}; wins/losses/ties "
                f"{test['wins']}/{test['losses']}/{test['ties']}, p = {test['p_value']:.2e} "
                f"(< {SIGN_TEST_ALPHA})")


# 12 ------------------------------------------------------------------------------------

GAP_PP = 2.0


def check_pareto():
    summary = run_experiment("pareto").summary
    gap = summary["half_data_gap_pp"]
    return abs(gap) <= GAP_PP, (f"accuracy (1.0, m=2) minus (0.5, m=4) = {gap:.2f} pp "
                                f"(|gap| <= {GAP_PP:g}); means {summary['mean_accuracy']}")


# 13 ------------------------------------------------------------------------------------

DETERMINISM_CONFIGS = {
    "ansatz": ["n_seeds=10"],
    "estimator": ["n_seeds=5", "m_values=[2,8,32]"],
    "pdim_beta": ["n_seeds=1", "d_values=[2,4]", "beta_values=[0.001,0.1,1.0]", "steps=200"],
    "convergence": ["n_seeds=3", "budget=300"],
    "pareto": ["n_seeds=2", "budget=300"],
}


def check_cli_determinism(tmp_dir: Path):
    import contextlib
    import io

    mismatched = []
    for name, sets in DETERMINISM_CONFIGS.items():
        args = ["experiment", name, "--seed", "7"]
        for s in sets:
            args += ["--set", s]
        blobs = []
        for run, workers in (("a", "1"), ("b", "1"), ("c", "2")):
            out = tmp_dir / f"{name}-{run}"
            with contextlib.redirect_stdout(io.StringIO()), warnings.catch_warnings():
                warnings.simplefilter("ignore")
                code = cli_main([*args, "--workers", workers, "--out", str(out)])
            blobs.append((out / f"{name}.csv").read_bytes() if code == 0 else None)
        if blobs[0] is None or len(set(blobs)) != 1:
            mismatched.append(name)
    ok = not mismatched
    return ok, (f"byte-identical CSVs on rerun and with 2 workers for "
                f"{len(DETERMINISM_CONFIGS)} experiments; mismatched: {mismatched or 'none'}")


# -- drivers -----------------------------------------------------------------------------

CHECKS = [
    (1, "toy spectrum closed form", check_toy_spectrum),
    (2, "operator factorization", check_factorization),
    (3, "eigenfunction equivalence", check_eigenfunction_equivalence),
    (4, "loss identities", check_loss_identities),
    (5, "gradient vs finite differences", check_gradient),
    (6, "sign law", check_sign_law_seeds),
    (7, "power law", check_power_law_seeds),
    (8, "invariance minimizer recovery", check_recovery),
    (9, "collapse and projector dimension", check_collapse_and_pdim),
    (10, "estimator rate and ansatz trend", check_estimator_rate),
    (11, "convergence with more views", check_convergence),
    (12, "half data at twice the views", check_pareto),
    (13, "CLI determinism", check_cli_determinism),
]


@pytest.mark.parametrize("n, title, check", CHECKS, ids=[f"criterion_{n:02d}" for n, *_ in CHECKS])
def test_criterion(n, title, check, capsys, tmp_path):
    ok, detail = check(tmp_path) if n == 13 else check()
    with capsys.disabled():
        print("\n" + _line(n, title, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    failures = 0
    for n, title, check in CHECKS:
        if n == 13:
            with tempfile.TemporaryDirectory() as tmp:
                ok, detail = check(Path(tmp))
        else:
            ok, detail = check()
        failures += not ok
        print(_line(n, title, ok, detail), flush=True)
    sys.exit(1 if failures else 0)
