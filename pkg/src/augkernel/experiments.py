"""Scripted studies on synthetic augmentation graphs.

Each experiment expands a config into independent grid cells, runs them
through a work queue (optionally in a process pool) and merges rows in grid
order.  A cell that raises is kept as an explicit failure row.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import (CovarianceSampler, DivergenceError, augmentation_covariance,
                       collapse_experiment, eigh_desc, integrate, orthonormalize_rows,
                       small_init)
from .graph import (adjacency, build_block_graph, build_chain_graph, build_cosine_graph,
                    build_toy_graph, empirical_adjacency, keyed_rng, load_graph, normalize,
                    toy_entries)
from .kernel import subspace_alignment
from .probe import linear_probe

BETA_GRID = [float(b) for b in np.logspace(-4, 1, 11)]

DEFAULTS = {
    "ansatz": {
        "params": [0.4, 0.3, 0.2, 0.1],
        "m_values": [2, 4, 8, 16, 32, 64],
        "n_seeds": 100,
    },
    "estimator": {
        "graph": {"kind": "toy", "params": [0.4, 0.3, 0.2, 0.1]},
        "m_values": [2, 4, 8, 16, 32, 64],
        "n_seeds": 100,
        "d": 2,
    },
    "pdim_beta": {
        "graph": {"kind": "cosine", "eigenvalues": [0.5, 0.15, 0.12, 0.096]},
        "d_values": [2, 4, 8, 16],
        "beta_values": BETA_GRID,
        "n_seeds": 8,
        "steps": 1000,
        "eta": 0.2,
        "init_scale": 1e-3,
        "mode": "penalty",
        "align_rtol": 0.1,
        "tie_tol": 0.1,
        "train_frac": 0.5,
    },
    "convergence": {
        "graph": {"kind": "block", "n_classes": 3, "groups_per_class": 2, "views_per_image": 1,
                  "within_image": 0.5, "within_class": 0.25, "within_group": 0.15,
                  "background": 0.1},
        "m_values": [0, 2, 4],
        "n_seeds": 20,
        "d": 2,
        "beta": 1.0,
        "eta": 0.05,
        "budget": 3000,
        "threshold": 0.9,
        "init_scale": 1.0,
        "mode": "projection",
    },
    "pareto": {
        "graph": {"kind": "block", "n_classes": 3, "groups_per_class": 4, "views_per_image": 1,
                  "within_image": 0.5, "within_class": 0.25, "within_group": 0.15,
                  "background": 0.1},
        "cells": [[1.0, 2], [0.5, 4], [0.25, 8], [1.0, 4], [1.0, 8]],
        "n_seeds": 20,
        "d": 2,
        "beta": 1.0,
        "eta": 0.01,
        "budget": 8000,
        "init_scale": 1.0,
        "match": "steps",
        "train_frac": 0.5,
    },
}


def make_graph(spec: dict):
    kind = spec.get("kind")
    if kind == "toy":
        return build_toy_graph(*spec["params"])
    if kind == "block":
        keys = ("n_classes", "groups_per_class", "views_per_image", "within_image",
                "within_class", "within_group", "background", "seed", "jitter")
        return build_block_graph(**{k: spec[k] for k in keys if k in spec})
    if kind == "cosine":
        return build_cosine_graph(spec["eigenvalues"], spec.get("n_classes", 2))
    if kind == "chain":
        return build_chain_graph(spec["n_images"], spec.get("n_classes", 2), spec["decay"])
    if kind == "file":
        return load_graph(spec["path"])
    raise ValueError(f"unknown graph kind {kind!r}")


@dataclass
class SweepResult:
    name: str
    axes: dict
    columns: list
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def column(self, name, status="ok"):
        return np.array([r.get(name, np.nan) for r in self.rows
                         if status is None or r.get("status") == status], dtype=float)


@dataclass(frozen=True)
class Experiment:
    name: str
    axes: tuple
    metrics: tuple
    cells: Callable[[dict, int], list]
    run: Callable[[dict], dict]
    summarize: Callable[[dict, list], dict]

    @property
    def columns(self) -> list:
        return [*self.axes, *self.metrics, "status", "error"]


# -- work queue ----------------------------------------------------------------

def _guarded(job):
    fn, cell = job
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            row = fn(cell)
        row.setdefault("status", "ok")
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        row = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    return {**cell["key"], **row}


def iter_cells(fn, cells, workers: int = 1):
    """Yield one row per cell, always in grid order."""
    jobs = [(fn, c) for c in cells]
    if workers <= 1:
        for job in jobs:
            yield _guarded(job)
        return
    ex = ProcessPoolExecutor(max_workers=workers)
    try:
        yield from ex.map(_guarded, jobs)
    finally:
        ex.shutdown(wait=True, cancel_futures=True)


def merged_config(name: str, overrides: dict | None = None) -> dict:
    if name not in EXPERIMENTS:
        raise KeyError(name)
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS[name].items()}
    for k, v in (overrides or {}).items():
        if k not in cfg:
            raise ValueError(f"unknown parameter {k!r} for experiment {name!r}; "
                             f"valid: {sorted(cfg)}")
        cfg[k] = v
    return cfg


def run_experiment(name: str, config: dict | None = None, seed: int = 0, workers: int = 1,
                   on_row: Callable[[dict], None] | None = None) -> SweepResult:
    exp = EXPERIMENTS[name]
    cfg = merged_config(name, config)
    cells = exp.cells(cfg, seed)
    result = SweepResult(name, {a: sorted({c["key"][a] for c in cells}) for a in exp.axes},
                         exp.columns)
    for row in iter_cells(exp.run, cells, workers):
        result.rows.append(row)
        if on_row is not None:
            on_row(row)
    result.summary = exp.summarize(cfg, result.rows)
    return result


def sign_test(wins: int, losses: int) -> float:
    """One-sided binomial p-value for ``wins`` out of ``wins + losses`` (ties dropped)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _ok(rows):
    return [r for r in rows if r.get("status") == "ok"]


# -- ansatz ------------------------------------------------------------------------

def _ansatz_cells(cfg, seed):
    return [{"key": {"m": int(m)}, "params": cfg["params"], "n_seeds": cfg["n_seeds"],
             "seed": seed, "m_index": i} for i, m in enumerate(cfg["m_values"])]


def _ansatz_run(cell):
    g = build_toy_graph(*cell["params"])
    s = np.sqrt(g.marginal())
    m = cell["key"]["m"]
    gaps, deltas = [], []
    for k in range(cell["n_seeds"]):
        # entries of the degree-normalized estimate, read from the known block positions
        w_hat = empirical_adjacency(g, m, (cell["seed"], cell["m_index"], k)).w * np.outer(s, s)
        _, mu, nu, delta = toy_entries(w_hat)
        gaps.append(abs(mu - nu))
        deltas.append(delta)
    return {"abs_mu_minus_nu_mean": float(np.mean(gaps)),
            "abs_mu_minus_nu_sd": float(np.std(gaps, ddof=1)) if len(gaps) > 1 else 0.0,
            "delta_mean": float(np.mean(deltas)),
            "delta_sd": float(np.std(deltas, ddof=1)) if len(deltas) > 1 else 0.0}


def _ansatz_summary(cfg, rows):
    g = build_toy_graph(*cfg["params"])
    _, mu, nu, delta = toy_entries(normalize(adjacency(g)).w)
    ok = _ok(rows)
    sd = [r["abs_mu_minus_nu_sd"] for r in ok]
    return {"population_abs_mu_minus_nu": abs(mu - nu), "population_delta": delta,
            "spread_strictly_shrinking": bool(len(sd) > 1 and np.all(np.diff(sd) < 0))}


def ansatz_experiment(rho, mu, nu, delta, m_values, n_seeds, seed=0, workers=1) -> SweepResult:
    """Monte-Carlo estimates of the toy-graph entries as the number of views grows."""
    return run_experiment("ansatz", {"params": [rho, mu, nu, delta], "m_values": list(m_values),
                                     "n_seeds": n_seeds}, seed, workers)


# -- estimator quality ---------------------------------------------------------------

def _normalized_top(w_bar, d):
    _, v = eigh_desc(0.5 * (w_bar + w_bar.T))
    return v[:, :d].T


def _estimator_cells(cfg, seed):
    return [{"key": {"m": int(m)}, "graph": cfg["graph"], "n_seeds": cfg["n_seeds"],
             "d": cfg["d"], "seed": seed, "m_index": i} for i, m in enumerate(cfg["m_values"])]


def _estimator_run(cell):
    g = make_graph(cell["graph"])
    k = adjacency(g)
    s = np.sqrt(k.marginal)
    target = _normalized_top(k.w * np.outer(s, s), cell["d"])
    m = cell["key"]["m"]
    errors, aligns = [], []
    for j in range(cell["n_seeds"]):
        k_hat = empirical_adjacency(g, m, (cell["seed"], cell["m_index"], j))
        errors.append(np.linalg.norm(k_hat.w - k.w))
        aligns.append(subspace_alignment(_normalized_top(k_hat.w * np.outer(s, s), cell["d"]),
                                         target))
    sd = (lambda a: float(np.std(a, ddof=1)) if len(a) > 1 else 0.0)
    return {"frobenius_error_mean": float(np.mean(errors)), "frobenius_error_sd": sd(errors),
            "alignment_mean": float(np.mean(aligns)), "alignment_sd": sd(aligns)}


def _estimator_summary(cfg, rows):
    ok = _ok(rows)
    if len(ok) < 2:
        return {"slope": None}
    m = [r["m"] for r in ok]
    al = [r["alignment_mean"] for r in ok]
    return {"slope": loglog_slope(m, [r["frobenius_error_mean"] for r in ok]),
            "alignment_non_decreasing": bool(np.all(np.diff(al) >= -1e-12))}


def estimator_study(graph_spec: dict, m_values, n_seeds, d=2, seed=0, workers=1) -> SweepResult:
    """Frobenius error and top-d eigenspace alignment of the empirical kernel versus m."""
    return run_experiment("estimator", {"graph": graph_spec, "m_values": list(m_values),
                                        "n_seeds": n_seeds, "d": d}, seed, workers)


# -- projector dimension vs orthogonalization strength ----------------------------------

def _pdim_cells(cfg, seed):
    cells = []
    for d in cfg["d_values"]:
        for b in cfg["beta_values"]:
            cells.append({"key": {"d": int(d), "beta": float(b)}, "cfg": cfg, "seed": seed})
    return cells


def learned_functions(w, p):
    """Embedding of view x for whitened one-hot inputs: W e_x / sqrt(p(x))."""
    return np.asarray(w) / np.sqrt(p)[None, :]


def _pdim_run(cell):
    cfg, (d, beta) = cell["cfg"], (cell["key"]["d"], cell["key"]["beta"])
    g = make_graph(cfg["graph"])
    t = augmentation_covariance(g)
    p = g.marginal()
    rows = []
    for s in range(cfg["n_seeds"]):
        res = collapse_experiment(g, d, beta, cfg["init_scale"], (cell["seed"], s), cfg["steps"],
                                  eta=cfg["eta"], mode=cfg["mode"], record_every=cfg["steps"],
                                  align_rtol=cfg["align_rtol"], t_matrix=t)
        probe = linear_probe(learned_functions(res.trajectory.final_weights, p), g.labels,
                             cfg["train_frac"], (cell["seed"], s))
        rows.append((res.alignment, res.effective_rank, probe.accuracy,
                     res.trajectory.loss_values[-1]))
    a = np.mean(rows, axis=0)
    return {"alignment": a[0], "effective_rank": a[1], "accuracy": a[2], "loss_final": a[3]}


def select_beta(betas, scores, tie_tol):
    """Smallest beta whose score is within ``tie_tol`` of the best."""
    scores = np.asarray(scores, dtype=float)
    if not np.any(np.isfinite(scores)):
        return None
    best = np.nanmax(scores)
    order = np.argsort(betas)
    for i in order:
        if np.isfinite(scores[i]) and scores[i] >= best - tie_tol:
            return float(betas[i])


def _pdim_summary(cfg, rows):
    beta_star = {}
    for d in cfg["d_values"]:
        sel = [r for r in rows if r["d"] == d]
        betas = [r["beta"] for r in sel]
        scores = [r["alignment"] if r.get("status") == "ok" else np.nan for r in sel]
        beta_star[int(d)] = select_beta(betas, scores, cfg["tie_tol"])
    ds = sorted(beta_star)
    vals = [beta_star[d] for d in ds]
    out = {"beta_star": beta_star}
    if all(v is not None for v in vals) and len(vals) > 1:
        prod = np.log10(np.array(vals) * np.array(ds))
        out["non_increasing"] = bool(np.all(np.diff(vals) <= 0))
        out["log10_product_range"] = float(prod.max() - prod.min())
    return out


def pdim_beta_sweep(graph_spec: dict, d_values, beta_values, seed=0, workers=1,
                    **dynamics) -> SweepResult:
    """Final alignment, effective rank and probe accuracy over a (d, beta) grid."""
    cfg = {"graph": graph_spec, "d_values": list(d_values), "beta_values": list(beta_values),
           **dynamics}
    return run_experiment("pdim_beta", cfg, seed, workers)


# -- convergence with m augmentations -------------------------------------------------------

def steps_to_alignment(graph, t_matrix, d, m, cfg, init_seed, sampler_seed) -> tuple[int, bool, float]:
    """First step at which the top-d alignment reaches the threshold.

    ``m = 0`` uses the population covariance.  Runs that never reach the
    threshold are censored at ``budget + 1``.
    """
    _, v = eigh_desc(t_matrix)
    target = v[:, :d].T
    w0 = small_init(d, t_matrix.shape[0], cfg["init_scale"], init_seed)
    if cfg["mode"] == "projection":
        w0 = orthonormalize_rows(w0)
    threshold = cfg["threshold"]
    if subspace_alignment(w0, target) >= threshold:
        return 0, False, subspace_alignment(w0, target)
    hit = []

    def stop(step, w):
        if subspace_alignment(w, target) >= threshold:
            hit.append(step)
            return True
        return False

    sampler = None if m == 0 else CovarianceSampler(graph, m, sampler_seed)
    traj = integrate(w0, t_matrix, cfg["eta"], cfg["beta"], cfg["budget"], cfg["budget"],
                     mode=cfg["mode"], sampler=sampler, stop=stop)
    final = subspace_alignment(traj.final_weights, target)
    if hit:
        return hit[0], False, final
    return cfg["budget"] + 1, True, final


def _convergence_cells(cfg, seed):
    if not 0.0 <= cfg["threshold"] < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    return [{"key": {"m": int(m), "seed": s}, "cfg": cfg, "master": seed}
            for m in cfg["m_values"] for s in range(cfg["n_seeds"])]


def _convergence_run(cell):
    cfg, m, s = cell["cfg"], cell["key"]["m"], cell["key"]["seed"]
    g = make_graph(cfg["graph"])
    t = augmentation_covariance(g)
    steps, censored, final = steps_to_alignment(g, t, cfg["d"], m, cfg, (cell["master"], s),
                                                (cell["master"], s, m))
    return {"steps_to_threshold": steps, "censored": censored, "final_alignment": final}


def _convergence_summary(cfg, rows):
    by_m = {}
    for r in rows:
        if r.get("status") == "ok":
            by_m.setdefault(r["m"], {})[r["seed"]] = r["steps_to_threshold"]
    out = {"mean_steps": {m: float(np.mean(list(v.values()))) for m, v in sorted(by_m.items())},
           "censored": {m: int(sum(1 for r in rows if r.get("m") == m and r.get("censored")))
                        for m in sorted(by_m)}}
    if 2 in by_m and 4 in by_m:
        common = sorted(set(by_m[2]) & set(by_m[4]))
        wins = sum(by_m[4][s] < by_m[2][s] for s in common)
        losses = sum(by_m[4][s] > by_m[2][s] for s in common)
        out["m4_vs_m2"] = {"wins": wins, "losses": losses, "ties": len(common) - wins - losses,
                           "p_value": sign_test(wins, losses)}
    return out


def convergence_study(graph_spec: dict, m_values, threshold=0.9, seed=0, workers=1,
                      **dynamics) -> SweepResult:
    """Steps until the learned subspace reaches the alignment threshold, per m."""
    cfg = {"graph": graph_spec, "m_values": list(m_values), "threshold": threshold, **dynamics}
    return run_experiment("convergence", cfg, seed, workers)


# -- sample efficiency ----------------------------------------------------------------

def stratified_subset(image_labels, fraction, seed):
    """Keep round(fraction * count) images of every class (at least one)."""
    image_labels = np.asarray(image_labels)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    rng = keyed_rng(seed, 7)
    keep = []
    for c in np.unique(image_labels):
        idx = np.flatnonzero(image_labels == c)
        k = max(1, int(round(fraction * idx.size)))
        keep.append(np.sort(rng.permutation(idx)[:k]))
    return np.sort(np.concatenate(keep))


def _pareto_cells(cfg, seed):
    if cfg["match"] not in ("steps", "epochs"):
        raise ValueError("match must be 'steps' or 'epochs'")
    return [{"key": {"dataset_fraction": float(f), "m": int(m), "seed": s}, "cfg": cfg,
             "master": seed, "cell_index": i}
            for i, (f, m) in enumerate(cfg["cells"]) for s in range(cfg["n_seeds"])]


def _pareto_run(cell):
    cfg, key = cell["cfg"], cell["key"]
    frac, m, s = key["dataset_fraction"], key["m"], key["seed"]
    full = make_graph(cfg["graph"])
    classes = full.image_labels()
    images = stratified_subset(classes, frac, (cell["master"], s))
    counts = np.bincount(classes[images], minlength=classes.max() + 1)
    status = "ok" if counts.min() >= 2 else "class-starved"
    sub = full.subset(images)
    t = augmentation_covariance(sub)
    steps = cfg["budget"]
    if cfg["match"] == "epochs":
        # equal passes over the subsampled data at the reference per-step batch (full set, 2 views)
        steps = max(1, int(round(cfg["budget"] * images.size * m / (full.n_images * 2))))
    w0 = small_init(cfg["d"], full.n_views, cfg["init_scale"], (cell["master"], s))
    sampler = CovarianceSampler(sub, m, (cell["master"], s, m, cell["cell_index"]))
    traj = integrate(w0, t, cfg["eta"], cfg["beta"], steps, steps, mode="projection",
                     sampler=sampler)
    w = traj.final_weights
    _, v_full = eigh_desc(augmentation_covariance(full))
    probe = linear_probe(learned_functions(w, sub.marginal()), full.labels, cfg["train_frac"],
                         (cell["master"], s))
    return {"accuracy": probe.accuracy,
            "alignment": subspace_alignment(w, v_full[:, :cfg["d"]].T),
            "n_images": int(images.size), "steps": steps, "status": status}


def _pareto_summary(cfg, rows):
    groups = {}
    for r in rows:
        if "accuracy" in r:
            groups.setdefault((r["dataset_fraction"], r["m"]), []).append(r["accuracy"])
    mean = {f"{f:g}x{m}": float(np.mean(v)) for (f, m), v in sorted(groups.items())}
    out = {"mean_accuracy": mean}
    ref = groups.get((1.0, 2))
    half = groups.get((0.5, 4))
    if ref and half:
        out["half_data_gap_pp"] = 100.0 * (float(np.mean(ref)) - float(np.mean(half)))
    return out


def pareto_sweep(graph_spec: dict, cells, budget, seed=0, workers=1, **dynamics) -> SweepResult:
    """Probe accuracy for (dataset fraction, m) pairs at a matched budget."""
    cfg = {"graph": graph_spec, "cells": [list(c) for c in cells], "budget": budget, **dynamics}
    return run_experiment("pareto", cfg, seed, workers)


EXPERIMENTS = {
    "ansatz": Experiment("ansatz", ("m",), ("abs_mu_minus_nu_mean", "abs_mu_minus_nu_sd",
                                             "delta_mean", "delta_sd"),
                         _ansatz_cells, _ansatz_run, _ansatz_summary),
    "estimator": Experiment("estimator", ("m",), ("frobenius_error_mean", "frobenius_error_sd",
                                                   "alignment_mean", "alignment_sd"),
                            _estimator_cells, _estimator_run, _estimator_summary),
    "pdim_beta": Experiment("pdim_beta", ("d", "beta"), ("alignment", "effective_rank",
                                                         "accuracy", "loss_final"),
                            _pdim_cells, _pdim_run, _pdim_summary),
    "convergence": Experiment("convergence", ("m", "seed"), ("steps_to_threshold", "censored",
                                                             "final_alignment"),
                              _convergence_cells, _convergence_run, _convergence_summary),
    "pareto": Experiment("pareto", ("dataset_fraction", "m", "seed"),
                         ("accuracy", "alignment", "n_images", "steps"),
                         _pareto_cells, _pareto_run, _pareto_summary),
}
