"""Optional PNG figures rendered next to the CSV output (``--figures``)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the files reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _plt().close(fig)
    return path


def plot_spectrum(eigenvalues, path) -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(len(eigenvalues)), eigenvalues, "o-")
    ax.set_xlabel("index")
    ax.set_ylabel("eigenvalue")
    return _save(fig, path)


def plot_trajectory(traj, path) -> Path:
    plt = _plt()
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(9, 3.5))
    a0.semilogy(traj.times, np.maximum(traj.loss_values, 1e-300))
    a0.set_xlabel("time")
    a0.set_ylabel("loss")
    strength = np.sum(traj.modes ** 2, axis=1)
    for j in range(strength.shape[1]):
        a1.plot(traj.times, strength[:, j], label=f"mode {j}")
    a1.set_xlabel("time")
    a1.set_ylabel("squared projection")
    if strength.shape[1] <= 10:
        a1.legend(fontsize=7)
    return _save(fig, path)


def _by(rows, key, value, status="ok"):
    groups = {}
    for r in rows:
        if r.get("status") == status and value in r:
            groups.setdefault(r[key], []).append(r[value])
    ks = sorted(groups)
    return np.array(ks, dtype=float), [np.asarray(groups[k], dtype=float) for k in ks]


def plot_experiment(result, out_dir) -> list[Path]:
    """One figure per experiment; returns the written paths."""
    plt = _plt()
    out_dir = Path(out_dir)
    name, rows = result.name, result.rows
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    if name == "ansatz":
        m, vals = _by(rows, "m", "abs_mu_minus_nu_sd")
        ax.loglog(m, [v.mean() for v in vals], "o-", label="sd |mu - nu|")
        m, vals = _by(rows, "m", "delta_sd")
        ax.loglog(m, [v.mean() for v in vals], "s-", label="sd delta")
        ax.set_xlabel("views per image m")
        ax.legend()
    elif name == "estimator":
        m, vals = _by(rows, "m", "frobenius_error_mean")
        ax.loglog(m, [v.mean() for v in vals], "o-")
        ax.set_xlabel("views per image m")
        ax.set_ylabel("Frobenius error")
    elif name == "pdim_beta":
        for d in sorted({r["d"] for r in rows}):
            sel = [r for r in rows if r["d"] == d and r.get("status") == "ok"]
            ax.semilogx([r["beta"] for r in sel], [r["alignment"] for r in sel], "o-",
                        label=f"d = {d}")
        ax.set_xlabel("beta")
        ax.set_ylabel("alignment")
        ax.legend()
    elif name == "convergence":
        m, vals = _by(rows, "m", "steps_to_threshold")
        ax.boxplot(vals)
        ax.set_xticks(range(1, len(m) + 1), [("exact" if k == 0 else f"m = {int(k)}") for k in m])
        ax.set_ylabel("steps to threshold")
    elif name == "pareto":
        groups = {}
        for r in rows:
            if "accuracy" in r:
                groups.setdefault((r["dataset_fraction"], r["m"]), []).append(r["accuracy"])
        keys = sorted(groups)
        ax.bar(range(len(keys)), [np.mean(groups[k]) for k in keys])
        ax.set_xticks(range(len(keys)), [f"{f:g} x {m}" for f, m in keys])
        ax.set_xlabel("dataset fraction x views")
        ax.set_ylabel("probe accuracy")
    ax.set_title(name)
    return [_save(fig, out_dir / f"{name}.png")]
