"""Command-line front end.

Subcommands write plot-ready CSV tables plus a ``manifest.json`` into
``--out``.  Exit codes: 0 success, 2 usage or config error, 3 numeric
failure, 130 interrupted.

Settings are resolved in the order defaults < ``--config`` file <
``AUGKERNEL_*`` environment variables < command-line flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (DivergenceError, PreconditionError, CovarianceSampler,
                       augmentation_covariance, check_power_law, check_sign_law,
                       collapse_diagnostics, effective_rank, integrate, small_init)
from .experiments import DEFAULTS, EXPERIMENTS, make_graph, merged_config, run_experiment
from .graph import adjacency, load_graph, normalize, save_graph
from .kernel import _fix_signs, backward_kernel, forward_operator, spectral_decompose
from .output import Writer

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INTERRUPTED = 0, 2, 3, 130
ENV_PREFIX = "AUGKERNEL_"
KERNELS = ("augmentation", "backward", "adjacency", "normalized")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0
    workers: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        unknown = set(data) - {"command", "params", "inputs", "out", "seed", "workers"}
        if unknown:
            raise UsageError(f"unknown run-config fields: {sorted(unknown)}")
        return cls(**data)


# -- config resolution -------------------------------------------------------------

def _read_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return data


def _env_int(name):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{ENV_PREFIX}{name} must be an integer, got {raw!r}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key] = _parse_value(value)
    return out


def resolve(args) -> RunConfig:
    """Merge config file, environment and flags into a RunConfig."""
    cfg_path = args.config or os.environ.get(ENV_PREFIX + "CONFIG")
    file_cfg = _read_config(cfg_path) if cfg_path else {}
    if "command" in file_cfg:
        base = RunConfig.from_json(json.dumps(file_cfg))
    else:
        base = RunConfig(args.command, params=file_cfg)
    base.command = args.command
    base.params = {**base.params, **_parse_sets(getattr(args, "set", None))}
    env_seed, env_workers = _env_int("SEED"), _env_int("WORKERS")
    env_out = os.environ.get(ENV_PREFIX + "OUT")
    base.seed = args.seed if args.seed is not None else env_seed if env_seed is not None else base.seed
    base.workers = (args.workers if args.workers is not None
                    else env_workers if env_workers is not None else base.workers)
    base.out = args.out or env_out or base.out
    if base.workers < 1:
        raise UsageError("--workers must be at least 1")
    return base


# -- graph inputs ---------------------------------------------------------------

def _graph_from_args(args):
    if getattr(args, "graph", None):
        path = Path(args.graph)
        if not path.is_file():
            raise UsageError(f"graph file not found: {path}")
        return load_graph(path), {"graph": str(path)}
    if getattr(args, "toy", None):
        spec = {"kind": "toy", "params": list(args.toy)}
    elif getattr(args, "spec", None):
        spec = _parse_value(args.spec)
        if not isinstance(spec, dict):
            raise UsageError("--spec must be a JSON object such as {\"kind\": \"block\", ...}")
    else:
        raise UsageError("give a graph file (--graph), toy parameters (--toy) or --spec")
    return make_graph(spec), {"spec": spec}


# -- subcommands -------------------------------------------------------------------

def _augmentation_svd(graph):
    # singular values of the averaging operator in its weighted coordinates;
    # an SVD keeps tiny values accurate where sqrt of eigenvalues would not
    t = forward_operator(graph)
    a = np.sqrt(t.out_measure)[:, None] * t.matrix / np.sqrt(t.in_measure)[None, :]
    _, sv, vt = np.linalg.svd(a)
    vecs = _fix_signs(vt.T / np.sqrt(t.in_measure)[:, None])
    return sv, vecs


def _spectrum(graph, kernel: str):
    if kernel == "augmentation":
        return _augmentation_svd(graph)
    if kernel == "backward":
        spec = spectral_decompose(backward_kernel(graph))
    elif kernel == "adjacency":
        spec = spectral_decompose(adjacency(graph))
    else:
        spec = spectral_decompose(normalize(adjacency(graph)))
    return spec.eigenvalues, spec.eigenvectors


def _clean(v: float) -> float:
    return float(round(float(v), 12)) + 0.0


def cmd_spectrum(args, run: RunConfig) -> int:
    graph, inputs = _graph_from_args(args)
    run.inputs = inputs
    run.params = {**run.params, "kernel": args.kernel, "top": args.top}
    vals, vecs = _spectrum(graph, args.kernel)
    writer = Writer(run.out, "spectrum", asdict(run), run.seed)
    n = vals.size
    cols = ["index", "eigenvalue"] + [f"v{j}" for j in range(vecs.shape[0])]
    writer.write_rows("spectrum.csv", cols,
                      ({"index": i, "eigenvalue": vals[i],
                        **{f"v{j}": vecs[j, i] for j in range(vecs.shape[0])}} for i in range(n)))
    if args.figures:
        from .plotting import plot_spectrum
        writer.files.append(plot_spectrum(vals, writer.dir / "spectrum.png").name)
    writer.manifest("complete")
    top = n if args.top is None else min(args.top, n)
    print(" ".join(repr(_clean(v)) for v in vals[:top]))
    return EXIT_OK


def cmd_graph(args, run: RunConfig) -> int:
    graph, inputs = _graph_from_args(args)
    run.inputs = inputs
    writer = Writer(run.out, "graph", asdict(run), run.seed)
    save_graph(graph, writer.dir / "graph.json")
    writer.files.append("graph.json")
    writer.manifest("complete", n_images=graph.n_images, n_views=graph.n_views)
    print(writer.dir / "graph.json")
    return EXIT_OK


DYNAMICS_DEFAULTS = {"d": 4, "beta": 0.0, "eta": 0.01, "steps": 5000, "record_every": 10,
                     "init_scale": 1e-3, "mode": "penalty", "m": 0, "pairs": None,
                     "window": [2.0, 100.0]}


def _dynamics_params(run: RunConfig) -> dict:
    unknown = set(run.params) - set(DYNAMICS_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown dynamics parameters {sorted(unknown)}; "
                         f"valid: {sorted(DYNAMICS_DEFAULTS)}")
    p = {**DYNAMICS_DEFAULTS, **run.params}
    if int(p["record_every"]) < 1:
        raise UsageError("record_every must be at least 1")
    if int(p["steps"]) < 0 or float(p["eta"]) <= 0 or int(p["d"]) < 1:
        raise UsageError("need steps >= 0, eta > 0 and d >= 1")
    if p["mode"] not in ("penalty", "projection"):
        raise UsageError("mode must be 'penalty' or 'projection'")
    if int(p["m"]) != 0 and int(p["m"]) < 2:
        raise UsageError("m must be 0 (population covariance) or at least 2")
    return p


def _read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"matrix file not found: {path}")
    t = np.loadtxt(path, delimiter=",", ndmin=2)
    if t.shape[0] != t.shape[1]:
        raise UsageError(f"{path} must hold a square matrix, got shape {t.shape}")
    return t


def cmd_dynamics(args, run: RunConfig) -> int:
    for name in DYNAMICS_DEFAULTS:
        v = getattr(args, name, None)
        if v is not None:
            run.params[name] = v
    p = _dynamics_params(run)
    run.params = p
    if args.t_matrix:
        if p["m"]:
            raise UsageError("a sampled covariance (m > 0) needs a graph, not --t-matrix")
        t = _read_matrix(args.t_matrix)
        run.inputs = {"t_matrix": args.t_matrix}
        sampler = None
    else:
        graph, inputs = _graph_from_args(args)
        run.inputs = inputs
        t = augmentation_covariance(graph)
        sampler = CovarianceSampler(graph, int(p["m"]), (run.seed, 1)) if p["m"] else None
    d = int(p["d"])
    w0 = small_init(d, t.shape[0], float(p["init_scale"]), run.seed)
    writer = Writer(run.out, "dynamics", asdict(run), run.seed)
    try:
        traj = integrate(w0, t, float(p["eta"]), float(p["beta"]), int(p["steps"]),
                         int(p["record_every"]), mode=p["mode"], sampler=sampler)
    except DivergenceError as exc:
        writer.manifest("failed", error=str(exc), divergence_step=exc.step)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    n_modes = traj.modes.shape[2]
    cols = (["step", "time", "loss", "effective_rank"]
            + [f"z{i}_{j}" for i in range(d) for j in range(n_modes)])
    rows = []
    for k, step in enumerate(traj.steps):
        row = {"step": int(step), "time": traj.times[k], "loss": traj.loss_values[k],
               "effective_rank": effective_rank(traj.modes[k])}
        row.update({f"z{i}_{j}": traj.modes[k, i, j] for i in range(d) for j in range(n_modes)})
        rows.append(row)
    writer.write_rows("trajectory.csv", cols, rows)

    summary = {"eigenvalues": traj.eigenvalues}
    try:
        report = check_sign_law(traj)
        summary["sign_law"] = {"compliance": report.overall, "per_row": report.compliance}
    except PreconditionError as exc:
        summary["sign_law"] = {"compliance": None, "reason": str(exc)}
    pairs = [tuple(x) for x in p["pairs"]] if p["pairs"] else None
    try:
        fits = check_power_law(traj, pairs=pairs, window=tuple(p["window"]))
        summary["power_law"] = [{"row": f.row, "i": f.i, "j": f.j, "expected": f.expected,
                                 "slope": f.slope, "n_points": f.n_points, "status": f.status}
                                for f in fits]
    except PreconditionError as exc:
        summary["power_law"] = {"reason": str(exc)}
    er, al, r = collapse_diagnostics(traj.final_weights, traj.eigenvalues, traj.eigenvectors)
    summary.update({"final_effective_rank": er, "final_alignment": al, "n_positive": r,
                    "final_loss": traj.loss_values[-1]})
    writer.write_json("summary.json", summary)
    if args.figures:
        from .plotting import plot_trajectory
        writer.files.append(plot_trajectory(traj, writer.dir / "trajectory.png").name)
    writer.manifest("complete")
    sl = summary["sign_law"]["compliance"]
    print(f"final loss {traj.loss_values[-1]:.6g}, effective rank {er:.4g}"
          + ("" if sl is None else f", sign-law compliance {sl:.4g}"))
    return EXIT_OK


def cmd_experiment(args, run: RunConfig) -> int:
    name = args.name
    if name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENTS)}")
    try:
        cfg = merged_config(name, run.params)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run.params = cfg
    exp = EXPERIMENTS[name]
    writer = Writer(run.out, f"experiment {name}", asdict(run), run.seed)
    table = writer.table(f"{name}.csv", exp.columns)
    try:
        result = run_experiment(name, cfg, run.seed, run.workers, on_row=table.append)
    except KeyboardInterrupt:
        table.close()
        writer.manifest("incomplete", rows_written=table.n_rows)
        print(f"interrupted; {table.n_rows} rows kept in {table.path}", file=sys.stderr)
        return EXIT_INTERRUPTED
    writer.write_json("summary.json", result.summary)
    failed = sum(r.get("status") == "failed" for r in result.rows)
    if args.figures:
        from .plotting import plot_experiment
        writer.files.extend(p.name for p in plot_experiment(result, writer.dir))
    writer.manifest("complete", rows_written=table.n_rows, failed_cells=failed)
    print(json.dumps(_printable(result.summary), sort_keys=True))
    return EXIT_OK


def _printable(obj):
    from .output import _jsonable
    return _jsonable(obj)


# -- parser --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON file with parameters or a saved run config")
    p.add_argument("--seed", type=int, help="master seed (env AUGKERNEL_SEED)")
    p.add_argument("--workers", type=int, help="worker processes (env AUGKERNEL_WORKERS)")
    p.add_argument("--out", help="output directory (env AUGKERNEL_OUT, default ./out)")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")


def _graph_inputs(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--graph", help="graph JSON file")
    g.add_argument("--toy", type=float, nargs=4, metavar=("RHO", "MU", "NU", "DELTA"),
                   help="four-image toy graph")
    g.add_argument("--spec", help='inline graph spec, e.g. \'{"kind": "cosine", '
                                  '"eigenvalues": [0.5, 0.2]}\'')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augkernel", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"augkernel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", help="eigen-decompose a kernel of an augmentation graph")
    _common(p)
    _graph_inputs(p)
    p.add_argument("--kernel", choices=KERNELS, default="augmentation",
                   help="augmentation: singular values of the image-to-view averaging "
                        "operator; backward: their squares; adjacency / normalized: view kernels")
    p.add_argument("--top", type=int, help="print only the top-k eigenvalues")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("graph", help="build a graph and save it as JSON")
    _common(p)
    _graph_inputs(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("dynamics", help="integrate the BarlowTwins gradient flow")
    _common(p)
    _graph_inputs(p)
    p.add_argument("--d", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--record-every", dest="record_every", type=int)
    p.add_argument("--init-scale", dest="init_scale", type=float)
    p.add_argument("--mode", choices=("penalty", "projection"))
    p.add_argument("--m", type=int, help="views per image for a sampled covariance (0: exact)")
    p.add_argument("--t-matrix", dest="t_matrix",
                   help="comma-separated symmetric matrix used as T instead of a graph")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("experiment", help="run a named sweep",
                       description="Experiments: " + ", ".join(
                           f"{k} ({', '.join(sorted(DEFAULTS[k]))})" for k in EXPERIMENTS))
    _common(p)
    p.add_argument("name", help="one of: " + ", ".join(EXPERIMENTS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one parameter; VALUE is parsed as JSON")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = resolve(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args, run)
    except (UsageError, FileNotFoundError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
