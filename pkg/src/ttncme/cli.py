"""Experiment harness: ``ttncme run|compare|footprint|validate``.

A run is described by a JSON config::

    {"model": "lambda_phage", "solver": "psttn",
     "partition": "((0 1)((2 3)(4)))", "ranks": [5, 5],
     "dt": 1e-3, "t_end": 10, "output_times": [5, 10]}

Missing truncation bounds and initial conditions fall back to the
defaults of the builtin models. Outputs land in ``--out`` (or ``out``):
``observables.csv``, ``marginals_<k>.csv`` per output time, ``summary.json``
and, on request, TTN snapshots or dense distributions.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .dense import (CMEOperator, KrylovError, KrylovSettings, delta_distribution,
                    integrate_dense, multinomial_distribution, schloegl_ode)
from .grid import TruncatedStateSpace
from .model import ModelError, ReactionNetwork, load_model, validate_factorization
from .psttn import NumericalError, PSTTNIntegrator, SolverConfig
from .ssa import run_ensemble, sample_multinomial
from .ttn import (EVAL_GUARD, PartitionError, delta_state, eval_full, from_dense,
                  full_footprint, memory_footprint, parse_partition, read_snapshot,
                  write_snapshot)

SOLVERS = ("psttn", "dense", "ssa", "ode")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

DEFAULT_BOUNDS = {
    "lambda_phage": ((0, 0, 0, 0, 0), (15, 40, 10, 10, 10)),
    "schloegl": ((0,), (799,)),
}
DEFAULT_INITIAL = {"lambda_phage": {"kind": "multinomial", "n": 3, "p": [0.05] * 5}}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str
    solver: str
    lower: tuple[int, ...]
    upper: tuple[int, ...]
    dt: float = 1e-3
    t_end: float = 1.0
    scheme: str = "explicit"
    substeps: int = 1
    krylov: KrylovSettings = KrylovSettings()
    output_times: tuple[float, ...] = ()
    partition: str | None = None
    ranks: tuple[int, ...] = ()
    initial: dict = field(default_factory=lambda: {"kind": "delta"})
    runs: int = 1000
    seed: int = 0
    x0: float = 0.0
    snapshots: bool = False
    out: str = "out"

    @property
    def space(self) -> TruncatedStateSpace:
        return TruncatedStateSpace(self.lower, self.upper)


def _get(doc: dict, key: str, kind: type | tuple, default: Any = None, required: bool = False) -> Any:
    if key not in doc:
        if required:
            raise ConfigError(f"{key}: required field missing")
        return default
    v = doc[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind) or isinstance(v, bool) and kind is not bool:
        raise ConfigError(f"{key}: expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
    return v


def _model_key(ref: str) -> str:
    return ref.split(":")[0]


def config_from_dict(doc: Any, network: ReactionNetwork | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected an object")
    model = _get(doc, "model", str, required=True)
    solver = _get(doc, "solver", str, required=True)
    if solver not in SOLVERS:
        raise ConfigError(f"solver: must be one of {SOLVERS}")
    if network is None:
        try:
            network = load_model(model)
        except (OSError, ModelError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc
    bounds = _get(doc, "bounds", dict)
    if bounds is None:
        lo, hi = DEFAULT_BOUNDS.get(_model_key(model), ((0,) * network.d, (63,) * network.d))
    else:
        lo = tuple(_get(bounds, "lower", list, [0] * network.d))
        hi = tuple(_get(bounds, "upper", list, required=True))
    if len(lo) != network.d or len(hi) != network.d:
        raise ConfigError(f"bounds: need {network.d} lower and upper entries")
    try:
        TruncatedStateSpace(lo, hi)
    except ValueError as exc:
        raise ConfigError(f"bounds: {exc}") from exc
    partition = _get(doc, "partition", str)
    if (partition is not None) != (solver == "psttn"):
        raise ConfigError("partition: required iff solver is psttn")
    kr = _get(doc, "krylov", dict, {})
    try:
        krylov = KrylovSettings(float(kr.get("rtol", 1e-10)), int(kr.get("restart", 20)),
                                int(kr.get("maxiter", 500)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"krylov: {exc}") from exc
    cfg = RunConfig(
        model=model, solver=solver, lower=tuple(int(v) for v in lo), upper=tuple(int(v) for v in hi),
        dt=_get(doc, "dt", float, 1e-3), t_end=_get(doc, "t_end", float, 1.0),
        scheme=_get(doc, "scheme", str, "explicit"), substeps=_get(doc, "substeps", int, 1),
        krylov=krylov,
        output_times=tuple(float(t) for t in _get(doc, "output_times", list, [])),
        partition=partition, ranks=tuple(_get(doc, "ranks", list, [])),
        initial=_get(doc, "initial", dict, DEFAULT_INITIAL.get(_model_key(model), {"kind": "delta"})),
        runs=_get(doc, "runs", int, 1000), seed=_get(doc, "seed", int, 0),
        x0=_get(doc, "x0", float, 0.0), snapshots=_get(doc, "snapshots", bool, False),
        out=_get(doc, "out", str, "out"))
    if not cfg.output_times:
        cfg.output_times = (cfg.t_end,)
    if solver in ("psttn", "dense"):
        try:
            SolverConfig(cfg.dt, cfg.t_end, cfg.scheme if solver == "psttn" else "explicit",
                         cfg.substeps, cfg.krylov, cfg.output_times)
        except ValueError as exc:
            raise ConfigError(f"solver settings: {exc}") from exc
        if solver == "dense" and cfg.scheme not in ("explicit", "implicit"):
            raise ConfigError("scheme: dense solver supports explicit or implicit")
    if cfg.initial.get("kind") not in ("delta", "multinomial"):
        raise ConfigError("initial.kind: must be 'delta' or 'multinomial'")
    if partition is not None:
        try:
            tree = parse_partition(partition, cfg.ranks, network.d)
            validate_factorization(network, tree)
        except (PartitionError, ModelError) as exc:
            raise ConfigError(f"partition: {exc}") from exc
    if cfg.runs < 1:
        raise ConfigError("runs: must be at least 1")
    return cfg


def load_config(path: str) -> tuple[RunConfig, ReactionNetwork]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"config: {exc}") from exc
    model = doc.get("model") if isinstance(doc, dict) else None
    try:
        network = load_model(model) if isinstance(model, str) else None
    except (OSError, ModelError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return config_from_dict(doc, network), network


# ---------------------------------------------------------------------------
# initial conditions and output

def initial_dense(cfg: RunConfig) -> np.ndarray:
    sp = cfg.space
    init = cfg.initial
    if init["kind"] == "multinomial":
        return multinomial_distribution(sp, int(init["n"]), init["p"])
    return delta_distribution(sp, init.get("state"))


def initial_ttn(cfg: RunConfig, tree):
    if cfg.initial["kind"] == "delta":
        return delta_state(tree, cfg.space, cfg.initial.get("state"))
    return from_dense(initial_dense(cfg), tree, cfg.space)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_observables(path: str, names: Sequence[str], times, mass, mean, std) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "mass"] + [f"mean_{n}" for n in names] + [f"std_{n}" for n in names])
        for k, t in enumerate(times):
            w.writerow([_fmt(t), _fmt(mass[k])] + [_fmt(v) for v in mean[k]] + [_fmt(v) for v in std[k]])


def write_marginals(path: str, names: Sequence[str], lower: Sequence[int], marginals) -> None:
    """Per-species marginal columns indexed by population ``x``; cells beyond
    a species' range are left empty."""
    start = min(lower)
    stop = max(lo + len(m) for lo, m in zip(lower, marginals))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x"] + list(names))
        for x in range(start, stop):
            row = [str(x)]
            for lo, m in zip(lower, marginals):
                row.append(_fmt(m[x - lo]) if lo <= x < lo + len(m) else "")
            w.writerow(row)


def read_marginals(path: str) -> tuple[list[str], list[np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    cols: list[list[float]] = [[] for _ in names]
    for row in rows[1:]:
        for j, cell in enumerate(row[1:]):
            if cell != "":
                cols[j].append(float(cell))
    return names, [np.array(c) for c in cols]


# ---------------------------------------------------------------------------
# run

def run(cfg: RunConfig, network: ReactionNetwork | None = None) -> dict:
    network = network or load_model(cfg.model)
    os.makedirs(cfg.out, exist_ok=True)
    names = [s.name for s in network.species]
    sp = cfg.space
    times = np.array(cfg.output_times)
    summary: dict[str, Any] = {"solver": cfg.solver, "model": cfg.model,
                               "output_times": [float(t) for t in times]}
    full_entries, full_bytes = full_footprint(sp)
    summary["full_footprint"] = {"entries": full_entries, "bytes": full_bytes,
                                 "MB": full_bytes / 1e6}
    t0 = time.perf_counter()
    marginals: list[list[np.ndarray]] = []
    lower = list(sp.lower)
    if cfg.solver == "psttn":
        tree = parse_partition(cfg.partition, cfg.ranks, network.d)
        entries, nbytes = memory_footprint(tree, sp)
        summary["memory_footprint"] = {"entries": entries, "bytes": nbytes, "kB": nbytes / 1e3,
                                       "MB": nbytes / 1e6}
        solver = SolverConfig(cfg.dt, cfg.t_end, cfg.scheme, cfg.substeps, cfg.krylov, tuple(times))
        integ = PSTTNIntegrator(initial_ttn(cfg, tree), network, solver)
        res = integ.run(keep_states=cfg.snapshots)
        mass, mean, std, marginals = res.mass, res.mean, res.std, res.marginals
        summary["max_mass_error"] = res.max_mass_error
        if cfg.snapshots:
            for k, st in enumerate(res.states):
                write_snapshot(st, os.path.join(cfg.out, f"snapshot_{k:04d}.ttn"))
    elif cfg.solver == "dense":
        op = CMEOperator(network, sp)
        _, ps = integrate_dense(op, initial_dense(cfg), cfg.t_end, cfg.dt, cfg.scheme,
                                times, cfg.krylov)
        mass = np.array([p.sum() for p in ps])
        mean, std = np.zeros((len(ps), network.d)), np.zeros((len(ps), network.d))
        for k, p in enumerate(ps):
            marg = [p.sum(axis=tuple(j for j in range(network.d) if j != s)) for s in range(network.d)]
            marginals.append(marg)
            for s, m in enumerate(marg):
                x = np.arange(sp.lower[s], sp.upper[s] + 1)
                mean[k, s] = x @ m
                std[k, s] = math.sqrt(max(x ** 2 @ m - mean[k, s] ** 2, 0.0))
            if cfg.snapshots:
                np.save(os.path.join(cfg.out, f"dense_{k:04d}.npy"), p)
        summary["max_mass_error"] = float(np.max(np.abs(mass - 1.0)))
    elif cfg.solver == "ssa":
        if cfg.initial["kind"] == "multinomial":
            x0 = sample_multinomial(int(cfg.initial["n"]), cfg.initial["p"], cfg.runs, cfg.seed)
        else:
            x0 = cfg.initial.get("state") or list(sp.lower)
        ens = run_ensemble(network, x0, times, cfg.runs, cfg.seed, sp.lower, sp.upper)
        mass = np.ones(len(times))
        mean, std = ens.mean, ens.std_error
        marginals = [ens.marginals(k) for k in range(len(times))]
        summary.update(runs=cfg.runs, seed=cfg.seed, clipped=ens.clipped.tolist(),
                       std_columns="standard error of the mean")
    else:
        if network.d != 1:
            raise ConfigError("solver: ode is only available for the one-species Schloegl model")
        ts, xs = schloegl_ode(cfg.x0, cfg.t_end, cfg.dt)
        idx = [int(round(t / cfg.dt)) for t in times]
        mass = np.ones(len(times))
        mean = xs[idx][:, None]
        std = np.zeros_like(mean)
        marginals = []
    summary["wall_time_s"] = time.perf_counter() - t0
    write_observables(os.path.join(cfg.out, "observables.csv"), names, times, mass, mean, std)
    for k, marg in enumerate(marginals):
        write_marginals(os.path.join(cfg.out, f"marginals_{k:04d}.csv"), names, lower, marg)
    with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# compare

def _read_times(run_dir: str) -> list[float]:
    with open(os.path.join(run_dir, "observables.csv"), newline="") as fh:
        return [float(r["time"]) for r in csv.DictReader(fh)]


def _full_distribution(run_dir: str, k: int) -> np.ndarray | None:
    p = os.path.join(run_dir, f"dense_{k:04d}.npy")
    if os.path.exists(p):
        return np.load(p)
    p = os.path.join(run_dir, f"snapshot_{k:04d}.ttn")
    if os.path.exists(p):
        st = read_snapshot(p)
        if st.space.size <= EVAL_GUARD:
            return eval_full(st)
    return None


def compare(run_a: str, run_b: str, out: str | None = None) -> dict:
    ta, tb = _read_times(run_a), _read_times(run_b)
    if len(ta) != len(tb) or not np.allclose(ta, tb):
        raise ConfigError("compare: runs do not share output times")
    rows = []
    for k, t in enumerate(ta):
        fa, fb = _full_distribution(run_a, k), _full_distribution(run_b, k)
        if fa is not None and fb is not None:
            if fa.shape != fb.shape:
                raise ConfigError("compare: mismatched grids")
            rows.append((t, float(np.linalg.norm(fa - fb)), "full"))
            continue
        na, ma = read_marginals(os.path.join(run_a, f"marginals_{k:04d}.csv"))
        nb, mb = read_marginals(os.path.join(run_b, f"marginals_{k:04d}.csv"))
        if na != nb or any(x.shape != y.shape for x, y in zip(ma, mb)):
            raise ConfigError("compare: mismatched grids")
        rows.append((t, float(np.linalg.norm(np.concatenate(ma) - np.concatenate(mb))), "marginals"))
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "errors.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "error", "basis"])
            for t, e, basis in rows:
                w.writerow([_fmt(t), _fmt(e), basis])
    errs = [e for _, e, _ in rows]
    return {"max_error": max(errs), "final_error": errs[-1], "basis": rows[-1][2],
            "errors": errs, "times": ta}


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttncme", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one solver configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    c = sub.add_parser("compare", help="2-norm errors between two run directories")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out")
    f = sub.add_parser("footprint", help="TTN and full storage of a configuration")
    f.add_argument("--config")
    f.add_argument("--model")
    f.add_argument("--partition")
    f.add_argument("--ranks", help="comma-separated preorder ranks")
    v = sub.add_parser("validate", help="check a model and partition for factorization")
    v.add_argument("--config")
    v.add_argument("--model")
    v.add_argument("--partition")
    for q in (f, v):
        q.add_argument("--out", help=argparse.SUPPRESS)
        q.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    return p


def _adhoc_config(args) -> tuple[RunConfig, ReactionNetwork]:
    if args.config:
        return load_config(args.config)
    if not args.model:
        raise ConfigError("model: pass --config or --model")
    doc: dict[str, Any] = {"model": args.model, "solver": "psttn" if args.partition else "dense"}
    if args.partition:
        doc["partition"] = args.partition
        ranks = getattr(args, "ranks", None)
        if ranks:
            doc["ranks"] = [int(v) for v in ranks.split(",")]
        else:
            # rank 1 everywhere: enough for factorization checks
            doc["ranks"] = [1] * (len(re.findall(r"\(\s*\d", args.partition)) - 1)
    try:
        network = load_model(args.model)
    except (OSError, ModelError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return config_from_dict(doc, network), network


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg, network = load_config(args.config)
            if args.out:
                cfg.out = args.out
            if args.seed is not None:
                cfg.seed = args.seed
            summary = run(cfg, network)
            print(json.dumps({k: summary[k] for k in sorted(summary) if k != "output_times"}))
        elif args.command == "compare":
            res = compare(args.run_a, args.run_b, args.out)
            print(f"max_error={res['max_error']!r} final_error={res['final_error']!r} basis={res['basis']}")
        elif args.command == "footprint":
            cfg, network = _adhoc_config(args)
            full = full_footprint(cfg.space)
            print(f"full: entries={full[0]} bytes={full[1]} MB={full[1] / 1e6:.6g}")
            if cfg.partition:
                e, b = memory_footprint(parse_partition(cfg.partition, cfg.ranks, network.d), cfg.space)
                print(f"ttn: entries={e} bytes={b} kB={b / 1e3:.6g} MB={b / 1e6:.6g}")
        elif args.command == "validate":
            cfg, network = _adhoc_config(args)
            if cfg.partition:
                tree = parse_partition(cfg.partition, cfg.ranks, network.d)
                asg = validate_factorization(network, tree)
                for mu, per_leaf in enumerate(asg.leaf_factors):
                    used = [p or "root" for p, fs in per_leaf.items() if fs]
                    print(f"reaction {mu}: factors on leaves {used}")
            print("ok")
    except (ConfigError, ModelError, PartitionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, KrylovError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
