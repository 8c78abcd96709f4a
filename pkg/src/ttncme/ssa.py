"""Gillespie direct-method SSA with numba kernels.

Run ``i`` of an ensemble is seeded with ``base_seed + i`` so ensembles are
reproducible and can be split across processes without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .model import FORMS, ReactionNetwork


@dataclass(frozen=True)
class _Encoded:
    nu: np.ndarray          # (M, d) int64
    const: np.ndarray       # (M,)
    r_start: np.ndarray     # (M,) first factor of each reaction
    r_count: np.ndarray
    f_form: np.ndarray      # per factor, index into FORMS
    f_pstart: np.ndarray
    f_pcount: np.ndarray
    f_sstart: np.ndarray
    f_scount: np.ndarray
    params: np.ndarray
    species: np.ndarray


def encode(network: ReactionNetwork) -> _Encoded:
    r_start, r_count = [], []
    form, pstart, pcount, sstart, scount = [], [], [], [], []
    params: list[float] = []
    species: list[int] = []
    for r in network.reactions:
        r_start.append(len(form))
        r_count.append(len(r.factors))
        for f in r.factors:
            form.append(FORMS.index(f.form))
            pstart.append(len(params))
            pcount.append(len(f.params))
            params.extend(f.params)
            sstart.append(len(species))
            scount.append(len(f.species))
            species.extend(f.species)
    i64 = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return _Encoded(
        network.stoichiometry.astype(np.int64).reshape(network.M, network.d),
        np.array([r.constant for r in network.reactions], dtype=float),
        i64(r_start), i64(r_count), i64(form), i64(pstart), i64(pcount),
        i64(sstart), i64(scount), np.asarray(params, dtype=float), i64(species))


@numba.njit(cache=True)
def _propensities(x, e_const, r_start, r_count, f_form, f_pstart, f_pcount,
                  f_sstart, f_scount, params, species, out):
    total = 0.0
    for mu in range(e_const.shape[0]):
        a = e_const[mu]
        for k in range(r_start[mu], r_start[mu] + r_count[mu]):
            s = 0.0
            for j in range(f_sstart[k], f_sstart[k] + f_scount[k]):
                s += x[species[j]]
            p0 = f_pstart[k]
            form = f_form[k]
            if form == 0:       # poly, Horner
                v = 0.0
                for j in range(f_pcount[k] - 1, -1, -1):
                    v = v * s + params[p0 + j]
            elif form == 1:     # mm
                v = params[p0] * params[p0 + 1] / (params[p0 + 1] + s)
            elif form == 2:     # hill
                v = params[p0] * params[p0 + 1] * s / (params[p0 + 1] * s + 1.0)
            else:
                v = params[p0]
            a *= v
        if a < 0.0:
            a = 0.0
        out[mu] = a
        total += a
    return total


@numba.njit(cache=True)
def _pick(alpha, total, u):
    target = u * total
    acc = 0.0
    last = -1
    for mu in range(alpha.shape[0]):
        if alpha[mu] > 0.0:
            last = mu
            acc += alpha[mu]
            if acc > target:
                return mu
    return last


@numba.njit(cache=True)
def _trajectory_kernel(x0, t_end, seed, capacity, nu, e_const, r_start, r_count, f_form,
                       f_pstart, f_pcount, f_sstart, f_scount, params, species):
    np.random.seed(seed)
    d = x0.shape[0]
    times = np.empty(capacity)
    states = np.empty((capacity, d), dtype=np.int64)
    alpha = np.empty(e_const.shape[0])
    x = x0.copy()
    t = 0.0
    times[0] = 0.0
    states[0] = x
    n = 1
    while True:
        total = _propensities(x, e_const, r_start, r_count, f_form, f_pstart, f_pcount,
                              f_sstart, f_scount, params, species, alpha)
        if total <= 0.0:
            break
        u1 = np.random.random()
        u2 = np.random.random()
        t += -np.log(1.0 - u1) / total
        if t > t_end:
            break
        mu = _pick(alpha, total, u2)
        for i in range(d):
            x[i] += nu[mu, i]
        if n == capacity:
            return -1, times, states
        times[n] = t
        states[n] = x
        n += 1
    return n, times, states


@numba.njit(cache=True)
def _ensemble_kernel(x0s, out_times, n_runs, base_seed, nu, e_const, r_start, r_count, f_form,
                     f_pstart, f_pcount, f_sstart, f_scount, params, species):
    d = x0s.shape[1]
    T = out_times.shape[0]
    samples = np.empty((n_runs, T, d), dtype=np.int64)
    alpha = np.empty(e_const.shape[0])
    t_end = out_times[T - 1]
    for run in range(n_runs):
        np.random.seed(base_seed + run)
        x = x0s[run].copy()
        t = 0.0
        k = 0
        while k < T:
            total = _propensities(x, e_const, r_start, r_count, f_form, f_pstart, f_pcount,
                                  f_sstart, f_scount, params, species, alpha)
            if total <= 0.0:
                t_next = np.inf
            else:
                u1 = np.random.random()
                u2 = np.random.random()
                t_next = t - np.log(1.0 - u1) / total
            # latest state at or before each output time
            while k < T and out_times[k] < t_next:
                samples[run, k] = x
                k += 1
            if k == T or t_next > t_end:
                while k < T:
                    samples[run, k] = x
                    k += 1
                break
            mu = _pick(alpha, total, u2)
            for i in range(d):
                x[i] += nu[mu, i]
            t = t_next
    return samples


def _args(e: _Encoded) -> tuple:
    return (e.nu, e.const, e.r_start, e.r_count, e.f_form, e.f_pstart, e.f_pcount,
            e.f_sstart, e.f_scount, e.params, e.species)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray       # (n_events + 1,), starts at 0
    states: np.ndarray      # (n_events + 1, d)
    seed: int

    def state_at(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.states[max(i, 0)]


def simulate_trajectory(network: ReactionNetwork, x0: Sequence[int], t_end: float, seed: int,
                        capacity: int = 4096) -> Trajectory:
    x = np.asarray(x0, dtype=np.int64)
    if x.shape != (network.d,) or np.any(x < 0):
        raise ValueError("x0 must be a nonnegative population vector of length d")
    e = encode(network)
    while True:
        n, times, states = _trajectory_kernel(x, float(t_end), int(seed), capacity, *_args(e))
        if n >= 0:
            return Trajectory(times[:n].copy(), states[:n].copy(), int(seed))
        capacity *= 4


@dataclass(frozen=True)
class EnsembleSummary:
    times: np.ndarray
    lower: tuple[int, ...]
    upper: tuple[int, ...]
    histograms: list[list[np.ndarray]]   # [time][species] counts over lower..upper
    mean: np.ndarray                     # (T, d)
    std_error: np.ndarray                # (T, d)
    clipped: np.ndarray                  # (T, d) samples pushed into a boundary bin
    n_runs: int

    def marginals(self, k: int) -> list[np.ndarray]:
        """Normalized per-species histograms at output time index ``k``."""
        return [h / self.n_runs for h in self.histograms[k]]


def run_ensemble(network: ReactionNetwork, x0: Sequence[int], output_times: Sequence[float],
                 n_runs: int, base_seed: int, lower: Sequence[int] | None = None,
                 upper: Sequence[int] | None = None) -> EnsembleSummary:
    """``x0`` is either one population vector or one row per run."""
    if n_runs < 1:
        raise ValueError("need at least one run")
    x = np.asarray(x0, dtype=np.int64)
    if x.shape == (network.d,):
        x = np.broadcast_to(x, (n_runs, network.d))
    if x.shape != (n_runs, network.d) or np.any(x < 0):
        raise ValueError("x0 must be a nonnegative population vector of length d (or one per run)")
    x = np.ascontiguousarray(x)
    times = np.asarray(output_times, dtype=float)
    if np.any(np.diff(times) < 0) or times.size == 0 or times[0] < 0:
        raise ValueError("output times must be nonnegative and sorted")
    samples = _ensemble_kernel(x, times, int(n_runs), int(base_seed), *_args(encode(network)))
    return summarize(samples, times, lower, upper)


def summarize(samples: np.ndarray, times: np.ndarray, lower: Sequence[int] | None = None,
              upper: Sequence[int] | None = None) -> EnsembleSummary:
    n_runs, T, d = samples.shape
    lo = np.zeros(d, dtype=np.int64) if lower is None else np.asarray(lower, dtype=np.int64)
    hi = samples.max(axis=(0, 1)) if upper is None else np.asarray(upper, dtype=np.int64)
    hi = np.maximum(hi, lo)
    hists, clipped = [], np.zeros((T, d), dtype=np.int64)
    for k in range(T):
        row = []
        for s in range(d):
            v = samples[:, k, s]
            clipped[k, s] = np.count_nonzero((v < lo[s]) | (v > hi[s]))
            c = np.clip(v, lo[s], hi[s]) - lo[s]
            row.append(np.bincount(c, minlength=int(hi[s] - lo[s] + 1)).astype(float))
        hists.append(row)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n_runs) if n_runs > 1 else np.zeros((T, d))
    return EnsembleSummary(times, tuple(int(v) for v in lo), tuple(int(v) for v in hi),
                           hists, mean, se, clipped, n_runs)


def sample_multinomial(n: int, p: Sequence[float], n_runs: int, seed: int) -> np.ndarray:
    """Initial states drawn from the multinomial with ``n`` trials; the
    leftover probability ``1 - sum(p)`` is the empty outcome."""
    p = np.asarray(p, dtype=float)
    rng = np.random.default_rng(seed)
    draws = rng.multinomial(n, np.append(p, max(1.0 - p.sum(), 0.0)), size=n_runs)
    return draws[:, :-1].astype(np.int64)
