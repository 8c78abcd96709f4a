"""Dense CME on a truncated box: matrix-free operator and time steppers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import LinearOperator, gmres

from .grid import TruncatedStateSpace
from .model import SCHLOEGL_RATES, ReactionNetwork

DENSE_GUARD = 2 ** 24


class KrylovError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class KrylovSettings:
    rtol: float = 1e-10
    restart: int = 20
    maxiter: int = 500          # total inner iterations


def _shift_slices(nu: Sequence[int], shape: Sequence[int]) -> tuple[tuple[slice, ...], tuple[slice, ...]] | None:
    """(target, source) slices realizing ``out[x] = q[x - nu]`` on the box."""
    tgt, src = [], []
    for v, n in zip(nu, shape):
        if abs(v) >= n:
            return None
        if v >= 0:
            tgt.append(slice(v, n))
            src.append(slice(0, n - v))
        else:
            tgt.append(slice(0, n + v))
            src.append(slice(-v, n))
    return tuple(tgt), tuple(src)


@dataclass
class CMEOperator:
    network: ReactionNetwork
    space: TruncatedStateSpace
    guard: int = DENSE_GUARD
    alpha: np.ndarray = field(init=False, repr=False)
    exit_rate: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.network.d != self.space.d:
            raise ValueError(f"network has {self.network.d} species, state space {self.space.d}")
        if self.space.size > self.guard:
            raise ValueError(f"{self.space.size} states exceed the dense guard {self.guard}")
        shape = self.space.shape
        x = np.indices(shape) + np.asarray(self.space.lower).reshape((-1,) + (1,) * len(shape))
        self.alpha = np.empty((self.network.M,) + shape)
        for mu, r in enumerate(self.network.reactions):
            self.alpha[mu] = np.broadcast_to(r.propensity(x), shape)
        self.exit_rate = self.alpha.sum(axis=0) if self.network.M else np.zeros(shape)
        self._shifts = [_shift_slices(nu, shape) for nu in self.network.stoichiometry]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.space.shape

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = p.reshape(self.shape)
        out = -self.exit_rate * p
        for mu, sl in enumerate(self._shifts):
            if sl is None:
                continue
            tgt, src = sl
            out[tgt] += self.alpha[mu][src] * p[src]
        return out


def apply_operator(op: CMEOperator, p: np.ndarray) -> np.ndarray:
    return op.apply(p)


def _output_steps(t_end: float, dt: float, output_times: Sequence[float] | None) -> tuple[int, list[int]]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = int(round(t_end / dt))
    if not math.isclose(n * dt, t_end, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    times = [t_end] if output_times is None else list(output_times)
    steps = []
    for t in times:
        k = int(round(t / dt))
        if not math.isclose(k * dt, t, rel_tol=1e-9, abs_tol=1e-12) or not 0 <= k <= n:
            raise ValueError(f"output time {t} is not a multiple of dt within [0, t_end]")
        steps.append(k)
    return n, steps


@numba.njit(cache=True)
def _thomas_factor(lo, di, up):
    n, m = di.shape
    cp = np.empty((n, m))
    den = np.empty((n, m))
    for j in range(m):
        den[0, j] = di[0, j]
        cp[0, j] = up[0, j] / den[0, j]
        for i in range(1, n):
            den[i, j] = di[i, j] - lo[i, j] * cp[i - 1, j]
            cp[i, j] = up[i, j] / den[i, j]
    return cp, den


@numba.njit(cache=True)
def _thomas_solve(lo, cp, den, b):
    n, m = b.shape
    x = np.empty((n, m))
    for j in range(m):
        x[0, j] = b[0, j] / den[0, j]
        for i in range(1, n):
            x[i, j] = (b[i, j] - lo[i, j] * x[i - 1, j]) / den[i, j]
        for i in range(n - 2, -1, -1):
            x[i, j] -= cp[i, j] * x[i + 1, j]
    return x


class LinePreconditioner:
    """Exact tridiagonal solve of ``I - dt A`` along species 0, Jacobi across
    the remaining axes.

    Reactions that move only species 0 by one unit enter the tridiagonal
    blocks; every other reaction contributes its loss term to the diagonal.
    For one-species networks this is an exact solve.
    """

    def __init__(self, op: CMEOperator, dt: float):
        shape = op.shape
        n0 = shape[0]
        alpha = op.alpha.reshape(op.network.M, n0, op.space.size // n0)
        di = 1.0 + dt * op.exit_rate.reshape(n0, -1)
        lo = np.zeros_like(di)
        up = np.zeros_like(di)
        for mu, nu in enumerate(op.network.stoichiometry):
            if np.any(nu[1:] != 0):
                continue
            if nu[0] == 0:
                di -= dt * alpha[mu]
            elif nu[0] == 1:
                lo[1:] -= dt * alpha[mu][:-1]
            elif nu[0] == -1:
                up[:-1] -= dt * alpha[mu][1:]
        self.shape = shape
        self.lo = lo
        self.cp, self.den = _thomas_factor(lo, di, up)

    def solve(self, v: np.ndarray) -> np.ndarray:
        b = np.ascontiguousarray(v.reshape(self.shape[0], -1))
        return _thomas_solve(self.lo, self.cp, self.den, b).ravel()


def implicit_euler_step(op: CMEOperator, p: np.ndarray, dt: float,
                        krylov: KrylovSettings = KrylovSettings(),
                        precond: LinePreconditioner | None = None) -> np.ndarray:
    """Solve ``(I - dt A) q = p`` with restarted, preconditioned GMRES."""
    size = p.size
    A = LinearOperator((size, size), matvec=lambda v: v - dt * op.apply(v).ravel(), dtype=float)
    P = precond if precond is not None else LinePreconditioner(op, dt)
    M = LinearOperator((size, size), matvec=P.solve, dtype=float)
    b = p.ravel()
    cycles = max(1, math.ceil(krylov.maxiter / krylov.restart))
    q, info = gmres(A, b, x0=P.solve(b), rtol=krylov.rtol, atol=0.0, restart=krylov.restart,
                    maxiter=cycles, M=M)
    if info != 0:
        nb = np.linalg.norm(b)
        res = np.linalg.norm(A.matvec(q) - b) / (nb if nb else 1.0)
        raise KrylovError("GMRES did not converge", res)
    return q.reshape(p.shape)


def integrate_dense(op: CMEOperator, p0: np.ndarray, t_end: float, dt: float,
                    scheme: str = "explicit", output_times: Sequence[float] | None = None,
                    krylov: KrylovSettings = KrylovSettings()) -> tuple[np.ndarray, list[np.ndarray]]:
    """Fixed-step Euler integration; returns (times, distributions at those times)."""
    if scheme not in ("explicit", "implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    n, steps = _output_steps(t_end, dt, output_times)
    want = {}
    for i, k in enumerate(steps):
        want.setdefault(k, []).append(i)
    out: list[np.ndarray | None] = [None] * len(steps)
    p = np.array(p0, dtype=float).reshape(op.shape)
    precond = LinePreconditioner(op, dt) if scheme == "implicit" else None
    for i in want.get(0, ()):
        out[i] = p.copy()
    for k in range(1, n + 1):
        if scheme == "explicit":
            p = p + dt * op.apply(p)
        else:
            p = implicit_euler_step(op, p, dt, krylov, precond)
        for i in want.get(k, ()):
            out[i] = p.copy()
    return np.array([k * dt for k in steps]), out


def reference_solution(op: CMEOperator, p0: np.ndarray, times: Sequence[float],
                       rtol: float = 1e-10, atol: float = 1e-14) -> list[np.ndarray]:
    """High-accuracy adaptive (DOP853) solution at ``times``."""
    times = sorted(float(t) for t in times)
    p0 = np.asarray(p0, dtype=float).ravel()
    if times[-1] == 0:
        return [p0.reshape(op.shape).copy() for _ in times]
    sol = solve_ivp(lambda t, y: op.apply(y).ravel(), (0.0, times[-1]), p0, method="DOP853",
                    t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"reference integration failed: {sol.message}")
    return [sol.y[:, i].reshape(op.shape) for i in range(len(times))]


def best_rank_approx(dense: np.ndarray, left_species: Sequence[int], r: int,
                     guard: int = DENSE_GUARD) -> np.ndarray:
    """Truncated SVD of ``dense`` matricized as (left_species) x (rest)."""
    if dense.size > guard:
        raise ValueError(f"{dense.size} entries exceed guard {guard}")
    left = list(left_species)
    right = [k for k in range(dense.ndim) if k not in left]
    T = dense.transpose(left + right)
    m = int(np.prod([dense.shape[k] for k in left]))
    U, s, Vt = np.linalg.svd(T.reshape(m, -1), full_matrices=False)
    approx = (U[:, :r] * s[:r]) @ Vt[:r]
    return approx.reshape(T.shape).transpose(np.argsort(left + right))


def schloegl_rhs(x: float | np.ndarray, k: Sequence[float] = SCHLOEGL_RATES) -> float | np.ndarray:
    # deterministic rates with the usual volume scaling: k0 x^3, k1 x^2, k2 x, k3
    k0, k1, k2, k3 = k
    return -k0 * x ** 3 + k1 * x ** 2 - k2 * x + k3


def schloegl_ode(x0: float, t_end: float, dt: float,
                 k: Sequence[float] = SCHLOEGL_RATES) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 for the deterministic Schloegl model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = max(1, int(round(t_end / dt)))
    h = t_end / n
    xs = np.empty(n + 1)
    xs[0] = x = float(x0)
    for i in range(n):
        k1 = schloegl_rhs(x, k)
        k2 = schloegl_rhs(x + 0.5 * h * k1, k)
        k3 = schloegl_rhs(x + 0.5 * h * k2, k)
        k4 = schloegl_rhs(x + h * k3, k)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs[i + 1] = x
    return np.linspace(0.0, n * h, n + 1), xs


def multinomial_distribution(space: TruncatedStateSpace, n: int, p: Sequence[float]) -> np.ndarray:
    """Multinomial initial condition with ``n`` trials and per-species
    probabilities ``p`` (the remainder ``1 - sum(p)`` is the empty outcome)."""
    p = np.asarray(p, dtype=float)
    x = np.indices(space.shape) + np.asarray(space.lower).reshape((-1,) + (1,) * space.d)
    tot = x.sum(axis=0)
    rest = 1.0 - p.sum()
    logf = np.vectorize(math.lgamma)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = (math.lgamma(n + 1) - logf(x + 1).sum(axis=0) - logf(np.maximum(n - tot, 0) + 1)
                + (x * np.log(p).reshape((-1,) + (1,) * space.d)).sum(axis=0)
                + (n - tot) * math.log(rest))
    return np.where(tot <= n, np.exp(logp), 0.0)


def delta_distribution(space: TruncatedStateSpace, x: Sequence[int] | None = None) -> np.ndarray:
    x = tuple(space.lower) if x is None else tuple(x)
    p = np.zeros(space.shape)
    p[tuple(v - lo for v, lo in zip(x, space.lower))] = 1.0
    return p
