"""First-order projector-splitting integrator for tree tensor networks.

One macro step walks the tree from the root. At an internal node ``tau``
with current core ``C``:

* ``phi(tau, side=0)``: QR of ``C`` with the left child index free, K step
  of the left child (or recursion into it), then the backward S step;
* ``phi(tau, side=1)``: the same for the right child;
* ``psi(tau)``: forward C step of the core.

Every flow is written in factorized form. The per-node, per-reaction
matrices ``A``/``B`` (shifted / unshifted propensity-weighted Gram matrices
of the node's factor) are kept up to date incrementally, and the
environment coefficients ``a``/``b`` of a child are contracted from its
sibling's ``A``/``B`` and the parent's ``a``/``b``.

Index conventions: ``a[m, i, j]`` couples environment basis ``i`` (test)
with ``j`` (trial); ``K`` has shape (n, r) with the environment index last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.sparse.linalg import LinearOperator, gmres

from .dense import KrylovError, KrylovSettings
from .grid import OUT_OF_DOMAIN, build_shift_map, leaf_propensity_table, shift_table
from .model import FactorAssignment, ReactionNetwork, validate_factorization
from .ttn import (Node, TTNState, marginal, mass, matricize_qr, mean_std, node_factor,
                  orthonormalize, qr_positive)

SCHEMES = ("explicit", "implicit", "exact")
EXACT_GUARD = 4096


class NumericalError(RuntimeError):
    def __init__(self, message: str, node: str = "", step: int = -1):
        super().__init__(f"{message} (node {node or 'root'!s}, step {step})")
        self.node = node
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    t_end: float
    scheme: str = "explicit"
    substeps: int = 1
    krylov: KrylovSettings = KrylovSettings()
    output_times: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")
        n = self.n_steps
        if not math.isclose(n * self.dt, self.t_end, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"t_end={self.t_end} is not a multiple of dt={self.dt}")
        for t in self.output_times or ():
            k = round(t / self.dt)
            if not math.isclose(k * self.dt, t, rel_tol=1e-9, abs_tol=1e-12) or not 0 <= k <= n:
                raise ValueError(f"output time {t} is not a multiple of dt within [0, t_end]")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def output_steps(self) -> list[int]:
        times = self.output_times if self.output_times is not None else (self.t_end,)
        return [int(round(t / self.dt)) for t in times]


# ---------------------------------------------------------------------------
# leaf data and coefficients

@dataclass
class LeafData:
    alpha: np.ndarray       # (M, n) leaf propensity factor alpha^tau_mu(x)
    src: np.ndarray         # (M, n) index of x - nu, clipped to 0 where invalid
    gain: np.ndarray        # (M, n) alpha^tau_mu(x - nu), zero where x - nu is outside


def leaf_data(network: ReactionNetwork, assignment: FactorAssignment, state: TTNState,
              leaf: Node) -> LeafData:
    g = state.grid(leaf)
    alpha = leaf_propensity_table(network, assignment, g, leaf.path)
    src = shift_table(network, g)
    valid = src != OUT_OF_DOMAIN
    srcc = np.where(valid, src, 0)
    gain = np.where(valid, np.take_along_axis(alpha, srcc, axis=1), 0.0)
    return LeafData(alpha, srcc, gain)


def leaf_AB(X: np.ndarray, ld: LeafData) -> tuple[np.ndarray, np.ndarray]:
    Xs = X[ld.src] * ld.gain[:, :, None]                  # (M, n, r)
    A = np.einsum("xi,mxj->mij", X, Xs)
    B = np.einsum("xi,mxj->mij", X, ld.alpha[:, :, None] * X[None])
    return A, B


def internal_AB(Q: np.ndarray, A0: np.ndarray, A1: np.ndarray) -> np.ndarray:
    """``A[m,i,j] = sum Q[i,a,b] Q[j,c,d] A0[m,a,c] A1[m,b,d]``."""
    U = np.einsum("mac,jcd->mjad", A0, Q)
    T = np.einsum("mjad,mbd->mjab", U, A1)
    return np.einsum("iab,mjab->mij", Q, T)


def contract_env(G: np.ndarray, A_sib: np.ndarray, a: np.ndarray, side: int) -> np.ndarray:
    """Environment coefficient of child ``side`` from the orthonormal core ``G``.

    ``side=0``: ``sum G[p,x,q] G[r,y,t] A_sib[m,q,t] a[m,p,r]``;
    ``side=1``: ``sum G[p,q,x] G[r,t,y] A_sib[m,q,t] a[m,p,r]``.
    """
    if side == 1:
        G = G.transpose(0, 2, 1)
    V = np.einsum("mpr,pxq->mrxq", a, G)
    U = np.einsum("mrxq,mqt->mrxt", V, A_sib)
    return np.einsum("mrxt,ryt->mxy", U, G)


@dataclass
class CoefficientStore:
    A: dict[str, np.ndarray] = field(default_factory=dict)
    B: dict[str, np.ndarray] = field(default_factory=dict)
    a: dict[str, np.ndarray] = field(default_factory=dict)
    b: dict[str, np.ndarray] = field(default_factory=dict)


def precompute_AB(state: TTNState, leaves: dict[str, LeafData]) -> CoefficientStore:
    store = CoefficientStore()
    for node in state.tree.postorder():
        if node is state.tree.root:
            break
        refresh_AB(state, store, leaves, node)
    return store


def refresh_AB(state: TTNState, store: CoefficientStore, leaves: dict[str, LeafData], node: Node) -> None:
    if node.is_leaf:
        store.A[node.path], store.B[node.path] = leaf_AB(state.leaves[node.path], leaves[node.path])
    else:
        c0, c1 = (c.path for c in node.children)
        Q = state.cores[node.path]
        store.A[node.path] = internal_AB(Q, store.A[c0], store.A[c1])
        store.B[node.path] = internal_AB(Q, store.B[c0], store.B[c1])


def compute_ab(G: np.ndarray, store: CoefficientStore, node: Node, side: int,
               a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sib = node.children[1 - side].path
    return contract_env(G, store.A[sib], a, side), contract_env(G, store.B[sib], b, side)


def environment_ab(state: TTNState, store: CoefficientStore) -> None:
    """Fill ``store.a``/``store.b`` for every non-root node from the current
    (orthonormal) state, top-down. Used by checks; the integrator computes
    them on the fly."""
    M = next(iter(store.A.values())).shape[0] if store.A else 0

    def down(node: Node, a: np.ndarray, b: np.ndarray) -> None:
        if node.is_leaf:
            return
        C = state.cores[node.path]
        for side in (0, 1):
            G, _ = matricize_qr(C, 1 + side)
            ac, bc = compute_ab(G, store, node, side, a, b)
            child = node.children[side]
            store.a[child.path], store.b[child.path] = ac, bc
            down(child, ac, bc)
    one = np.ones((M, 1, 1))
    down(state.tree.root, one, one)


# ---------------------------------------------------------------------------
# right-hand sides

def k_rhs(K: np.ndarray, ld: LeafData, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    gain = np.einsum("mxj,mij->xi", K[ld.src] * ld.gain[:, :, None], a)
    loss = np.einsum("mx,mxi->xi", ld.alpha, np.einsum("xj,mij->mxi", K, b))
    return gain - loss


def s_rhs(S: np.ndarray, A: np.ndarray, B: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # backward flow: dS/dt = -sum_mu (A S a^T - B S b^T)
    gain = np.einsum("mik,mkj->ij", A, np.einsum("kl,mjl->mkj", S, a))
    loss = np.einsum("mik,mkj->ij", B, np.einsum("kl,mjl->mkj", S, b))
    return loss - gain


def c_rhs(C: np.ndarray, A0: np.ndarray, A1: np.ndarray, B0: np.ndarray, B1: np.ndarray,
          a: np.ndarray, b: np.ndarray) -> np.ndarray:
    def term(x, y, z):
        T = np.einsum("mbd,jcd->mjcb", z, C)
        T = np.einsum("mac,mjcb->mjab", y, T)
        return np.einsum("mij,mjab->iab", x, T)
    return term(a, A0, A1) - term(b, B0, B1)


def _materialize(rhs: Callable[[np.ndarray], np.ndarray], shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    if n > EXACT_GUARD:
        raise ValueError(f"exact sub-flow of size {n} exceeds guard {EXACT_GUARD}")
    L = np.empty((n, n))
    e = np.zeros(n)
    for k in range(n):
        e[k] = 1.0
        L[:, k] = rhs(e.reshape(shape)).ravel()
        e[k] = 0.0
    return L


def integrate(rhs: Callable[[np.ndarray], np.ndarray], y0: np.ndarray, dt: float, scheme: str,
              substeps: int = 1, krylov: KrylovSettings = KrylovSettings()) -> np.ndarray:
    """Advance the linear ODE ``y' = rhs(y)`` over ``dt``."""
    h = dt / substeps
    y = np.array(y0, dtype=float)
    if scheme == "exact":
        E = expm(dt * _materialize(rhs, y.shape))
        return (E @ y.ravel()).reshape(y.shape)
    for _ in range(substeps):
        if scheme == "explicit":
            y = y + h * rhs(y)
        elif scheme == "implicit":
            n = y.size
            shape = y.shape
            A = LinearOperator((n, n), dtype=float,
                               matvec=lambda v: v - h * rhs(v.reshape(shape)).ravel())
            rhs_b = y.ravel()
            cycles = max(1, math.ceil(krylov.maxiter / krylov.restart))
            q, info = gmres(A, rhs_b, x0=rhs_b, rtol=krylov.rtol, atol=0.0,
                            restart=min(krylov.restart, n), maxiter=cycles)
            if info != 0:
                nb = np.linalg.norm(rhs_b)
                raise KrylovError("GMRES did not converge in sub-flow",
                                  np.linalg.norm(A.matvec(q) - rhs_b) / (nb or 1.0))
            y = q.reshape(shape)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    return y


def k_step(K0: np.ndarray, ld: LeafData, a: np.ndarray, b: np.ndarray, dt: float,
           scheme: str = "explicit", substeps: int = 1,
           krylov: KrylovSettings = KrylovSettings()) -> np.ndarray:
    return integrate(lambda K: k_rhs(K, ld, a, b), K0, dt, scheme, substeps, krylov)


def s_step(S0: np.ndarray, A: np.ndarray, B: np.ndarray, a: np.ndarray, b: np.ndarray, dt: float,
           scheme: str = "explicit", substeps: int = 1,
           krylov: KrylovSettings = KrylovSettings()) -> np.ndarray:
    return integrate(lambda S: s_rhs(S, A, B, a, b), S0, dt, scheme, substeps, krylov)


def c_step(C0: np.ndarray, A0: np.ndarray, A1: np.ndarray, B0: np.ndarray, B1: np.ndarray,
           a: np.ndarray, b: np.ndarray, dt: float, scheme: str = "explicit", substeps: int = 1,
           krylov: KrylovSettings = KrylovSettings()) -> np.ndarray:
    return integrate(lambda C: c_rhs(C, A0, A1, B0, B1, a, b), C0, dt, scheme, substeps, krylov)


# ---------------------------------------------------------------------------
# integrator

@dataclass
class RunResult:
    times: np.ndarray
    mass: np.ndarray                 # (T,)
    mean: np.ndarray                 # (T, d)
    std: np.ndarray                  # (T, d)
    marginals: list[list[np.ndarray]]
    step_mass: np.ndarray            # mass after every macro step, index 0 = initial
    states: list[TTNState]
    wall_time: float = 0.0

    @property
    def max_mass_error(self) -> float:
        return float(np.max(np.abs(self.step_mass - 1.0)))


def observe(state: TTNState) -> tuple[float, np.ndarray, np.ndarray, list[np.ndarray]]:
    d = state.space.d
    ms = [mean_std(state, s) for s in range(d)]
    return (mass(state), np.array([m for m, _ in ms]), np.array([s for _, s in ms]),
            [marginal(state, s) for s in range(d)])


class PSTTNIntegrator:
    def __init__(self, state: TTNState, network: ReactionNetwork, config: SolverConfig,
                 assignment: FactorAssignment | None = None):
        if network.d != state.space.d:
            raise ValueError("network and state space disagree on the species count")
        self.network = network
        self.config = config
        self.assignment = assignment or validate_factorization(network, state.tree)
        self.state = orthonormalize(state) if not state.tree.root.is_leaf else state.copy()
        self.state.check()
        self.leaf_data = {l.path: leaf_data(network, self.assignment, self.state, l)
                          for l in self.state.tree.leaves}
        self.store = precompute_AB(self.state, self.leaf_data)
        self.step_index = 0

    # -- guards -------------------------------------------------------------
    def _guard(self, y: np.ndarray, what: str, node: Node) -> np.ndarray:
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite values after {what}", node.path, self.step_index)
        return y

    def _flow(self, fn, *args, what: str, node: Node) -> np.ndarray:
        c = self.config
        return self._guard(fn(*args, c.dt, c.scheme, c.substeps, c.krylov), what, node)

    # -- subflows -----------------------------------------------------------
    def subflow_phi(self, node: Node, C: np.ndarray, a: np.ndarray, b: np.ndarray, side: int) -> np.ndarray:
        st, store = self.state, self.store
        G, R = matricize_qr(C, 1 + side)
        S0 = R.T
        child = node.children[side]
        ac, bc = compute_ab(G, store, node, side, a, b)
        store.a[child.path], store.b[child.path] = ac, bc
        if child.is_leaf:
            K = st.leaves[child.path] @ S0
            K = self._flow(k_step, K, self.leaf_data[child.path], ac, bc, what="K step", node=child)
            X1, S_tilde = qr_positive(K)
            st.leaves[child.path] = X1
        else:
            Cc = np.einsum("ji,jab->iab", S0, st.cores[child.path])
            C3 = self.step_node(child, Cc, ac, bc)
            Qn, S_tilde = matricize_qr(C3, 0)
            st.cores[child.path] = Qn
        refresh_AB(st, store, self.leaf_data, child)
        S1 = self._flow(s_step, S_tilde, store.A[child.path], store.B[child.path], ac, bc,
                        what="S step", node=child)
        if side == 0:
            return np.einsum("icb,ac->iab", G, S1)
        return np.einsum("iac,bc->iab", G, S1)

    def subflow_phi0(self, node: Node, C: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.subflow_phi(node, C, a, b, 0)

    def subflow_phi1(self, node: Node, C: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.subflow_phi(node, C, a, b, 1)

    def subflow_psi(self, node: Node, C: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        s = self.store
        c0, c1 = (c.path for c in node.children)
        return self._flow(c_step, C, s.A[c0], s.A[c1], s.B[c0], s.B[c1], a, b,
                          what="C step", node=node)

    def step_node(self, node: Node, C: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        C1 = self.subflow_phi0(node, C, a, b)
        C2 = self.subflow_phi1(node, C1, a, b)
        return self.subflow_psi(node, C2, a, b)

    def step(self) -> None:
        root = self.state.tree.root
        one = np.ones((self.network.M, 1, 1))
        if root.is_leaf:
            self.state.leaves[""] = self._flow(k_step, self.state.leaves[""], self.leaf_data[""],
                                               one, one, what="K step", node=root)
        else:
            self.state.cores[""] = self.step_node(root, self.state.cores[""].copy(), one, one)
        self.step_index += 1

    def run(self, keep_states: bool = False) -> RunResult:
        import time
        c = self.config
        out_steps = c.output_steps()
        want: dict[int, list[int]] = {}
        for i, k in enumerate(out_steps):
            want.setdefault(k, []).append(i)
        T = len(out_steps)
        d = self.network.d
        res_mass, res_mean, res_std = np.zeros(T), np.zeros((T, d)), np.zeros((T, d))
        res_marg: list = [None] * T
        states: list = [None] * T if keep_states else []
        step_mass = np.empty(c.n_steps + 1)

        def record(k: int) -> None:
            m, mu, sd, marg = observe(self.state)
            for i in want[k]:
                res_mass[i], res_mean[i], res_std[i], res_marg[i] = m, mu, sd, marg
                if keep_states:
                    states[i] = self.state.copy()

        t0 = time.perf_counter()
        step_mass[0] = mass(self.state)
        if 0 in want:
            record(0)
        for k in range(1, c.n_steps + 1):
            self.step()
            step_mass[k] = mass(self.state)
            if k in want:
                record(k)
        return RunResult(np.array(out_steps) * c.dt, res_mass, res_mean, res_std, res_marg,
                         step_mass, states, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# consistency checks

def _node_alpha(network: ReactionNetwork, assignment: FactorAssignment, state: TTNState,
                node: Node) -> np.ndarray:
    """(M, n_node) product of the leaf factor tables below ``node``."""
    if node.is_leaf:
        return leaf_propensity_table(network, assignment, state.grid(node), node.path)
    t0 = _node_alpha(network, assignment, state, node.children[0])
    t1 = _node_alpha(network, assignment, state, node.children[1])
    return np.einsum("my,mx->myx", t1, t0).reshape(t0.shape[0], -1)


def direct_AB(network: ReactionNetwork, assignment: FactorAssignment, state: TTNState,
              node: Node) -> tuple[np.ndarray, np.ndarray]:
    """A/B of ``node`` from its materialized factor and node-grid propensities."""
    X = node_factor(state, node)
    alpha = _node_alpha(network, assignment, state, node)
    g = state.grid(node)
    A = np.empty((network.M, X.shape[1], X.shape[1]))
    B = np.empty_like(A)
    for mu in range(network.M):
        sm = build_shift_map(g, network.stoichiometry[mu, list(node.species)])
        v = sm.valid
        w = np.zeros(g.size)
        w[v] = alpha[mu, sm.source[v]]
        Xs = np.zeros_like(X)
        Xs[v] = X[sm.source[v]]
        A[mu] = X.T @ (w[:, None] * Xs)
        B[mu] = X.T @ (alpha[mu][:, None] * X)
    return A, B


def check_identity_ef_gh(state: TTNState, network: ReactionNetwork, assignment: FactorAssignment,
                         store: CoefficientStore, node: Node | str,
                         a: np.ndarray | None = None, b: np.ndarray | None = None) -> float:
    """Max deviation between the right-child S coefficients e/f computed
    directly (materialized factors and environment) and the contraction of
    the C coefficients g/h with two copies of ``G`` (the QR factor of the
    node's core with the right index free)."""
    node = state.tree.by_path[node] if isinstance(node, str) else node
    if a is None:
        a = np.ones((network.M, 1, 1)) if node is state.tree.root else store.a[node.path]
        b = np.ones((network.M, 1, 1)) if node is state.tree.root else store.b[node.path]
    c0, c1 = node.children
    G, _ = matricize_qr(state.cores[node.path], 2)          # G[i_tau, i0, k]
    # direct route: materialized left factor, environment W and right factor
    X0 = node_factor(state, c0)
    X1 = node_factor(state, c1)
    W = np.einsum("pak,xa->pkx", G, X0)                      # W[i_tau, k](x0)
    al0 = _node_alpha(network, assignment, state, c0)
    al1 = _node_alpha(network, assignment, state, c1)
    g0, g1 = state.grid(c0), state.grid(c1)
    r1 = X1.shape[1]
    e = np.zeros((r1, r1, r1, r1))
    f = np.zeros_like(e)
    for mu in range(network.M):
        nu = network.stoichiometry[mu]
        sm0 = build_shift_map(g0, nu[list(c0.species)])
        sm1 = build_shift_map(g1, nu[list(c1.species)])
        v0, v1 = sm0.valid, sm1.valid
        Ws = np.zeros_like(W)
        Ws[:, :, v0] = W[:, :, sm0.source[v0]] * al0[mu, sm0.source[v0]]
        # environment coefficients of tau1 for reaction mu (no x1 dependence left)
        cpl = np.einsum("pq,pjx,qlx->jl", a[mu], W, Ws)
        dpl = np.einsum("pq,pjx,qlx->jl", b[mu], W, W * al0[mu])
        X1s = np.zeros_like(X1)
        X1s[v1] = X1[sm1.source[v1]] * al1[mu, sm1.source[v1], None]
        # e[i, j, k, l]: (i, k) index tau1, (j, l) index the environment
        e += np.einsum("xi,xk,jl->ijkl", X1, X1s, cpl)
        f += np.einsum("xi,xk,jl->ijkl", X1, al1[mu][:, None] * X1, dpl)
    # contraction route: g/h from the stored A/B of the children and a/b of the node
    A0, A1, B0, B1 = store.A[c0.path], store.A[c1.path], store.B[c0.path], store.B[c1.path]
    g = np.einsum("mpq,mac,mbd->pabqcd", a, A0, A1)
    h = np.einsum("mpq,mac,mbd->pabqcd", b, B0, B1)
    e2 = np.einsum("pak,qcl,paiqcj->ikjl", G, G, g)
    f2 = np.einsum("pak,qcl,paiqcj->ikjl", G, G, h)
    return float(max(np.max(np.abs(e - e2)), np.max(np.abs(f - f2))))
