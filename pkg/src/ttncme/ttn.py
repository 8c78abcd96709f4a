"""Binary tree tensor networks over a truncated CME state space.

Nodes are addressed by their path from the root (``""`` for the root,
``"0"``/``"1"`` for its children, ``"10"`` for the left child of ``"1"``
and so on). Leaves store factor matrices ``X`` of shape ``(n, r)``;
internal nodes store connection tensors ``Q`` of shape ``(r, r0, r1)``
where ``r`` is the rank of the edge above the node (1 at the root).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .grid import LeafGrid, TruncatedStateSpace

EVAL_GUARD = 2 ** 24
SNAPSHOT_MAGIC = b"TTNCME1\n"


class PartitionError(ValueError):
    pass


class GuardExceeded(RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    path: str
    species: tuple[int, ...]
    children: tuple["Node", "Node"] | None = None
    rank: int | None = None      # rank of both child edges (internal nodes only)
    edge_rank: int = 1           # rank of the edge to the parent

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def __repr__(self) -> str:
        kind = "Leaf" if self.is_leaf else f"Internal(r={self.rank})"
        return f"<{kind} {self.path or 'root'} {self.species}>"


@dataclass(eq=False)
class PartitionTree:
    root: Node
    text: str = ""

    def __post_init__(self) -> None:
        self.nodes: list[Node] = list(self._preorder(self.root))
        self.by_path = {n.path: n for n in self.nodes}
        self.leaves = [n for n in self.nodes if n.is_leaf]
        self.internal = [n for n in self.nodes if not n.is_leaf]

    @staticmethod
    def _preorder(node: Node) -> Iterator[Node]:
        yield node
        if node.children:
            for c in node.children:
                yield from PartitionTree._preorder(c)

    def postorder(self) -> list[Node]:
        out: list[Node] = []

        def walk(n: Node) -> None:
            if n.children:
                walk(n.children[0])
                walk(n.children[1])
            out.append(n)
        walk(self.root)
        return out

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(n.rank for n in self.internal)

    @property
    def d(self) -> int:
        return len(self.root.species)

    def with_ranks(self, ranks: Sequence[int]) -> "PartitionTree":
        return parse_partition(self.text, ranks)

    def __repr__(self) -> str:
        return f"PartitionTree({self.text!r}, ranks={self.ranks})"


_TOKEN = re.compile(r"\s*(?:(\()|(\))|(\d+))")


def _tokens(text: str) -> list[tuple[str, int]]:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise PartitionError(f"unexpected character {text[pos]!r} at position {pos}")
        out.append(("(" if m.group(1) else ")" if m.group(2) else "int", m.start(m.lastindex)))
        if m.group(3):
            out[-1] = ("int", int(m.group(3)))
        pos = m.end()
    return out


def parse_partition(text: str, ranks: Sequence[int] = (), n_species: int | None = None) -> PartitionTree:
    """Parse ``((0 1)((2 3)(4)))``-style trees; ``ranks`` are given per
    internal node in depth-first preorder and shared by both child edges."""
    toks = _tokens(text)
    pos = 0

    def expect(kind: str) -> None:
        nonlocal pos
        if pos >= len(toks) or toks[pos][0] != kind:
            raise PartitionError(f"malformed partition {text!r}: expected {kind!r} at token {pos}")
        pos += 1

    def node() -> tuple:
        nonlocal pos
        expect("(")
        if pos < len(toks) and toks[pos][0] == "int":
            sp = []
            while pos < len(toks) and toks[pos][0] == "int":
                sp.append(toks[pos][1])
                pos += 1
            expect(")")
            return ("leaf", tuple(sp))
        kids = []
        while pos < len(toks) and toks[pos][0] == "(":
            kids.append(node())
        expect(")")
        if len(kids) == 1:
            return kids[0]
        if len(kids) != 2:
            raise PartitionError(f"malformed partition {text!r}: node with {len(kids)} children")
        return ("node", kids[0], kids[1])

    raw = node()
    if pos != len(toks):
        raise PartitionError(f"malformed partition {text!r}: trailing input")

    ranks = [int(r) for r in ranks]
    n_internal = 0

    def count(t: tuple) -> None:
        nonlocal n_internal
        if t[0] == "node":
            n_internal += 1
            count(t[1])
            count(t[2])
    count(raw)
    if len(ranks) != n_internal:
        raise PartitionError(f"{n_internal} internal nodes but {len(ranks)} ranks given")
    it = iter(ranks)

    def build(t: tuple, path: str, edge: int) -> Node:
        if t[0] == "leaf":
            return Node(path, t[1], None, None, edge)
        r = next(it)
        if r < 1:
            raise PartitionError(f"rank at node {path or 'root'} must be positive")
        left = build(t[1], path + "0", r)
        right = build(t[2], path + "1", r)
        return Node(path, left.species + right.species, (left, right), r, edge)

    root = build(raw, "", 1)
    sp = root.species
    d = n_species if n_species is not None else (max(sp) + 1 if sp else 0)
    if sorted(sp) != list(range(d)):
        dup = sorted({s for s in sp if sp.count(s) > 1})
        missing = sorted(set(range(d)) - set(sp))
        raise PartitionError(f"species must partition 0..{d - 1}: duplicated {dup}, missing {missing}")
    tree = PartitionTree(root, text.strip())
    for n in tree.internal:
        check_rank_condition(n.edge_rank, n.children[0].edge_rank, n.children[1].edge_rank, n.path)
    return tree


def check_rank_condition(r: int, r0: int, r1: int, where: str = "") -> None:
    if not (r <= r0 * r1 and r0 <= r1 * r and r1 <= r0 * r):
        raise PartitionError(f"rank condition violated at node {where or 'root'}: ({r}, {r0}, {r1})")


# ---------------------------------------------------------------------------
# state

@dataclass(eq=False)
class TTNState:
    tree: PartitionTree
    space: TruncatedStateSpace
    leaves: dict[str, np.ndarray] = field(default_factory=dict)
    cores: dict[str, np.ndarray] = field(default_factory=dict)

    def grid(self, node: Node | str) -> LeafGrid:
        node = self.tree.by_path[node] if isinstance(node, str) else node
        return self.space.grid(node.species)

    def copy(self) -> "TTNState":
        return TTNState(self.tree, self.space, {k: v.copy() for k, v in self.leaves.items()},
                        {k: v.copy() for k, v in self.cores.items()})

    def check(self) -> None:
        """Shape and rank-condition consistency."""
        for n in self.tree.nodes:
            if n.is_leaf:
                X = self.leaves[n.path]
                if X.shape != (self.grid(n).size, n.edge_rank):
                    raise ValueError(f"leaf {n.path}: shape {X.shape}")
            else:
                Q = self.cores[n.path]
                shape = (n.edge_rank, n.children[0].edge_rank, n.children[1].edge_rank)
                if Q.shape != shape:
                    raise ValueError(f"node {n.path or 'root'}: shape {Q.shape}, expected {shape}")
                check_rank_condition(*shape, n.path)


def check_leaf_ranks(tree: PartitionTree, space: TruncatedStateSpace) -> None:
    if tree.d != space.d:
        raise PartitionError(f"tree covers {tree.d} species, state space has {space.d}")
    for leaf in tree.leaves:
        n = space.grid(leaf.species).size
        if leaf.edge_rank > n:
            raise PartitionError(f"leaf {leaf.path}: rank {leaf.edge_rank} exceeds grid size {n}")


def complete_columns(U: np.ndarray, r: int) -> np.ndarray:
    """Extend orthonormal columns ``U`` (n, k) to ``r`` orthonormal columns.

    Candidates are unit vectors taken in order of how little ``U`` covers
    them, so the result is deterministic.
    """
    n, k = U.shape
    if k >= r:
        return U[:, :r]
    if r > n:
        raise ValueError(f"cannot build {r} orthonormal columns in dimension {n}")
    cols = [U[:, j] for j in range(k)]
    for j in np.argsort(np.einsum("ij,ij->i", U, U), kind="stable"):
        v = np.zeros(n)
        v[j] = 1.0
        for _ in range(2):
            for c in cols:
                v -= (c @ v) * c
        nv = np.linalg.norm(v)
        if nv > 0.5:
            cols.append(v / nv)
            if len(cols) == r:
                break
    return np.column_stack(cols)


def qr_positive(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR with a nonnegative diagonal in R."""
    Q, R = np.linalg.qr(A)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s, R * s[:, None]


def matricize_qr(tensor: np.ndarray, mode: int) -> tuple[np.ndarray, np.ndarray]:
    """QR of a ``(r, r0, r1)`` tensor with axis ``mode`` kept free.

    Rows combine the remaining two axes with the earlier axis varying
    fastest (``i + r*i1`` for mode 1, ``i + r*i0`` for mode 2,
    ``i0 + r0*i1`` for mode 0). Returns ``(G, R)`` where ``G`` has the
    input's layout with the free axis replaced by the column index and
    ``mat(tensor) = mat(G) @ R``.
    """
    others = [a for a in range(3) if a != mode]
    perm = [others[1], others[0], mode]
    T = tensor.transpose(perm)
    shp = T.shape
    Qm, R = qr_positive(T.reshape(shp[0] * shp[1], shp[2]))
    G = Qm.reshape(shp[0], shp[1], Qm.shape[1]).transpose(np.argsort(perm))
    return G, R


def unmatricize(mat: np.ndarray, shape: Sequence[int], mode: int) -> np.ndarray:
    """Inverse of the matricization used by :func:`matricize_qr`."""
    others = [a for a in range(3) if a != mode]
    perm = [others[1], others[0], mode]
    pshape = [shape[p] for p in perm[:2]] + [mat.shape[1]]
    return mat.reshape(pshape).transpose(np.argsort(perm))


def matricize(tensor: np.ndarray, mode: int) -> np.ndarray:
    others = [a for a in range(3) if a != mode]
    T = tensor.transpose([others[1], others[0], mode])
    return T.reshape(-1, T.shape[2])


# ---------------------------------------------------------------------------
# construction

def _to_leaf_tensor(dense: np.ndarray, tree: PartitionTree, space: TruncatedStateSpace) -> np.ndarray:
    if dense.shape != space.shape:
        raise ValueError(f"dense array has shape {dense.shape}, expected {space.shape}")
    v = dense.transpose(tree.root.species).ravel(order="F")
    return v.reshape([space.grid(l.species).size for l in tree.leaves], order="F")


def from_dense(dense: np.ndarray, tree: PartitionTree, space: TruncatedStateSpace,
               guard: int = EVAL_GUARD) -> TTNState:
    """Leaf-to-root truncated hierarchical SVD at the tree's ranks."""
    check_leaf_ranks(tree, space)
    if dense.size > guard:
        raise GuardExceeded(f"{dense.size} states exceed guard {guard}")
    T = _to_leaf_tensor(np.asarray(dense, dtype=float), tree, space)
    state = TTNState(tree, space)
    if tree.root.is_leaf:
        state.leaves[""] = T.reshape(-1, 1).copy()
        return state
    frontier = [l.path for l in tree.leaves]
    for node in tree.postorder():
        if node is tree.root:
            break
        r = node.edge_rank
        if node.is_leaf:
            ax = frontier.index(node.path)
            M = np.moveaxis(T, ax, 0).reshape(T.shape[ax], -1)
            U = _leading_basis(M, r)
            state.leaves[node.path] = U
            T = np.moveaxis(np.tensordot(U.T, np.moveaxis(T, ax, 0), axes=1), 0, ax)
        else:
            ax = frontier.index(node.children[0].path)
            r0, r1 = T.shape[ax], T.shape[ax + 1]
            T2 = np.moveaxis(T, (ax, ax + 1), (1, 0))     # (b, a, rest...)
            rest = T2.shape[2:]
            M = T2.reshape(r0 * r1, -1)                   # rows a + r0*b
            U = _leading_basis(M, r)
            state.cores[node.path] = U.reshape(r1, r0, r).transpose(2, 1, 0).copy()
            T = np.moveaxis((U.T @ M).reshape((r,) + rest), 0, ax)
            del frontier[ax + 1]
            frontier[ax] = node.path
    state.cores[""] = T.reshape(1, *T.shape).copy()
    return state


def _leading_basis(M: np.ndarray, r: int) -> np.ndarray:
    U, _, _ = np.linalg.svd(M, full_matrices=False)
    U = complete_columns(U[:, :r], r)
    # fix column signs: largest-magnitude entry positive
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s


def from_product(leaf_distributions: Mapping[str, np.ndarray] | Sequence[np.ndarray],
                 tree: PartitionTree, space: TruncatedStateSpace) -> TTNState:
    """Exact rank-1 TTN of a product distribution, padded to the tree's ranks."""
    check_leaf_ranks(tree, space)
    if not isinstance(leaf_distributions, Mapping):
        leaf_distributions = {l.path: v for l, v in zip(tree.leaves, leaf_distributions)}
    state = TTNState(tree, space)
    scale = 1.0
    for leaf in tree.leaves:
        v = np.asarray(leaf_distributions[leaf.path], dtype=float).ravel(order="F")
        if v.size != space.grid(leaf.species).size:
            raise ValueError(f"leaf {leaf.path}: distribution has {v.size} entries")
        nv = np.linalg.norm(v)
        if nv == 0:
            raise ValueError(f"leaf {leaf.path}: zero-norm distribution")
        if leaf is tree.root:
            state.leaves[""] = v.reshape(-1, 1).copy()
            return state
        scale *= nv
        state.leaves[leaf.path] = complete_columns((v / nv)[:, None], leaf.edge_rank)
    for node in tree.internal:
        Q = np.zeros((node.edge_rank, node.rank, node.rank))
        Q[0, 0, 0] = 1.0
        state.cores[node.path] = Q
    state.cores[""][0, 0, 0] = scale
    return state


def delta_state(tree: PartitionTree, space: TruncatedStateSpace, x: Sequence[int] | None = None) -> TTNState:
    """Product of point masses at ``x`` (default: the lower corner)."""
    x = tuple(space.lower) if x is None else tuple(x)
    dists = {}
    for leaf in tree.leaves:
        g = space.grid(leaf.species)
        v = np.zeros(g.size)
        v[g.linear_index([x[s] for s in leaf.species])] = 1.0
        dists[leaf.path] = v
    return from_product(dists, tree, space)


def random_state(tree: PartitionTree, space: TruncatedStateSpace, rng: np.random.Generator) -> TTNState:
    """Random orthonormal TTN (for tests and identity checks)."""
    check_leaf_ranks(tree, space)
    state = TTNState(tree, space)
    for leaf in tree.leaves:
        n = space.grid(leaf.species).size
        A = rng.random((n, leaf.edge_rank)) if leaf is not tree.root else rng.random((n, 1))
        state.leaves[leaf.path] = A
    for node in tree.internal:
        r0, r1 = node.children[0].edge_rank, node.children[1].edge_rank
        state.cores[node.path] = rng.standard_normal((node.edge_rank, r0, r1))
    return orthonormalize(state)


# ---------------------------------------------------------------------------
# evaluation and gauge

def node_factor(state: TTNState, node: Node | str) -> np.ndarray:
    """Materialized ``X^tau`` of shape (n_tau, r_tau), node species in tree order."""
    node = state.tree.by_path[node] if isinstance(node, str) else node
    if node.is_leaf:
        return state.leaves[node.path]
    X0 = node_factor(state, node.children[0])
    X1 = node_factor(state, node.children[1])
    Q = state.cores[node.path]
    out = np.einsum("iab,xa,yb->yxi", Q, X0, X1, optimize=True)
    return out.reshape(X0.shape[0] * X1.shape[0], Q.shape[0])


def eval_full(state: TTNState, guard: int = EVAL_GUARD) -> np.ndarray:
    """Dense distribution with axes in natural species order."""
    if state.space.size > guard:
        raise GuardExceeded(f"{state.space.size} states exceed guard {guard}")
    sp = state.tree.root.species
    v = node_factor(state, state.tree.root)[:, 0]
    arr = v.reshape([state.space.shape[s] for s in sp], order="F")
    return arr.transpose(np.argsort(sp))


def orthonormalize(state: TTNState) -> TTNState:
    """Leaf-to-root QR sweep; every non-root factor ends up orthonormal."""
    out = state.copy()
    tree = out.tree
    for node in tree.postorder():
        if node is tree.root:
            break
        parent = tree.by_path[node.path[:-1]]
        side = int(node.path[-1])
        if node.is_leaf:
            Qm, R = qr_positive(out.leaves[node.path])
            out.leaves[node.path] = Qm
        else:
            G, R = matricize_qr(out.cores[node.path], 0)
            out.cores[node.path] = G
        out.cores[parent.path] = push_factor(out.cores[parent.path], R, side)
    return out


def push_factor(core: np.ndarray, R: np.ndarray, side: int) -> np.ndarray:
    """Absorb ``X_old = X_new @ R`` of child ``side`` into the parent core."""
    if side == 0:
        return np.einsum("aq,iqb->iab", R, core)
    return np.einsum("bq,iaq->iab", R, core)


# ---------------------------------------------------------------------------
# observables by contraction

def _contract(state: TTNState, leaf_weights: Mapping[str, np.ndarray]) -> np.ndarray:
    """Contract each leaf with a weight matrix (n, k) (default all-ones) and
    propagate to the root; returns the flattened outer product over all k's."""

    def up(node: Node) -> np.ndarray:
        if node.is_leaf:
            X = state.leaves[node.path]
            W = leaf_weights.get(node.path)
            return X.sum(axis=0)[None, :] if W is None else W.T @ X
        A = up(node.children[0])
        B = up(node.children[1])
        Q = state.cores[node.path]
        out = np.einsum("iab,pa,qb->pqi", Q, A, B, optimize=True)
        return out.reshape(-1, Q.shape[0])

    return up(state.tree.root)[:, 0]


def _leaf_of(state: TTNState, species: int) -> tuple[Node, int]:
    for leaf in state.tree.leaves:
        if species in leaf.species:
            return leaf, leaf.species.index(species)
    raise KeyError(f"species {species} not in tree")


def mass(state: TTNState) -> float:
    return float(_contract(state, {})[0])


def marginal(state: TTNState, species: int) -> np.ndarray:
    leaf, k = _leaf_of(state, species)
    g = state.grid(leaf)
    n_s = g.shape[k]
    W = np.zeros((g.size, n_s))
    W[np.arange(g.size), g.states[k] - g.lower[k]] = 1.0
    return _contract(state, {leaf.path: W})


def marginals(state: TTNState) -> list[np.ndarray]:
    return [marginal(state, s) for s in range(state.space.d)]


def moment(state: TTNState, species: int, order: int) -> float:
    leaf, k = _leaf_of(state, species)
    g = state.grid(leaf)
    w = g.states[k].astype(float) ** order
    return float(_contract(state, {leaf.path: w[:, None]})[0])


def mean_std(state: TTNState, species: int) -> tuple[float, float]:
    m1 = moment(state, species, 1)
    m2 = moment(state, species, 2)
    return m1, float(np.sqrt(max(m2 - m1 * m1, 0.0)))


# ---------------------------------------------------------------------------
# memory and snapshots

def memory_footprint(tree: PartitionTree, space: TruncatedStateSpace) -> tuple[int, int]:
    """(entries, bytes at 8 bytes per entry) of the stored TTN."""
    entries = 0
    for n in tree.nodes:
        if n.is_leaf:
            entries += space.grid(n.species).size * n.edge_rank
        else:
            entries += n.edge_rank * n.children[0].edge_rank * n.children[1].edge_rank
    return entries, 8 * entries


def full_footprint(space: TruncatedStateSpace) -> tuple[int, int]:
    return space.size, 8 * space.size


def write_snapshot(state: TTNState, path: str) -> None:
    header = {
        "tree": state.tree.text,
        "ranks": list(state.tree.ranks),
        "bounds": [[[state.space.lower[s], state.space.upper[s]] for s in leaf.species]
                   for leaf in state.tree.leaves],
    }
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        for n in state.tree.nodes:
            a = state.leaves[n.path] if n.is_leaf else state.cores[n.path]
            fh.write(np.asarray(a, dtype="<f8").tobytes(order="F"))


def read_snapshot(path: str) -> TTNState:
    with open(path, "rb") as fh:
        if fh.read(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a TTN snapshot")
        header = json.loads(fh.readline())
        payload = fh.read()
    tree = parse_partition(header["tree"], header["ranks"])
    lower = [0] * tree.d
    upper = [0] * tree.d
    for leaf, bounds in zip(tree.leaves, header["bounds"]):
        for s, (lo, hi) in zip(leaf.species, bounds):
            lower[s], upper[s] = lo, hi
    state = TTNState(tree, TruncatedStateSpace(tuple(lower), tuple(upper)))
    offset = 0
    for n in tree.nodes:
        if n.is_leaf:
            shape = (state.grid(n).size, n.edge_rank)
        else:
            shape = (n.edge_rank, n.children[0].edge_rank, n.children[1].edge_rank)
        count = int(np.prod(shape))
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape, order="F")
        offset += 8 * count
        (state.leaves if n.is_leaf else state.cores)[n.path] = a.astype(float)
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes")
    return state

