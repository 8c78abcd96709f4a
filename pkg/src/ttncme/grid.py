"""Truncated state spaces, leaf grids and shift maps.

Linear indices always let the first listed species vary fastest, i.e. a
leaf over species ``(s0, s1)`` stores state ``(x_s0, x_s1)`` at
``(x_s0 - lo_s0) + n_s0 * (x_s1 - lo_s1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .model import FactorAssignment, ReactionNetwork

OUT_OF_DOMAIN = -1


@dataclass(frozen=True)
class TruncatedStateSpace:
    lower: tuple[int, ...]
    upper: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", tuple(int(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(int(v) for v in self.upper))
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper bounds differ in length")
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if lo < 0 or lo >= hi:
                raise ValueError(f"species {i}: need 0 <= lower < upper, got {lo}..{hi}")

    @classmethod
    def box(cls, upper: Sequence[int], lower: Sequence[int] | None = None) -> "TruncatedStateSpace":
        return cls(tuple(lower) if lower is not None else (0,) * len(upper), tuple(upper))

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in zip(self.lower, self.upper))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=object))

    def grid(self, species: Sequence[int]) -> "LeafGrid":
        species = tuple(species)
        return LeafGrid(species, tuple(self.lower[s] for s in species),
                        tuple(self.upper[s] for s in species))


@dataclass(frozen=True)
class LeafGrid:
    species: tuple[int, ...]
    lower: tuple[int, ...]
    upper: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(hi - lo + 1 for lo, hi in zip(self.lower, self.upper))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def strides(self) -> np.ndarray:
        return np.concatenate([[1], np.cumprod(self.shape[:-1])]).astype(np.int64)

    def linear_index(self, x: Sequence[int]) -> int:
        x = np.asarray(x, dtype=np.int64)
        k = x - np.asarray(self.lower)
        if x.shape != (len(self.species),) or np.any(k < 0) or np.any(k >= np.asarray(self.shape)):
            raise IndexError(f"state {tuple(x)} outside grid {self.lower}..{self.upper}")
        return int(k @ self.strides)

    def inverse_index(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.size:
            raise IndexError(f"index {index} outside 0..{self.size - 1}")
        return tuple(int(v) for v in self.states[:, index])

    @cached_property
    def states(self) -> np.ndarray:
        """(len(species), size) populations of every grid point, in index order."""
        idx = np.indices(self.shape).reshape(len(self.shape), -1, order="F")
        return idx + np.asarray(self.lower, dtype=np.int64)[:, None]


@dataclass(frozen=True)
class ShiftMap:
    """``source[i]`` is the index of ``x_i - nu`` or ``OUT_OF_DOMAIN``."""
    nu: tuple[int, ...]
    source: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.source != OUT_OF_DOMAIN


def build_shift_map(grid: LeafGrid, nu: Sequence[int]) -> ShiftMap:
    nu = tuple(int(v) for v in nu)
    src = grid.states - np.asarray(nu, dtype=np.int64)[:, None]
    lo = np.asarray(grid.lower)[:, None]
    hi = np.asarray(grid.upper)[:, None]
    inside = np.all((src >= lo) & (src <= hi), axis=0)
    index = np.full(grid.size, OUT_OF_DOMAIN, dtype=np.int64)
    index[inside] = (src[:, inside] - lo).T @ grid.strides
    return ShiftMap(nu, index)


def leaf_propensity_table(network: ReactionNetwork, assignment: FactorAssignment,
                          grid: LeafGrid, leaf: str) -> np.ndarray:
    """(M, n) values of each reaction's leaf factor over the leaf grid."""
    pos = {s: k for k, s in enumerate(grid.species)}
    table = np.ones((network.M, grid.size))
    for mu in range(network.M):
        for f in assignment.leaf_factors[mu].get(leaf, ()):
            table[mu] *= f.value(grid.states[[pos[s] for s in f.species]])
        table[mu] *= assignment.leaf_constant(mu, leaf)
    return table


def shift_table(network: ReactionNetwork, grid: LeafGrid) -> np.ndarray:
    """(M, n) shift maps of every reaction restricted to the grid's species."""
    nu = network.stoichiometry[:, list(grid.species)]
    return np.stack([build_shift_map(grid, nu[mu]).source for mu in range(network.M)]) \
        if network.M else np.zeros((0, grid.size), dtype=np.int64)
