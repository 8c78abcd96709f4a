"""Reaction networks with factorizable propensities.

A propensity is stored as a rate constant times a list of factors. Each
factor depends on a disjoint set of species and has one of a small closed
set of functional forms, so the factorization across a species partition
can be checked statically and every factor can be serialized exactly.

Forms (``s`` is the summed population of the factor's species):

``poly``  ``sum(p[k] * s**k)``, coefficients in ascending powers
``mm``    ``a*b / (b + s)``       (params ``[a, b]``)
``hill``  ``a*b*s / (b*s + 1)``   (params ``[a, b]``)
``const`` ``c``                   (params ``[c]``, no species)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

FORMS = ("poly", "mm", "hill", "const")


class ModelError(ValueError):
    """Raised for malformed or inconsistent model documents."""


class FactorizationError(ModelError):
    """A propensity factor straddles a leaf boundary of the partition tree."""


@dataclass(frozen=True)
class Species:
    index: int
    name: str


@dataclass(frozen=True)
class PropensityFactor:
    species: tuple[int, ...]
    form: str
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "species", tuple(int(s) for s in self.species))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.form not in FORMS:
            raise ModelError(f"unknown factor form {self.form!r}")
        if self.form == "const":
            if self.species or len(self.params) != 1:
                raise ModelError("const factor takes no species and one parameter")
        else:
            if not self.species:
                raise ModelError(f"{self.form} factor needs at least one species")
            if len(set(self.species)) != len(self.species):
                raise ModelError(f"repeated species in factor {self.species}")
        if self.form in ("mm", "hill") and len(self.params) != 2:
            raise ModelError(f"{self.form} factor takes params [a, b]")
        if self.form == "poly" and not self.params:
            raise ModelError("poly factor needs at least one coefficient")

    def value(self, counts: Any) -> Any:
        """Evaluate the factor.

        ``counts`` holds the populations of ``self.species`` along its first
        axis; extra trailing axes are broadcast, so whole grids can be
        evaluated at once.
        """
        p = self.params
        if self.form == "const":
            return p[0] * np.ones(np.shape(counts)[1:]) if np.ndim(counts) > 1 else p[0]
        s = np.sum(np.asarray(counts, dtype=float), axis=0)
        if self.form == "poly":
            out = np.zeros_like(s) + p[-1]
            for c in p[-2::-1]:
                out = out * s + c
            return out
        a, b = p
        if self.form == "mm":
            return a * b / (b + s)
        return a * b * s / (b * s + 1.0)


@dataclass(frozen=True)
class Reaction:
    stoichiometry: tuple[int, ...]
    factors: tuple[PropensityFactor, ...] = ()
    constant: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "stoichiometry", tuple(int(v) for v in self.stoichiometry))
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "constant", float(self.constant))
        if not self.constant >= 0.0:
            raise ModelError(f"negative rate constant {self.constant}")
        seen: set[int] = set()
        for f in self.factors:
            dup = seen.intersection(f.species)
            if dup:
                raise ModelError(f"species {sorted(dup)} appear in more than one factor")
            seen.update(f.species)

    def propensity(self, x: Any) -> Any:
        """``x`` indexed by species along the first axis (grids broadcast)."""
        x = np.asarray(x)
        out = self.constant
        for f in self.factors:
            out = out * f.value(x[list(f.species)])
        return out


@dataclass(frozen=True)
class ReactionNetwork:
    species: tuple[Species, ...]
    reactions: tuple[Reaction, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "reactions", tuple(self.reactions))
        for i, s in enumerate(self.species):
            if s.index != i:
                raise ModelError(f"species indices must be 0..d-1 in order, got {s.index} at {i}")
        names = [s.name for s in self.species]
        if len(set(names)) != len(names):
            raise ModelError("duplicate species names")
        d = self.d
        for mu, r in enumerate(self.reactions):
            if len(r.stoichiometry) != d:
                raise ModelError(f"reaction {mu}: stoich has length {len(r.stoichiometry)}, expected {d}")
            for f in r.factors:
                bad = [s for s in f.species if not 0 <= s < d]
                if bad:
                    raise ModelError(f"reaction {mu}: factor references undeclared species {bad}")

    @property
    def d(self) -> int:
        return len(self.species)

    @property
    def M(self) -> int:
        return len(self.reactions)

    @property
    def stoichiometry(self) -> np.ndarray:
        """(M, d) integer matrix of state changes."""
        return np.array([r.stoichiometry for r in self.reactions], dtype=np.int64).reshape(self.M, self.d)

    @classmethod
    def from_names(cls, names: Sequence[str], reactions: Sequence[Reaction] = ()) -> "ReactionNetwork":
        return cls(tuple(Species(i, n) for i, n in enumerate(names)), tuple(reactions))


def propensity_eval(network: ReactionNetwork, mu: int, x: Sequence[int]) -> float:
    """Propensity of reaction ``mu`` at population vector ``x``."""
    if not 0 <= mu < network.M:
        raise IndexError(f"reaction index {mu} out of range 0..{network.M - 1}")
    x = np.asarray(x)
    if x.shape != (network.d,):
        raise ValueError(f"state has shape {x.shape}, expected ({network.d},)")
    return float(network.reactions[mu].propensity(x))


# ---------------------------------------------------------------------------
# model document

def _fail(msg: str, path: str) -> ModelError:
    return ModelError(f"{path}: {msg}")


def _number(v: Any, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _fail(f"expected a number, got {v!r}", path)
    return float(v)


def _int_list(v: Any, path: str) -> list[int]:
    if not isinstance(v, list) or any(isinstance(e, bool) or not isinstance(e, int) for e in v):
        raise _fail(f"expected an integer array, got {v!r}", path)
    return list(v)


def network_from_dict(doc: Any) -> ReactionNetwork:
    """Build a network from an already-decoded model document."""
    if not isinstance(doc, dict):
        raise ModelError("model document must be an object")
    for key in ("species", "reactions"):
        if key not in doc:
            raise ModelError(f"missing key {key!r}")
    names = doc["species"]
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise _fail("expected an array of names", "species")
    if not isinstance(doc["reactions"], list):
        raise _fail("expected an array", "reactions")
    d = len(names)
    reactions = []
    for mu, rd in enumerate(doc["reactions"]):
        path = f"reactions[{mu}]"
        if not isinstance(rd, dict):
            raise _fail("expected an object", path)
        stoich = _int_list(rd.get("stoich"), path + ".stoich")
        if len(stoich) != d:
            raise _fail(f"stoich has length {len(stoich)}, expected {d}", path)
        constant = _number(rd.get("constant", 1.0), path + ".constant")
        if constant < 0:
            raise _fail(f"negative rate constant {constant}", path + ".constant")
        factors = []
        used: set[int] = set()
        for k, fd in enumerate(rd.get("factors", [])):
            fpath = f"{path}.factors[{k}]"
            if not isinstance(fd, dict):
                raise _fail("expected an object", fpath)
            sp = _int_list(fd.get("species", []), fpath + ".species")
            bad = [s for s in sp if not 0 <= s < d]
            if bad:
                raise _fail(f"undeclared species {bad} (model has {d})", fpath)
            if used.intersection(sp) or len(set(sp)) != len(sp):
                raise _fail(f"duplicate species {sorted(used.intersection(sp)) or sp} in factors", fpath)
            used.update(sp)
            params = fd.get("params")
            if not isinstance(params, list):
                raise _fail("expected a params array", fpath)
            try:
                factors.append(PropensityFactor(tuple(sp), fd.get("form"),
                                                tuple(_number(p, fpath + ".params") for p in params)))
            except ModelError as exc:
                raise _fail(str(exc), fpath) from None
        reactions.append(Reaction(tuple(stoich), tuple(factors), constant))
    return ReactionNetwork.from_names(names, reactions)


def parse_model(text: str) -> ReactionNetwork:
    """Parse a JSON model document; syntax errors carry line/column."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return network_from_dict(doc)


def network_to_dict(network: ReactionNetwork) -> dict:
    return {
        "species": [s.name for s in network.species],
        "reactions": [
            {
                "stoich": list(r.stoichiometry),
                "constant": r.constant,
                "factors": [
                    {"species": list(f.species), "form": f.form, "params": list(f.params)}
                    for f in r.factors
                ],
            }
            for r in network.reactions
        ],
    }


def serialize_model(network: ReactionNetwork) -> str:
    return json.dumps(network_to_dict(network), indent=2)


def load_model(ref: str) -> ReactionNetwork:
    """Resolve a builtin name (``schloegl``, ``lambda_phage``, ``cascade:N``,
    ``birth_death``) or a file path."""
    if ref == "birth_death":
        return builtin_birth_death()
    if ref == "schloegl":
        return builtin_schloegl()
    if ref == "lambda_phage":
        return builtin_lambda_phage()
    if ref.startswith("cascade"):
        _, _, n = ref.partition(":")
        return builtin_cascade(int(n) if n else 20)
    with open(ref) as fh:
        return parse_model(fh.read())


# ---------------------------------------------------------------------------
# builtin models

SCHLOEGL_RATES = (2.5e-4, 0.18, 37.5, 2200.0)


def builtin_schloegl(k: Sequence[float] = SCHLOEGL_RATES) -> ReactionNetwork:
    k0, k1, k2, k3 = k
    return ReactionNetwork.from_names(["S"], [
        # 3S -> 2S, k0 x(x-1)(x-2)
        Reaction((-1,), (PropensityFactor((0,), "poly", (0.0, 2.0, -3.0, 1.0)),), k0),
        # 2S -> 3S, k1 x(x-1)
        Reaction((1,), (PropensityFactor((0,), "poly", (0.0, -1.0, 1.0)),), k1),
        Reaction((-1,), (PropensityFactor((0,), "poly", (0.0, 1.0)),), k2),
        Reaction((1,), (), k3),
    ])


LAMBDA_A = (0.5, 1.0, 0.15, 0.3, 0.3)
LAMBDA_B = (0.12, 0.6, 1.0, 1.0, 1.0)
LAMBDA_C = (0.0025, 0.0007, 0.0231, 0.01, 0.01)


def builtin_lambda_phage() -> ReactionNetwork:
    a, b, c = LAMBDA_A, LAMBDA_B, LAMBDA_C
    d = 5

    def unit(i: int, v: int) -> tuple[int, ...]:
        e = [0] * d
        e[i] = v
        return tuple(e)

    rx = [
        Reaction(unit(0, 1), (PropensityFactor((1,), "mm", (a[0], b[0])),)),
        # (a1 + x4) * b1 / (b1 + x0)
        Reaction(unit(1, 1), (PropensityFactor((4,), "poly", (a[1], 1.0)),
                              PropensityFactor((0,), "mm", (1.0, b[1])))),
        Reaction(unit(2, 1), (PropensityFactor((1,), "hill", (a[2], b[2])),)),
        Reaction(unit(3, 1), (PropensityFactor((2,), "hill", (a[3], b[3])),)),
        Reaction(unit(4, 1), (PropensityFactor((2,), "hill", (a[4], b[4])),)),
    ]
    for i in range(d):
        rx.append(Reaction(unit(i, -1), (PropensityFactor((i,), "poly", (0.0, 1.0)),), c[i]))
    return ReactionNetwork.from_names([f"S{i}" for i in range(d)], rx)


CASCADE_PARAMS = (0.7, 5.0, 0.07)


def builtin_cascade(n: int = 20, params: Sequence[float] = CASCADE_PARAMS) -> ReactionNetwork:
    if n < 2:
        raise ValueError("cascade needs at least 2 species")
    a, b, c = params

    def unit(i: int, v: int) -> tuple[int, ...]:
        e = [0] * n
        e[i] = v
        return tuple(e)

    rx = [Reaction(unit(0, 1), (), a)]
    # x/(b + x) written in hill form with rate 1 and slope 1/b
    rx += [Reaction(unit(i, 1), (PropensityFactor((i - 1,), "hill", (1.0, 1.0 / b)),))
           for i in range(1, n)]
    rx += [Reaction(unit(j, -1), (PropensityFactor((j,), "poly", (0.0, 1.0)),), c)
           for j in range(n)]
    return ReactionNetwork.from_names([f"S{i}" for i in range(n)], rx)


def builtin_birth_death(production: float = 2.0, decay: float = 0.1) -> ReactionNetwork:
    """Single species, 0 -> S at a constant rate and S -> 0 at ``decay * x``."""
    return ReactionNetwork.from_names(["S"], [
        Reaction((1,), (), production),
        Reaction((-1,), (PropensityFactor((0,), "poly", (0.0, 1.0)),), decay),
    ])


# ---------------------------------------------------------------------------
# factorization against a partition tree

@dataclass(frozen=True)
class FactorAssignment:
    """Per reaction, the factors that live on each leaf (keyed by leaf path).

    The reaction constant is carried by ``designated_leaf``, the first leaf of
    the tree in depth-first order.
    """
    leaf_factors: tuple[dict[str, tuple[PropensityFactor, ...]], ...]
    constants: tuple[float, ...]
    designated_leaf: str

    def leaf_constant(self, mu: int, leaf: str) -> float:
        return self.constants[mu] if leaf == self.designated_leaf else 1.0


def validate_factorization(network: ReactionNetwork, tree: Any) -> FactorAssignment:
    """Assign every propensity factor to the unique leaf holding its species.

    ``tree`` is a :class:`ttncme.ttn.PartitionTree`.
    """
    owner: dict[int, str] = {}
    for leaf in tree.leaves:
        for s in leaf.species:
            owner[s] = leaf.path
    missing = [i for i in range(network.d) if i not in owner]
    if missing:
        raise FactorizationError(f"species {missing} not covered by the partition")
    out = []
    for mu, r in enumerate(network.reactions):
        per_leaf: dict[str, list[PropensityFactor]] = {leaf.path: [] for leaf in tree.leaves}
        for f in r.factors:
            leaves = {owner[s] for s in f.species}
            if len(leaves) > 1:
                raise FactorizationError(
                    f"reaction {mu}: factor on species {list(f.species)} is split across leaves "
                    + " | ".join(sorted(leaves, key=lambda p: (len(p), p))))
            target = leaves.pop() if leaves else tree.leaves[0].path
            per_leaf[target].append(f)
        out.append({k: tuple(v) for k, v in per_leaf.items()})
    return FactorAssignment(tuple(out), tuple(r.constant for r in network.reactions),
                            tree.leaves[0].path)
