"""Reaction networks and their mass-action polynomial vector fields."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd
from typing import Iterable, Sequence

import numpy as np
import sympy


class UnsupportedOrderError(ValueError):
    """A reaction's total reactant order falls outside the quadratic class."""

    def __init__(self, index: int, order: int):
        super().__init__(
            f"reaction {index} has total reactant order {order}; "
            "only orders 1 and 2 compile into the quadratic field class"
        )
        self.index = index
        self.order = order


Stoich = tuple[tuple[int, int], ...]


def _as_stoich(items: Iterable[Sequence[int]]) -> Stoich:
    merged: dict[int, int] = {}
    for idx, mult in items:
        idx, mult = int(idx), int(mult)
        if idx < 0:
            raise ValueError(f"negative species index {idx}")
        if mult <= 0:
            raise ValueError(f"stoichiometry must be a positive integer, got {mult}")
        merged[idx] = merged.get(idx, 0) + mult
    return tuple(sorted(merged.items()))


@dataclass(frozen=True)
class Reaction:
    """``sum(m_i R_i) -> sum(n_j P_j)`` with a non-negative rate constant.

    Species are 0-based indices; ``reactants`` and ``products`` hold
    ``(index, stoichiometry)`` pairs.
    """

    reactants: Stoich
    products: Stoich
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "reactants", _as_stoich(self.reactants))
        object.__setattr__(self, "products", _as_stoich(self.products))
        rate = float(self.rate)
        if not np.isfinite(rate) or rate < 0:
            raise ValueError(f"reaction rate must be finite and non-negative, got {rate}")
        object.__setattr__(self, "rate", rate)

    @property
    def order(self) -> int:
        return sum(m for _, m in self.reactants)

    def net_change(self, n_species: int) -> np.ndarray:
        v = np.zeros(n_species, dtype=np.int64)
        for idx, m in self.reactants:
            v[idx] -= m
        for idx, m in self.products:
            v[idx] += m
        return v

    def max_index(self) -> int:
        idx = [i for i, _ in self.reactants] + [i for i, _ in self.products]
        return max(idx, default=-1)


@dataclass(frozen=True)
class ReactionNetwork:
    species: int
    reactions: tuple[Reaction, ...] = ()

    def __post_init__(self):
        if int(self.species) <= 0:
            raise ValueError("a network needs at least one species")
        object.__setattr__(self, "species", int(self.species))
        object.__setattr__(self, "reactions", tuple(self.reactions))
        for r, rxn in enumerate(self.reactions):
            if rxn.max_index() >= self.species:
                raise ValueError(
                    f"reaction {r} references species {rxn.max_index()} "
                    f"but the network has {self.species}"
                )

    def stoichiometric_matrix(self) -> np.ndarray:
        """Net change matrix, species x reactions (integer)."""
        if not self.reactions:
            return np.zeros((self.species, 0), dtype=np.int64)
        return np.stack([r.net_change(self.species) for r in self.reactions], axis=1)

    def with_rates(self, rates: Sequence[float]) -> "ReactionNetwork":
        if len(rates) != len(self.reactions):
            raise ValueError(f"expected {len(self.reactions)} rates, got {len(rates)}")
        return ReactionNetwork(
            self.species,
            tuple(Reaction(r.reactants, r.products, k) for r, k in zip(self.reactions, rates)),
        )

    def to_json(self) -> dict:
        return {
            "species": self.species,
            "reactions": [
                {
                    "reactants": [list(p) for p in r.reactants],
                    "products": [list(p) for p in r.products],
                    "rate": r.rate,
                }
                for r in self.reactions
            ],
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "ReactionNetwork":
        if isinstance(data, str):
            data = json.loads(data)
        return cls(
            int(data["species"]),
            tuple(
                Reaction(r.get("reactants", []), r.get("products", []), r["rate"])
                for r in data.get("reactions", [])
            ),
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PolynomialField:
    """Quadratic vector field ``F_l(Z) = sum_j L[l,j] Z_j + sum_{j<=k} Q[l,(j,k)] Z_j Z_k``.

    Quadratic coefficients use the canonical ``j <= k`` convention: the
    monomial ``Z_j Z_k`` appears once, with ``pairs[p] == (j, k)`` and its
    coefficient for output ``l`` in ``quad[l, p]``.
    """

    linear: np.ndarray
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    quad: np.ndarray | None = None

    def __post_init__(self):
        lin = _frozen(self.linear)
        n = lin.shape[0]
        if lin.shape != (n, n):
            raise ValueError(f"linear part must be square, got {lin.shape}")
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        quad = np.zeros((n, len(pairs))) if self.quad is None else np.asarray(self.quad, float)
        if quad.shape != (n, len(pairs)):
            raise ValueError(f"quadratic coefficients must be {(n, len(pairs))}, got {quad.shape}")
        if len(pairs) and (np.any(pairs[:, 0] > pairs[:, 1]) or pairs.max() >= n or pairs.min() < 0):
            raise ValueError("quadratic pairs must satisfy 0 <= j <= k < n")
        # merge duplicate pairs and sort canonically
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True) if len(pairs) else (pairs, None)
        if inv is not None:
            merged = np.zeros((n, len(uniq)))
            np.add.at(merged.T, inv.ravel(), quad.T)
            quad, pairs = merged, uniq
        pairs.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "quad", _frozen(quad))

    @property
    def n(self) -> int:
        return self.linear.shape[0]

    @classmethod
    def zero(cls, n: int) -> "PolynomialField":
        return cls(np.zeros((n, n)))

    @classmethod
    def from_dense(cls, linear: np.ndarray, quadratic: np.ndarray) -> "PolynomialField":
        """Build from ``quadratic[l, j, k]``; entries with ``j > k`` fold onto ``(k, j)``."""
        quadratic = np.asarray(quadratic, float)
        n = quadratic.shape[0]
        folded = np.triu(quadratic) + np.tril(quadratic, -1).transpose(0, 2, 1)
        j, k = np.triu_indices(n)
        keep = np.any(folded[:, j, k] != 0, axis=0)
        pairs = np.stack([j[keep], k[keep]], axis=1)
        return cls(linear, pairs, folded[:, j[keep], k[keep]])

    def dense_quadratic(self) -> np.ndarray:
        """``(n, n, n)`` array ``Q[l, j, k]`` populated only for ``j <= k``."""
        out = np.zeros((self.n, self.n, self.n))
        if len(self.pairs):
            out[:, self.pairs[:, 0], self.pairs[:, 1]] = self.quad
        return out

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = z @ self.linear.T
        if len(self.pairs):
            mono = z[..., self.pairs[:, 0]] * z[..., self.pairs[:, 1]]
            out = out + mono @ self.quad.T
        return out

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        """Analytic state Jacobian at a single point ``z``."""
        z = np.asarray(z, dtype=float)
        jac = np.array(self.linear)
        for p, (j, k) in enumerate(self.pairs):
            coef = self.quad[:, p]
            jac[:, j] += coef * z[k]
            jac[:, k] += coef * z[j]
        return jac

    def features(self, z: np.ndarray) -> np.ndarray:
        """Monomials ``[Z_1..Z_n, Z_j Z_k (j<=k, row-major)]`` for regression."""
        z = np.asarray(z, dtype=float)
        j, k = np.triu_indices(self.n)
        return np.concatenate([z, z[..., j] * z[..., k]], axis=-1)

    def __add__(self, other: "PolynomialField") -> "PolynomialField":
        return PolynomialField.from_dense(
            self.linear + other.linear, self.dense_quadratic() + other.dense_quadratic()
        )

    def nonzero_pattern(self) -> tuple[np.ndarray, np.ndarray]:
        return self.linear != 0, self.dense_quadratic() != 0

    def sign_pattern(self) -> tuple[np.ndarray, np.ndarray]:
        return np.sign(self.linear), np.sign(self.dense_quadratic())

    def allclose(self, other: "PolynomialField", **kw) -> bool:
        return np.allclose(self.linear, other.linear, **kw) and np.allclose(
            self.dense_quadratic(), other.dense_quadratic(), **kw
        )

    def to_json(self) -> dict:
        quadratic = [
            [int(l), int(j), int(k), float(self.quad[l, p])]
            for p, (j, k) in enumerate(self.pairs)
            for l in range(self.n)
            if self.quad[l, p] != 0
        ]
        quadratic.sort()
        return {"n": self.n, "linear": self.linear.tolist(), "quadratic": quadratic}

    @classmethod
    def from_json(cls, data: dict | str) -> "PolynomialField":
        if isinstance(data, str):
            data = json.loads(data)
        lin = np.asarray(data["linear"], dtype=float)
        n = lin.shape[0]
        entries = data.get("quadratic", [])
        pairs = [(min(j, k), max(j, k)) for _, j, k, _ in entries]
        uniq = sorted(set(pairs))
        col = {p: i for i, p in enumerate(uniq)}
        quad = np.zeros((n, len(uniq)))
        for (l, _, _, v), p in zip(entries, pairs):
            quad[int(l), col[p]] += float(v)
        return cls(lin, np.array(uniq, dtype=np.int64).reshape(-1, 2), quad)


def mass_action_compile(network: ReactionNetwork) -> PolynomialField:
    """Law of mass action: each reaction fires at ``rate * prod(Z_i ** m_i)``."""
    n = network.species
    linear = np.zeros((n, n))
    quad: dict[tuple[int, int], np.ndarray] = {}
    for r, rxn in enumerate(network.reactions):
        order = rxn.order
        if order not in (1, 2):
            raise UnsupportedOrderError(r, order)
        delta = rxn.net_change(n) * rxn.rate
        if order == 1:
            (j, _), = rxn.reactants
            linear[:, j] += delta
        else:
            idx = [i for i, m in rxn.reactants for _ in range(m)]
            key = (min(idx), max(idx))
            quad.setdefault(key, np.zeros(n))
            quad[key] += delta
    keys = sorted(quad)
    pairs = np.array(keys, dtype=np.int64).reshape(-1, 2)
    coef = np.stack([quad[k] for k in keys], axis=1) if keys else np.zeros((n, 0))
    return PolynomialField(linear, pairs, coef)


# Competition network, 0-based: Z_1..Z_14 -> 0..13, Y = Z_15 -> 14.
Y_INDEX = 14
N_SPECIES = 15
_COMPETITION_REACTIONS: tuple[tuple[Stoich, Stoich], ...] = (
    (((0, 1), (1, 1)), ((8, 1),)),      # Z1 + Z2 -> Z9
    (((2, 1), (3, 1)), ((9, 1),)),      # Z3 + Z4 -> Z10
    (((4, 1), (5, 1)), ((10, 1),)),     # Z5 + Z6 -> Z11
    (((6, 1), (7, 1)), ((11, 1),)),     # Z7 + Z8 -> Z12
    (((9, 1),), ((14, 1),)),            # Z10 -> Y
    (((10, 1),), ((14, 1),)),           # Z11 -> Y
    (((8, 1), (14, 1)), ((12, 1),)),    # Z9 + Y -> Z13
    (((11, 1), (14, 1)), ((13, 1),)),   # Z12 + Y -> Z14
    (((12, 1),), ((0, 1), (1, 1))),     # Z13 -> Z1 + Z2
    (((13, 1),), ((4, 1), (5, 1))),     # Z14 -> Z5 + Z6
)


def competition_network(rates: Sequence[float]) -> ReactionNetwork:
    """The 10-reaction, 15-species network driving the chemistry track."""
    rates = [float(k) for k in rates]
    if len(rates) != 10:
        raise ValueError(f"expected 10 rates k1..k10, got {len(rates)}")
    for i, k in enumerate(rates, 1):
        if not np.isfinite(k) or k < 0:
            raise ValueError(f"rate k{i} must be non-negative, got {k}")
    return ReactionNetwork(
        N_SPECIES,
        tuple(Reaction(rx, pr, k) for (rx, pr), k in zip(_COMPETITION_REACTIONS, rates)),
    )


def conservation_laws(network: ReactionNetwork) -> list[np.ndarray]:
    """Integer basis of ``{v : v . S = 0}`` for the net change matrix ``S``.

    Each vector is scaled to coprime integers with a positive leading entry.
    """
    S = network.stoichiometric_matrix()
    if S.shape[1] == 0:
        return [np.eye(network.species, dtype=np.int64)[i] for i in range(network.species)]
    basis = sympy.Matrix(S.T.tolist()).nullspace()
    out = []
    for vec in basis:
        fracs = [Fraction(int(x.p), int(x.q)) for x in vec]
        lcm = 1
        for f in fracs:
            lcm = lcm * f.denominator // gcd(lcm, f.denominator)
        ints = [int(f * lcm) for f in fracs]
        g = 0
        for x in ints:
            g = gcd(g, abs(x))
        ints = [x // g for x in ints]
        lead = next(x for x in ints if x != 0)
        if lead < 0:
            ints = [-x for x in ints]
        out.append(np.array(ints, dtype=np.int64))
    return out
