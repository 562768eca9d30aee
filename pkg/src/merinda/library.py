"""Polynomial feature libraries and coefficient matrices.

A library is the ordered set of monomials of total degree <= M over a set of
variables (states, optionally followed by inputs). Terms are sorted by total
degree, then lexicographically by variable index, so for three variables and
M=2 the order is ``1, x, y, z, x^2, xy, xz, y^2, yz, z^2``. This ordering is
part of the file formats and must not change.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from .errors import LibraryTooLarge, TrajectoryTooShort

MAX_TERMS = 100_000


@dataclass(frozen=True)
class PolynomialLibrary:
    n_vars: int
    max_order: int
    terms: tuple[tuple[int, ...], ...]
    var_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.var_names:
            object.__setattr__(self, "var_names", tuple(f"x{i}" for i in range(self.n_vars)))
        exps = np.array(self.terms, dtype=np.int64).reshape(len(self.terms), self.n_vars)
        exps.setflags(write=False)
        object.__setattr__(self, "_exps", exps)
        index = {t: j for j, t in enumerate(self.terms)}
        # down[j, v] = index of term j with the exponent of v lowered by one
        down = np.zeros((len(self.terms), self.n_vars), dtype=np.int64)
        for j, t in enumerate(self.terms):
            for v in range(self.n_vars):
                if t[v] > 0:
                    lowered = t[:v] + (t[v] - 1,) + t[v + 1:]
                    down[j, v] = index[lowered]
        object.__setattr__(self, "_down", down)

    @property
    def size(self) -> int:
        return len(self.terms)

    @property
    def exponents(self) -> np.ndarray:
        return self._exps

    @property
    def degrees(self) -> np.ndarray:
        return self._exps.sum(axis=1)

    def index(self, exponent) -> int:
        return self.terms.index(tuple(int(e) for e in exponent))

    def term_names(self) -> list[str]:
        names = []
        for t in self.terms:
            parts = []
            for v, e in enumerate(t):
                if e == 1:
                    parts.append(self.var_names[v])
                elif e > 1:
                    parts.append(f"{self.var_names[v]}^{e}")
            names.append("*".join(parts) if parts else "1")
        return names

    def evaluate(self, points) -> np.ndarray:
        return evaluate(self, points)

    def to_json(self) -> str:
        return json.dumps([list(t) for t in self.terms])

    @classmethod
    def from_json(cls, text: str, var_names=()) -> "PolynomialLibrary":
        terms = tuple(tuple(int(e) for e in t) for t in json.loads(text))
        if not terms:
            raise ValueError("empty term list")
        n_vars = len(terms[0])
        return cls(n_vars, max(sum(t) for t in terms), terms, tuple(var_names))


def build_library(n_vars: int, max_order: int, var_names=()) -> PolynomialLibrary:
    """Return the full monomial library of degree <= ``max_order``."""
    if n_vars < 1 or max_order < 1:
        raise ValueError("n_vars and max_order must both be >= 1")
    count = comb(max_order + n_vars, n_vars)
    if count > MAX_TERMS:
        raise LibraryTooLarge(f"library would have {count} terms (limit {MAX_TERMS})")
    terms = []
    for degree in range(max_order + 1):
        for combo in combinations_with_replacement(range(n_vars), degree):
            exp = [0] * n_vars
            for v in combo:
                exp[v] += 1
            terms.append(tuple(exp))
    return PolynomialLibrary(n_vars, max_order, tuple(terms), tuple(var_names))


def _power_tables(lib: PolynomialLibrary, points: np.ndarray) -> np.ndarray:
    # (..., n_vars, M+1) table of x_v ** e built by repeated multiplication
    tables = np.empty(points.shape + (lib.max_order + 1,), dtype=float)
    tables[..., 0] = 1.0
    for e in range(1, lib.max_order + 1):
        tables[..., e] = tables[..., e - 1] * points
    return tables


def evaluate(lib: PolynomialLibrary, points) -> np.ndarray:
    """Evaluate every library term at each row of ``points``.

    ``points`` has shape (..., n_vars); the result has shape (..., P).
    Non-finite inputs propagate as non-finite outputs.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[-1] != lib.n_vars:
        raise ValueError(f"expected {lib.n_vars} columns, got {points.shape[-1]}")
    tables = _power_tables(lib, points)
    exps = lib.exponents
    out = np.ones(points.shape[:-1] + (lib.size,), dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        for v in range(lib.n_vars):
            col = exps[:, v]
            if col.any():
                out *= tables[..., v, :][..., col]
    return out


def features_vjp(lib: PolynomialLibrary, phi: np.ndarray, grad_phi: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. feature values back onto the evaluation point.

    ``phi`` are the already-evaluated features (..., P). Uses
    d(term_j)/dx_v = e_jv * term(j with e_v - 1), which is always in the library.
    """
    exps = lib.exponents
    down = lib._down
    out = np.empty(phi.shape[:-1] + (lib.n_vars,), dtype=float)
    for v in range(lib.n_vars):
        out[..., v] = np.einsum("...p,...p->...", grad_phi * exps[:, v], phi[..., down[:, v]])
    return out


def jacobian(lib: PolynomialLibrary, points) -> np.ndarray:
    """Partial derivatives of every term, shape (..., P, n_vars)."""
    phi = evaluate(lib, points)
    return phi[..., lib._down] * lib.exponents


@dataclass(frozen=True)
class CoefficientMatrix:
    """Rows are states, columns are library terms in canonical order."""

    library: PolynomialLibrary
    values: np.ndarray
    state_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != self.library.size:
            raise ValueError(
                f"values must have shape (n_states, {self.library.size}), got {values.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not self.state_names:
            object.__setattr__(
                self, "state_names", tuple(self.library.var_names[: values.shape[0]])
            )

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def support(self) -> frozenset[tuple[int, int]]:
        rows, cols = np.nonzero(self.values)
        return frozenset(zip(rows.tolist(), cols.tolist()))

    @property
    def sparsity(self) -> int:
        return int(np.count_nonzero(self.values))

    def nonlinear_entries(self) -> int:
        """Number of nonzero entries on monomials of total degree >= 2."""
        return int(np.count_nonzero(self.values[:, self.library.degrees >= 2]))

    @classmethod
    def zeros(cls, library: PolynomialLibrary, n_states: int) -> "CoefficientMatrix":
        return cls(library, np.zeros((n_states, library.size)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["state"] + self.library.term_names())
        for name, row in zip(self.state_names, self.values):
            writer.writerow([name] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, library: PolynomialLibrary) -> "CoefficientMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        if header[1:] != library.term_names():
            raise ValueError("CSV header does not match library term order")
        names = tuple(r[0] for r in body)
        values = np.array([[float(v) for v in r[1:]] for r in body])
        return cls(library, values, names)


def rhs_from_coefficients(coeffs: CoefficientMatrix):
    """Vector field f(x, u, t) = values @ phi([x, u]).

    Inputs are appended to the state only when the library has room for them.
    """
    lib = coeffs.library
    values = coeffs.values
    n = coeffs.n_states

    def field_fn(x, u=None, t=0.0):
        x = np.asarray(x, dtype=float)
        if lib.n_vars > n:
            u = np.zeros(lib.n_vars - n) if u is None else np.asarray(u, dtype=float)
            point = np.concatenate([x, u], axis=-1)
        else:
            point = x
        return evaluate(lib, point) @ values.T

    return field_fn


def finite_difference_derivatives(traj) -> np.ndarray:
    """Second-order accurate time derivatives of ``traj.states``.

    Central differences in the interior, one-sided second-order stencils at
    the two ends.
    """
    if len(traj.times) < 3:
        raise TrajectoryTooShort("finite differences need at least 3 samples")
    return np.gradient(traj.states, traj.h, axis=0, edge_order=2)
