"""Coupling algebra for the mismatched-dimension FBSDE.

Hosts the full-rank m x n matrix G, the projectors it induces, the triple
bracket, the monotonicity functionals F(t,u) = (-G* f, G b, 0) and
H(t,u) = (0, 0, G sigma), the QV-weighted bracket, and the conversion between
the martingale-driven and chain-driven coefficient forms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chain import ChainModel

MAX_CONDITION = 1e8


class RankError(ValueError):
    """G is rank-deficient or too ill-conditioned for the construction."""


class GStructure:
    """Full-rank m x n coupling matrix with cached inverse factors.

    For n <= m caches (G*G)^-1 and the column-space projector
    P = G (G*G)^-1 G*; for n > m caches (GG*)^-1 and the row-space projector
    P' = G* (GG*)^-1 G.  Construction refuses condition numbers above 1e8:
    near-singular G poisons the Riccati assembly.
    """

    def __init__(self, G):
        g = np.atleast_2d(np.asarray(G, dtype=float))
        if not np.all(np.isfinite(g)):
            raise RankError("G contains NaN/Inf entries")
        self.G = g
        self.m, self.n = g.shape
        svals = np.linalg.svd(g, compute_uv=False)
        if svals[-1] <= 1e-10 * svals[0]:
            raise RankError(
                f"G is numerically rank-deficient (sigma_min/sigma_max = "
                f"{svals[-1] / svals[0]:.3g})"
            )
        self.condition = float(svals[0] / svals[-1])
        if self.condition > MAX_CONDITION:
            raise RankError(
                f"condition number {self.condition:.3g} exceeds {MAX_CONDITION:g}"
            )
        self.case = "CASE_N_LE_M" if self.n <= self.m else "CASE_N_GT_M"
        if self.n <= self.m:
            self.gram = g.T @ g                       # G*G, n x n, SPD
            self.gram_inv = np.linalg.inv(self.gram)
            self.lift = g @ self.gram_inv             # G (G*G)^-1, m x n
            self.projector = self.lift @ g.T          # onto col(G), m x m
        else:
            self.gram = g @ g.T                       # GG*, m x m, SPD
            self.gram_inv = np.linalg.inv(self.gram)
            self.lift = g.T @ self.gram_inv           # G* (GG*)^-1, n x m
            self.projector = self.lift @ g            # onto row(G), n x n

    @property
    def complement(self) -> np.ndarray:
        """I - P on the projector's space."""
        return np.eye(self.projector.shape[0]) - self.projector

    def check_projector(self, tol: float = 1e-10) -> float:
        p = self.projector
        drift = max(
            float(np.linalg.norm(p @ p - p)),
            float(np.linalg.norm(p - p.T)),
        )
        if drift > tol:
            raise RankError(f"projector drift {drift:.3g} exceeds {tol:g}")
        return drift


@dataclass(frozen=True)
class TripleVector:
    """One point u = (x, y, z) in R^n x R^m x R^(m x d)."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    @staticmethod
    def of(x, y, z) -> "TripleVector":
        return TripleVector(
            np.atleast_1d(np.asarray(x, dtype=float)),
            np.atleast_1d(np.asarray(y, dtype=float)),
            np.atleast_2d(np.asarray(z, dtype=float)),
        )

    def __add__(self, other: "TripleVector") -> "TripleVector":
        return TripleVector(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "TripleVector") -> "TripleVector":
        return TripleVector(self.x - other.x, self.y - other.y, self.z - other.z)

    def scale(self, c: float) -> "TripleVector":
        return TripleVector(c * self.x, c * self.y, c * self.z)


def bracket(u1: TripleVector, u2: TripleVector) -> float:
    """[u1, u2] = (x1, x2) + (y1, y2) + tr(z1 z2*)."""
    if u1.x.shape != u2.x.shape or u1.y.shape != u2.y.shape \
            or u1.z.shape != u2.z.shape:
        raise ValueError("triple dimensions do not match")
    return float(u1.x @ u2.x + u1.y @ u2.y + np.sum(u1.z * u2.z))


def triple_norm_sq(u: TripleVector) -> float:
    return bracket(u, u)


@dataclass
class CoefficientSet:
    """The problem data b, sigma, f, Phi with their dimensions.

    Call conventions (all Markovian in the chain state):
        b(t, state, x, y, z)     -> (n,)
        sigma(t, state, x, y, z) -> (n, d)
        f(t, state, x, y, z)     -> (m,)
        phi(state, x)            -> (m,)
    with ``state`` a 0-based index.  Every callable must also accept leading
    node axes (x: (k, n), y: (k, m), z: (k, m, d)) and broadcast over them;
    the solvers evaluate per (time, state) group in vectorised form.
    """

    n: int
    m: int
    d: int
    b: Callable
    sigma: Callable
    f: Callable
    phi: Callable
    name: str = ""

    def check_dimensions(self, t: float = 0.0, state: int = 0) -> None:
        x = np.zeros(self.n)
        y = np.zeros(self.m)
        z = np.zeros((self.m, self.d))
        shapes = {
            "b": (np.asarray(self.b(t, state, x, y, z)).shape, (self.n,)),
            "sigma": (np.asarray(self.sigma(t, state, x, y, z)).shape,
                      (self.n, self.d)),
            "f": (np.asarray(self.f(t, state, x, y, z)).shape, (self.m,)),
            "phi": (np.asarray(self.phi(state, x)).shape, (self.m,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} returned shape {got}, expected {want}")
        for name in ("b", "sigma", "f"):
            out = np.asarray(getattr(self, name)(t, state, x, y, z))
            if not np.all(np.isfinite(out)):
                raise ValueError(f"{name} returned non-finite values at zero")


def eval_F(coeffs: CoefficientSet, g: GStructure, t: float, state: int,
           u: TripleVector) -> TripleVector:
    """Drift-side monotonicity functional F = (-G* f, G b, 0)."""
    fval = np.asarray(coeffs.f(t, state, u.x, u.y, u.z), dtype=float)
    bval = np.asarray(coeffs.b(t, state, u.x, u.y, u.z), dtype=float)
    return TripleVector(
        -g.G.T @ fval,
        g.G @ bval,
        np.zeros((coeffs.m, coeffs.d)),
    )


def eval_H(coeffs: CoefficientSet, g: GStructure, t: float, state: int,
           u: TripleVector) -> TripleVector:
    """Jump-side monotonicity functional H = (0, 0, G sigma), column-wise."""
    sval = np.asarray(coeffs.sigma(t, state, u.x, u.y, u.z), dtype=float)
    return TripleVector(
        np.zeros(coeffs.n),
        np.zeros(coeffs.m),
        g.G @ sval,
    )


def weighted_bracket(C, D, Q, tol: float = 1e-10) -> float:
    """<C, D>_V = tr(C Q D*) for a symmetric PSD weight Q.

    Q is symmetrised before an eigenvalue check; eigenvalues below -tol are
    rejected.  With Q = qv_density(state) this is the state-weighted bracket
    the uniqueness computation integrates against d<M,M>.
    """
    c = np.atleast_2d(np.asarray(C, dtype=float))
    dmat = np.atleast_2d(np.asarray(D, dtype=float))
    q = np.asarray(Q, dtype=float)
    q = 0.5 * (q + q.T)
    w = np.linalg.eigvalsh(q)
    if w.min() < -tol * max(1.0, w.max(), 1.0):
        raise ValueError(f"weight matrix is not PSD (min eigenvalue {w.min():.3g})")
    return float(np.trace(c @ q @ dmat.T))


def to_chain_driven(coeffs: CoefficientSet, model: ChainModel) -> CoefficientSet:
    """Convert (b, sigma, f, Phi) to the chain-driven form (b**, sigma, f**, Phi).

    b** = b - sigma A e_state and f** = f + z A e_state: simulating the
    original system against dM is node-for-node identical to simulating the
    converted system against dm = d(state indicator) on the same tree.
    """

    def b_star(t, state, x, y, z):
        a = model.rate_matrix(t)
        drift = np.asarray(coeffs.b(t, state, x, y, z), dtype=float)
        s = np.asarray(coeffs.sigma(t, state, x, y, z), dtype=float)
        return drift - s @ a[:, state]

    def f_star(t, state, x, y, z):
        a = model.rate_matrix(t)
        drv = np.asarray(coeffs.f(t, state, x, y, z), dtype=float)
        zz = np.asarray(z, dtype=float)
        return drv + zz @ a[:, state]

    return CoefficientSet(
        n=coeffs.n, m=coeffs.m, d=coeffs.d,
        b=b_star, sigma=coeffs.sigma, f=f_star, phi=coeffs.phi,
        name=coeffs.name + "**" if coeffs.name else "**",
    )
