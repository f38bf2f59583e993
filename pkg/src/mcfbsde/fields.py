"""Tree-indexed solution triples and exterior forcing.

A SolutionField stores (X, Y, Z) per tree node, level by level: X[k] has
shape (d^k, n), Y[k] shape (d^k, m), and Z[k] shape (d^k, m, d) for k < N
(leaves carry no representation matrix).  Z is always the canonical centered
representative produced by the exact martingale representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chain import DiscreteChainTree


class SolutionField:
    def __init__(self, tree: DiscreteChainTree, X: list, Y: list, Z: list):
        self.tree = tree
        self.X = X
        self.Y = Y
        self.Z = Z
        self.n = X[0].shape[1]
        self.m = Y[0].shape[1]

    @classmethod
    def zeros(cls, tree: DiscreteChainTree, n: int, m: int) -> "SolutionField":
        X = [np.zeros((tree.n_nodes(k), n)) for k in range(tree.N + 1)]
        Y = [np.zeros((tree.n_nodes(k), m)) for k in range(tree.N + 1)]
        Z = [np.zeros((tree.n_nodes(k), m, tree.d)) for k in range(tree.N)]
        return cls(tree, X, Y, Z)

    @classmethod
    def random(cls, tree: DiscreteChainTree, n: int, m: int, seed: int,
               scale: float = 1.0) -> "SolutionField":
        rng = np.random.default_rng(seed)
        f = cls.zeros(tree, n, m)
        for k in range(tree.N + 1):
            f.X[k] = scale * rng.standard_normal(f.X[k].shape)
            f.Y[k] = scale * rng.standard_normal(f.Y[k].shape)
            if k < tree.N:
                f.Z[k] = scale * rng.standard_normal(f.Z[k].shape)
        return f

    def copy(self) -> "SolutionField":
        return SolutionField(
            self.tree,
            [x.copy() for x in self.X],
            [y.copy() for y in self.Y],
            [z.copy() for z in self.Z],
        )

    def axpy(self, alpha: float, other: "SolutionField") -> "SolutionField":
        """self + alpha * other, as a new field."""
        return SolutionField(
            self.tree,
            [x + alpha * ox for x, ox in zip(self.X, other.X)],
            [y + alpha * oy for y, oy in zip(self.Y, other.Y)],
            [z + alpha * oz for z, oz in zip(self.Z, other.Z)],
        )

    def __sub__(self, other: "SolutionField") -> "SolutionField":
        return self.axpy(-1.0, other)

    def sup_distance(self, other: "SolutionField") -> float:
        worst = 0.0
        for k in range(self.tree.N + 1):
            worst = max(worst, float(np.abs(self.X[k] - other.X[k]).max()),
                        float(np.abs(self.Y[k] - other.Y[k]).max()))
            if k < self.tree.N:
                worst = max(worst, float(np.abs(self.Z[k] - other.Z[k]).max()))
        return worst

    def canonicalize_z(self) -> "SolutionField":
        """Project every Z onto the canonical centered representative.

        Z is unique only up to additions w 1* that annihilate dM; the
        canonical representative has probability-weighted column sums zero,
        matching what the exact martingale representation produces.  The
        projection changes no Z dM action, hence no discrete equation.
        """
        for k in range(self.tree.N):
            p = self.tree.edge_probs(k)
            mean = np.einsum("vmd,vd->vm", self.Z[k], p)
            self.Z[k] = self.Z[k] - mean[:, :, None]
        return self

    def mean_trajectory(self):
        """Exact tree expectations (E[X_t], E[Y_t]) per grid time."""
        ex = np.stack([self.tree.expectation(k, self.X[k])
                       for k in range(self.tree.N + 1)])
        ey = np.stack([self.tree.expectation(k, self.Y[k])
                       for k in range(self.tree.N + 1)])
        return ex, ey


@dataclass
class Forcing:
    """Exterior forcing (phi, psi, gamma) plus terminal offset xi.

    phi(t, state) -> (n,), psi(t, state) -> (n, d), gamma(t, state) -> (m,),
    xi(state) -> (m,); ``state`` is 0-based.
    """

    phi: Callable
    psi: Callable
    gamma: Callable
    xi: Callable

    @staticmethod
    def zero(n: int, m: int, d: int) -> "Forcing":
        return Forcing(
            phi=lambda t, s: np.zeros(n),
            psi=lambda t, s: np.zeros((n, d)),
            gamma=lambda t, s: np.zeros(m),
            xi=lambda s: np.zeros(m),
        )

    def tables(self, tree: DiscreteChainTree, n: int, m: int):
        """Evaluate on the (time, state) grid once: (N, d, ...) arrays."""
        N, d = tree.N, tree.d
        phi = np.zeros((N, d, n))
        psi = np.zeros((N, d, n, d))
        gam = np.zeros((N, d, m))
        xi = np.zeros((d, m))
        for k in range(N):
            t = tree.times[k]
            for s in range(d):
                phi[k, s] = np.asarray(self.phi(t, s), dtype=float)
                psi[k, s] = np.asarray(self.psi(t, s), dtype=float)
                gam[k, s] = np.asarray(self.gamma(t, s), dtype=float)
        for s in range(d):
            xi[s] = np.asarray(self.xi(s), dtype=float)
        return phi, psi, gam, xi
