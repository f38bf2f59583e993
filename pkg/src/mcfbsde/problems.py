"""Builtin problem library.

Every acceptance run starts from one of these named problems instead of
hand-written expressions.  All builtins satisfy the relevant monotonicity
conditions by construction; "scalar-monotone" is tuned so every margin is
exactly zero, which is what makes the estimated constants land at 1.

Coefficient callables follow the CoefficientSet convention and broadcast
over a leading node axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algebra import CoefficientSet, GStructure
from .chain import DiscreteChainTree
from .fields import Forcing
from .linear_fbsde import THM2, THM3
from .solver import FBSDEProblem

BUILTIN_NAMES = ("zero", "linear-affine", "scalar-monotone", "two-dim-G",
                 "thm3-mirror")


@dataclass
class BuiltinProblem:
    name: str
    n: int
    m: int
    G: np.ndarray
    mode: str
    c2: float
    c2p: float
    coeffs: CoefficientSet
    x0: np.ndarray
    c3: float                      # terminal monotonicity constant, for tests
    description: str = ""


def _zero(d: int) -> BuiltinProblem:
    coeffs = CoefficientSet(
        n=1, m=1, d=d,
        b=lambda t, s, x, y, z: np.zeros_like(x),
        sigma=lambda t, s, x, y, z: np.zeros_like(z),
        f=lambda t, s, x, y, z: np.zeros_like(y),
        phi=lambda s, x: np.zeros_like(x),
        name="zero",
    )
    return BuiltinProblem("zero", 1, 1, np.array([[1.0]]), THM2, 1.0, 1.0,
                          coeffs, np.zeros(1), c3=1.0,
                          description="all coefficients vanish")


def _scalar_monotone(d: int) -> BuiltinProblem:
    coeffs = CoefficientSet(
        n=1, m=1, d=d,
        b=lambda t, s, x, y, z: -y,
        sigma=lambda t, s, x, y, z: -z,
        f=lambda t, s, x, y, z: x,
        phi=lambda s, x: x,
        name="scalar-monotone",
    )
    return BuiltinProblem(
        "scalar-monotone", 1, 1, np.array([[1.0]]), THM2, 1.0, 1.0,
        coeffs, np.array([1.0]), c3=1.0,
        description="n=m=1, G=1, f=x, b=-y, sigma=-z, Phi=x; zero margins",
    )


def _thm3_mirror(d: int) -> BuiltinProblem:
    c2p = 0.8
    coeffs = CoefficientSet(
        n=1, m=1, d=d,
        b=lambda t, s, x, y, z: c2p * y,
        sigma=lambda t, s, x, y, z: c2p * z,
        f=lambda t, s, x, y, z: -x,
        phi=lambda s, x: -x,
        name="thm3-mirror",
    )
    # c2p below c2 keeps the flipped-sign linear solves away from the
    # equilibrium where the lam = 1 seed problem degenerates
    return BuiltinProblem(
        "thm3-mirror", 1, 1, np.array([[1.0]]), THM3, 1.0, c2p,
        coeffs, np.array([1.0]), c3=1.0,
        description="sign-flipped scalar problem for the second theorem",
    )


def _two_dim_g(d: int) -> BuiltinProblem:
    G = np.array([[1.0], [1.0]])
    off = np.array([0.3, -0.3])      # off-range(G) driver component
    toff = np.array([0.5, -0.5])     # off-range(G) terminal component
    coeffs = CoefficientSet(
        n=1, m=2, d=d,
        b=lambda t, s, x, y, z: -(y @ G),
        sigma=lambda t, s, x, y, z: -np.einsum("nm,...md->...nd", G.T, z),
        f=lambda t, s, x, y, z: x @ G.T + off,
        phi=lambda s, x: x @ G.T + toff,
        name="two-dim-G",
    )
    return BuiltinProblem(
        "two-dim-G", 1, 2, G, THM2, 1.0, 1.0, coeffs, np.array([0.5]),
        c3=1.0,
        description="n=1, m=2, G=(1,1)*; forcing leaves range(G), so the "
                    "projected remainder is exercised",
    )


def _linear_affine(d: int, seed: int = 7) -> BuiltinProblem:
    """Random affine problem with monotone signs, mirrored from the linear
    family: b = -c2' G* y + b0(t,s), sigma = -c2' G* z + s0(t,s),
    f = c2 G x + f0(t,s), Phi = c3 G x + p0(s)."""
    rng = np.random.default_rng(seed)
    n = m = 2
    theta1, theta2 = rng.uniform(0.0, np.pi, size=2)
    r1 = np.array([[np.cos(theta1), -np.sin(theta1)],
                   [np.sin(theta1), np.cos(theta1)]])
    r2 = np.array([[np.cos(theta2), -np.sin(theta2)],
                   [np.sin(theta2), np.cos(theta2)]])
    G = r1 @ np.diag(rng.uniform(0.8, 1.5, size=2)) @ r2
    c2, c2p, c3 = rng.uniform(0.6, 1.4, size=3)
    b0 = rng.uniform(-0.5, 0.5, size=(d, n))
    s0 = rng.uniform(-0.3, 0.3, size=(d, n, d))
    f0 = rng.uniform(-0.5, 0.5, size=(d, m))
    p0 = rng.uniform(-0.5, 0.5, size=(d, m))
    x0 = rng.uniform(-1.0, 1.0, size=n)

    def b(t, s, x, y, z):
        return -c2p * (y @ G) + b0[s] * (1.0 + 0.3 * np.sin(t))

    def sigma(t, s, x, y, z):
        return (-c2p * np.einsum("nm,...md->...nd", G.T, z)
                + s0[s] * (1.0 + 0.2 * np.cos(t)))

    def f(t, s, x, y, z):
        return c2 * (x @ G.T) + f0[s] * (1.0 + 0.3 * np.sin(2.0 * t))

    def phi(s, x):
        return c3 * (x @ G.T) + p0[s]

    coeffs = CoefficientSet(n=n, m=m, d=d, b=b, sigma=sigma, f=f, phi=phi,
                            name=f"linear-affine(seed={seed})")
    return BuiltinProblem("linear-affine", n, m, G, THM2, float(c2),
                          float(c2p), coeffs, x0, c3=float(c3),
                          description="seeded random affine data with "
                                      "monotone signs")


def get_builtin(name: str, d: int, seed: int = 7) -> BuiltinProblem:
    if name == "zero":
        return _zero(d)
    if name == "scalar-monotone":
        return _scalar_monotone(d)
    if name == "thm3-mirror":
        return _thm3_mirror(d)
    if name == "two-dim-G":
        return _two_dim_g(d)
    if name == "linear-affine":
        return _linear_affine(d, seed)
    raise KeyError(f"unknown builtin {name!r}; have {', '.join(BUILTIN_NAMES)}")


def make_problem(builtin: BuiltinProblem, tree: DiscreteChainTree,
                 forcing: Forcing | None = None,
                 x0: np.ndarray | None = None) -> FBSDEProblem:
    return FBSDEProblem(
        coeffs=builtin.coeffs,
        g=GStructure(builtin.G),
        x0=builtin.x0 if x0 is None else np.asarray(x0, dtype=float),
        mode=builtin.mode,
        c2=builtin.c2,
        c2p=builtin.c2p,
        tree=tree,
        forcing=forcing,
    )
