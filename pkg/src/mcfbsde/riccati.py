"""Backward integration of the two symmetric matrix Riccati ODEs.

CASE_N_LE_M:  -Kdot = -c2' K^2 + c2 G*G   on S^n,  K(T) = lambda G*G
CASE_N_GT_M:  -Kdot =  c2 I_m - c2' K GG* K  on S^m,  K(T) = lambda I_m

Fixed-step classical RK4 on the grid shared with the tree solvers, with
symmetrisation each step and PSD certification of every grid value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algebra import GStructure

CASE_N_LE_M = "CASE_N_LE_M"
CASE_N_GT_M = "CASE_N_GT_M"

BLOWUP_NORM = 1e12


class RiccatiBlowupError(RuntimeError):
    """Solution norm exceeded the blow-up threshold during integration."""


class PSDViolationError(RuntimeError):
    """Certified PSD invariant failed at some grid time."""


@dataclass
class RiccatiProblem:
    variant: str
    c2: float
    c2p: float
    g: GStructure
    lam: float
    T: float
    N: int

    def __post_init__(self):
        if self.variant not in (CASE_N_LE_M, CASE_N_GT_M):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.c2 <= 0 or self.c2p <= 0:
            raise ValueError("c2 and c2' must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.N < 1:
            raise ValueError("need at least one grid step")

    @property
    def dim(self) -> int:
        return self.g.n if self.variant == CASE_N_LE_M else self.g.m

    def terminal(self) -> np.ndarray:
        if self.variant == CASE_N_LE_M:
            return self.lam * (self.g.G.T @ self.g.G)
        return self.lam * np.eye(self.g.m)

    def rhs(self, K: np.ndarray) -> np.ndarray:
        """Right-hand side R(K) of -Kdot = R(K)."""
        if self.variant == CASE_N_LE_M:
            return -self.c2p * K @ K + self.c2 * (self.g.G.T @ self.g.G)
        gg = self.g.G @ self.g.G.T
        return self.c2 * np.eye(self.g.m) - self.c2p * K @ gg @ K


@dataclass
class RiccatiSolution:
    problem: RiccatiProblem
    times: np.ndarray            # (N+1,)
    K: np.ndarray                # (N+1, dim, dim), K[k] = K(t_k)

    def at(self, k: int) -> np.ndarray:
        return self.K[k]

    def min_eigenvalue(self) -> float:
        return float(min(np.linalg.eigvalsh(Kk).min() for Kk in self.K))

    def symmetry_defect(self) -> float:
        return float(max(np.linalg.norm(Kk - Kk.T) for Kk in self.K))


def solve_riccati(problem: RiccatiProblem, psd_tol: float = 1e-10) -> RiccatiSolution:
    """Integrate backward from T with classical RK4 on a fixed grid.

    K is symmetrised after every step (suppresses drift out of S^n), the
    Frobenius norm is watched for blow-up, and the PSD invariant is certified
    at every grid point; violations report the first offending time.
    """
    N = problem.N
    dt = problem.T / N
    dim = problem.dim
    K = np.empty((N + 1, dim, dim))
    K[N] = problem.terminal()
    # march tau = T - t forward; dK/dtau = R(K)
    for j in range(N, 0, -1):
        K[j - 1] = _rk4_step(problem.rhs, K[j], dt)
        K[j - 1] = 0.5 * (K[j - 1] + K[j - 1].T)
        if np.linalg.norm(K[j - 1]) > BLOWUP_NORM:
            raise RiccatiBlowupError(
                f"|K| exceeded {BLOWUP_NORM:g} at t = {problem.T * (j - 1) / N:.6g}"
            )
    times = np.linspace(0.0, problem.T, N + 1)
    for k in range(N + 1):
        w = np.linalg.eigvalsh(K[k])
        if w.min() < -psd_tol:
            raise PSDViolationError(
                f"K(t={times[k]:.6g}) has eigenvalue {w.min():.3g} < -{psd_tol:g}"
            )
    return RiccatiSolution(problem, times, K)


def _rk4_step(rhs, K, dt):
    k1 = rhs(K)
    k2 = rhs(K + 0.5 * dt * k1)
    k3 = rhs(K + 0.5 * dt * k2)
    k4 = rhs(K + dt * k3)
    return K + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def riccati_residual(solution: RiccatiSolution, problem: RiccatiProblem) -> float:
    """Max ODE defect |Kdot_fd + R(K)|_F over interior grid points.

    Kdot is approximated by centered differences, so the defect of the RK4
    solution is dominated by the O(dt^2) finite-difference truncation and
    shrinks by about 4x per dt halving.
    """
    K = solution.K
    N = problem.N
    dt = problem.T / N
    worst = 0.0
    for k in range(1, N):
        kdot = (K[k + 1] - K[k - 1]) / (2.0 * dt)
        worst = max(worst, float(np.linalg.norm(kdot + problem.rhs(K[k]))))
    return worst
