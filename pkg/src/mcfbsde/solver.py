"""Fully coupled FBSDE solver on the chain tree.

The continuation family at coupling level l in [0, 1] (THM2 signs; THM3
flips the linear-part signs):

    dX = [(1-l) c2' (-G*Y) + l b(t,U) + phi] dt
       + [(1-l) c2' (-G*Z) + l sigma(t,U) + psi] dM
   -dY = [(1-l) c2 G X + l f(t,U) + gamma] dt - Z dM
    Y_T = l Phi(X_T) + (1-l) G X_T + xi

Level l = 0 is the linear seed problem (solved in closed form by
linear_fbsde with lam = 1); l = 1 with zero exterior forcing is the target
equation.  Each level is solved by damped Picard decoupling sweeps warm
started from the previous level: one sweep runs the forward recursion with
(Y, Z) frozen, then the backward recursion with the fresh X.  The undamped
sweep map has negative real spectrum on monotone problems and can have
spectral radius above one at desk-scale horizons, so the level iteration
averages consecutive sweeps (relaxation weight ``damping``); the damped map
has the same fixed points and contracts whenever the sweep spectrum lies in
(-2/w + 1, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .algebra import CoefficientSet, GStructure
from .chain import DiscreteChainTree
from .fields import Forcing, SolutionField
from .linear_fbsde import (THM2, THM3, LinearFBSDEProblem, mode_sign,
                           solve_linear)


class CoefficientError(RuntimeError):
    """User coefficients produced NaN/Inf during a sweep."""


class InnerFixedPointError(RuntimeError):
    """Per-node implicit Y iteration failed; dt is too large for the driver's
    Lipschitz constant."""


class MaxSweepsError(RuntimeError):
    def __init__(self, message: str, stats: "LevelStats"):
        super().__init__(message)
        self.stats = stats


class ContinuationError(RuntimeError):
    """delta_min reached without level convergence.  The problem likely
    violates the monotonicity conditions; run verify.check_monotonicity."""


class ResidualError(RuntimeError):
    """Converged field failed the final residual check."""


@dataclass
class FBSDEProblem:
    coeffs: CoefficientSet
    g: GStructure
    x0: np.ndarray
    mode: str
    c2: float
    c2p: float
    tree: DiscreteChainTree
    forcing: Optional[Forcing] = None

    def __post_init__(self):
        mode_sign(self.mode)
        if self.c2 <= 0 or self.c2p <= 0:
            raise ValueError("c2 and c2' must be positive")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.g.n,):
            raise ValueError(f"x0 shape {self.x0.shape} != ({self.g.n},)")
        if (self.coeffs.n, self.coeffs.m) != (self.g.n, self.g.m):
            raise ValueError("coefficient dimensions do not match G")
        if self.coeffs.d != self.tree.d:
            raise ValueError("coefficient d does not match the tree")
        if self.forcing is None:
            self.forcing = Forcing.zero(self.g.n, self.g.m, self.tree.d)
        self.coeffs.check_dimensions()

    @property
    def n(self) -> int:
        return self.g.n

    @property
    def m(self) -> int:
        return self.g.m


@dataclass
class ContinuationConfig:
    delta: float = 0.5
    delta_min: float = 1.0 / 64.0
    growth: float = 2.0
    shrink: float = 0.5
    tol: float = 1e-11                  # on sqrt(contraction_norm) of sweep diffs
    max_sweeps: int = 1500
    damping: float = 0.5
    min_damping: float = 1.0 / 16.0
    fast_sweeps: int = 6                # grow delta when a level needs fewer
    weight_mode: str = "trace"          # scalarisation of d<M,M>: trace|max_eig
    residual_tol: float = 1e-8
    inner_tol: float = 1e-12
    inner_max_iter: int = 50

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if not 0.0 < self.delta_min <= self.delta:
            raise ValueError("need 0 < delta_min <= delta")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.weight_mode not in ("trace", "max_eig"):
            raise ValueError("weight_mode must be 'trace' or 'max_eig'")


@dataclass
class LevelStats:
    level: float
    sweeps: int = 0
    diff_norms: list = dc_field(default_factory=list)
    ratios: list = dc_field(default_factory=list)
    damping: float = 0.5
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "sweeps": self.sweeps,
            "diff_norms": list(map(float, self.diff_norms)),
            "ratios": list(map(float, self.ratios)),
            "damping": self.damping,
            "converged": self.converged,
        }


@dataclass
class ConvergenceReport:
    levels: list = dc_field(default_factory=list)
    delta_history: list = dc_field(default_factory=list)   # (l, delta, accepted)
    final_residual: float = float("nan")
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "levels": [s.to_dict() for s in self.levels],
            "delta_history": [
                {"level": l, "delta": d, "accepted": a}
                for (l, d, a) in self.delta_history
            ],
            "final_residual": float(self.final_residual),
            "converged": self.converged,
        }


# -- one decoupling sweep -----------------------------------------------------


def _state_groups(tree: DiscreteChainTree, level: int):
    states = tree.states[level]
    if level == 0:
        yield tree.root_state, np.array([0])
        return
    for s in range(tree.d):
        yield s, np.flatnonzero(states == s)


def _forcing_tables(problem: FBSDEProblem):
    return problem.forcing.tables(problem.tree, problem.n, problem.m)


def picard_sweep(problem: FBSDEProblem, l: float, current: SolutionField,
                 inner_tol: float = 1e-12, inner_max_iter: int = 50,
                 _tables=None) -> SolutionField:
    """One decoupling iteration at coupling level l.

    Forward recursion for X with (Y, Z) frozen at ``current``, then backward
    recursion for (Y, Z) with the fresh X: Z from the exact martingale
    representation of next-level Y, and the per-node Y implicit in the
    driver, solved by a damped inner fixed point.
    """
    if not 0.0 <= l <= 1.0:
        raise ValueError("coupling level must lie in [0, 1]")
    tree = problem.tree
    g = problem.g
    sign = mode_sign(problem.mode)
    n, m, d, N = problem.n, problem.m, tree.d, tree.N
    dt = tree.dt
    G = g.G
    phi_t, psi_t, gam_t, xi_t = _tables or _forcing_tables(problem)
    out = SolutionField.zeros(tree, n, m)

    # forward pass: X from frozen (Y, Z)
    out.X[0][0] = problem.x0
    for k in range(N):
        t = tree.times[k]
        Y, Z = current.Y[k], current.Z[k]
        drift = np.empty((tree.n_nodes(k), n))
        diffusion = np.empty((tree.n_nodes(k), n, d))
        lin_drift = -sign * problem.c2p * (Y @ G)
        lin_diff = -sign * problem.c2p * np.einsum("nm,vmd->vnd", G.T, Z)
        for s, idx in _state_groups(tree, k):
            drift[idx] = (1.0 - l) * lin_drift[idx] + phi_t[k, s]
            diffusion[idx] = (1.0 - l) * lin_diff[idx] + psi_t[k, s]
            if l > 0.0:
                xg, yg, zg = out.X[k][idx], Y[idx], Z[idx]
                drift[idx] += l * np.asarray(problem.coeffs.b(t, s, xg, yg, zg))
                diffusion[idx] += l * np.asarray(
                    problem.coeffs.sigma(t, s, xg, yg, zg))
        inc = np.einsum("vnw,viw->vin", diffusion, tree.edge_dm(k))
        out.X[k + 1] = (out.X[k][:, None, :] + dt * drift[:, None, :]
                        + inc).reshape(-1, n)
        if not np.all(np.isfinite(out.X[k + 1])):
            raise CoefficientError(
                f"forward coefficients produced NaN/Inf at t={t:.6g}")

    # terminal values from the fresh X
    leaves = tree.states[N]
    YN = (1.0 - l) * (out.X[N] @ G.T) + xi_t[leaves]
    if l > 0.0:
        for s, idx in _state_groups(tree, N):
            YN[idx] += l * np.asarray(problem.coeffs.phi(s, out.X[N][idx]))
    if not np.all(np.isfinite(YN)):
        raise CoefficientError("terminal map produced NaN/Inf")
    out.Y[N] = YN

    # backward pass: representation Z, then implicit Y per node
    for k in range(N - 1, -1, -1):
        t = tree.times[k]
        mean, out.Z[k] = tree.represent(k, out.Y[k + 1])
        lin = sign * problem.c2 * (out.X[k] @ G.T)
        ycur = mean.copy()
        if l == 0.0:
            for s, idx in _state_groups(tree, k):
                ycur[idx] = mean[idx] + dt * ((1.0 - l) * lin[idx] + gam_t[k, s])
        else:
            omega = 1.0
            prev_delta = None
            for it in range(inner_max_iter):
                ynew = np.empty_like(ycur)
                for s, idx in _state_groups(tree, k):
                    drv = ((1.0 - l) * lin[idx]
                           + l * np.asarray(problem.coeffs.f(
                               t, s, out.X[k][idx], ycur[idx], out.Z[k][idx]))
                           + gam_t[k, s])
                    ynew[idx] = mean[idx] + dt * drv
                delta = float(np.abs(ynew - ycur).max())
                ycur = ycur + omega * (ynew - ycur)
                if delta <= inner_tol:
                    break
                if prev_delta is not None and delta > prev_delta and omega > 1.0 / 32.0:
                    omega *= 0.5
                prev_delta = delta
            else:
                raise InnerFixedPointError(
                    f"implicit Y did not converge at level t={t:.6g} "
                    f"(last delta {delta:.3g}); dt is too large for the "
                    "driver's Lipschitz constant"
                )
        out.Y[k] = ycur
    return out


# -- norms and residuals --------------------------------------------------------


def contraction_norm(delta_field: SolutionField, tree: DiscreteChainTree,
                     weight_mode: str = "trace") -> float:
    """The continuation proof's squared norm of a field difference:

        E int |u|^2 ds  +  E int |u|^2 w(t, state) ds  +  E |x_T|^2

    with |u|^2 = |x|^2 + |y|^2 + |z|_F^2 and w the scalarisation of the
    matrix measure d<M,M> (trace of Q by default, max eigenvalue optional).
    """
    total = 0.0
    for k in range(tree.N):
        usq = (np.sum(delta_field.X[k] ** 2, axis=1)
               + np.sum(delta_field.Y[k] ** 2, axis=1)
               + np.sum(delta_field.Z[k] ** 2, axis=(1, 2)))
        q = tree.qv_at(k)
        if weight_mode == "trace":
            w = np.trace(q, axis1=1, axis2=2)
        else:
            w = np.linalg.eigvalsh(q)[:, -1]
        total += tree.dt * float(tree.node_probs[k] @ (usq * (1.0 + w)))
    xt = np.sum(delta_field.X[tree.N] ** 2, axis=1)
    total += float(tree.node_probs[tree.N] @ xt)
    return total


def contraction_metric(delta_field: SolutionField, tree: DiscreteChainTree,
                       weight_mode: str = "trace") -> float:
    """Square root of contraction_norm; the scale tolerances compare against."""
    return float(np.sqrt(contraction_norm(delta_field, tree, weight_mode)))


def solution_residual(fld: SolutionField, problem: FBSDEProblem, l: float) -> float:
    """Max discrete defect of a field against the level-l dynamics."""
    tree = problem.tree
    g = problem.g
    sign = mode_sign(problem.mode)
    n, m, d, N = problem.n, problem.m, tree.d, tree.N
    dt = tree.dt
    G = g.G
    phi_t, psi_t, gam_t, xi_t = _forcing_tables(problem)
    worst = 0.0
    for k in range(N):
        t = tree.times[k]
        X, Y, Z = fld.X[k], fld.Y[k], fld.Z[k]
        drift = np.empty((tree.n_nodes(k), n))
        diffusion = np.empty((tree.n_nodes(k), n, d))
        driver = np.empty((tree.n_nodes(k), m))
        lin_drift = -sign * problem.c2p * (Y @ G)
        lin_diff = -sign * problem.c2p * np.einsum("nm,vmd->vnd", G.T, Z)
        lin_drv = sign * problem.c2 * (X @ G.T)
        for s, idx in _state_groups(tree, k):
            xg, yg, zg = X[idx], Y[idx], Z[idx]
            drift[idx] = ((1.0 - l) * lin_drift[idx]
                          + l * np.asarray(problem.coeffs.b(t, s, xg, yg, zg))
                          + phi_t[k, s])
            diffusion[idx] = ((1.0 - l) * lin_diff[idx]
                              + l * np.asarray(problem.coeffs.sigma(t, s, xg, yg, zg))
                              + psi_t[k, s])
            driver[idx] = ((1.0 - l) * lin_drv[idx]
                           + l * np.asarray(problem.coeffs.f(t, s, xg, yg, zg))
                           + gam_t[k, s])
        inc = np.einsum("vnw,viw->vin", diffusion, tree.edge_dm(k))
        pred = X[:, None, :] + dt * drift[:, None, :] + inc
        worst = max(worst, float(np.abs(tree.child_block(k, fld.X[k + 1]) - pred).max()))
        mean = tree.conditional_mean(k, fld.Y[k + 1])
        worst = max(worst, float(np.abs(Y - mean - dt * driver).max()))
        zinc = np.einsum("vmw,viw->vim", Z, tree.edge_dm(k))
        worst = max(worst, float(np.abs(
            tree.child_block(k, fld.Y[k + 1]) - mean[:, None, :] - zinc).max()))
    leaves = tree.states[N]
    term = (1.0 - l) * (fld.X[N] @ G.T) + xi_t[leaves]
    if l > 0.0:
        for s, idx in _state_groups(tree, N):
            term[idx] += l * np.asarray(problem.coeffs.phi(s, fld.X[N][idx]))
    worst = max(worst, float(np.abs(fld.Y[N] - term).max()))
    return worst


# -- level solve and continuation ------------------------------------------------


def solve_level(problem: FBSDEProblem, l: float, warm_start: SolutionField,
                config: ContinuationConfig | None = None):
    """Damped Picard iteration at a fixed coupling level.

    Iterates field <- field + w (sweep(field) - field) until consecutive
    iterates differ by at most config.tol in the contraction metric; the
    relaxation weight w halves (down to min_damping) whenever the difference
    norms grow twice in a row.  Returns (field, LevelStats) or raises
    MaxSweepsError for the continuation driver to shrink delta.
    """
    config = config or ContinuationConfig()
    stats = LevelStats(level=l, damping=config.damping)
    tables = _forcing_tables(problem)
    field = warm_start
    omega = config.damping
    grew = 0
    for sweep_idx in range(config.max_sweeps):
        swept = picard_sweep(problem, l, field,
                             inner_tol=config.inner_tol,
                             inner_max_iter=config.inner_max_iter,
                             _tables=tables)
        nxt = field.axpy(omega, swept - field)
        diff = contraction_metric(nxt - field, problem.tree, config.weight_mode)
        stats.sweeps += 1
        if stats.diff_norms:
            prev = stats.diff_norms[-1]
            stats.ratios.append(diff / prev if prev > 0.0 else 0.0)
            grew = grew + 1 if diff > prev else 0
        stats.diff_norms.append(diff)
        field = nxt
        if diff <= config.tol:
            stats.converged = True
            stats.damping = omega
            return field, stats
        if grew >= 2 and omega > config.min_damping:
            omega = max(config.min_damping, 0.5 * omega)
            grew = 0
    stats.damping = omega
    raise MaxSweepsError(
        f"level l={l:.4g} did not converge in {config.max_sweeps} sweeps "
        f"(last diff {stats.diff_norms[-1]:.3g})", stats
    )


def linear_seed(problem: FBSDEProblem) -> SolutionField:
    """Closed-form solution of the l = 0 family member (lam = 1)."""
    lp = LinearFBSDEProblem(
        mode=problem.mode, c2=problem.c2, c2p=problem.c2p, lam=1.0,
        g=problem.g, x0=problem.x0, forcing=problem.forcing, tree=problem.tree,
    )
    return solve_linear(lp).field


def solve_continuation(problem: FBSDEProblem,
                       config: ContinuationConfig | None = None,
                       initial: SolutionField | None = None):
    """March the coupling level from 0 to 1 with adaptive step control.

    Level 0 is warm started from the linear_fbsde seed (or from ``initial``
    when given, which exercises uniqueness from arbitrary starts).  Each
    accepted level warm starts the next through a secant predictor; delta
    halves on level failure down to delta_min and grows after fast levels.
    The returned field is checked against the level-1 residual.
    """
    config = config or ContinuationConfig()
    report = ConvergenceReport()
    field = initial if initial is not None else linear_seed(problem)
    field, stats = solve_level(problem, 0.0, field, config)
    report.levels.append(stats)
    report.delta_history.append((0.0, 0.0, True))

    l = 0.0
    delta = config.delta
    prev_field = None
    prev_l = None
    while l < 1.0:
        l_try = min(1.0, l + delta)
        if prev_field is not None and l_try > l:
            slope = 0.0 if l == prev_l else (l_try - l) / (l - prev_l)
            warm = field.axpy(slope, field - prev_field)
        else:
            warm = field
        try:
            nxt, stats = solve_level(problem, l_try, warm, config)
        except MaxSweepsError as err:
            report.delta_history.append((l_try, delta, False))
            report.levels.append(err.stats)
            delta *= config.shrink
            if delta < config.delta_min:
                raise ContinuationError(
                    f"continuation stalled at l={l:.4g} with delta below "
                    f"{config.delta_min:g}; the problem likely violates the "
                    "monotonicity conditions (run verify.check_monotonicity)"
                ) from err
            continue
        report.levels.append(stats)
        report.delta_history.append((l_try, delta, True))
        prev_field, prev_l = field, l
        field, l = nxt, l_try
        if stats.sweeps <= config.fast_sweeps:
            delta = min(config.growth * delta, 1.0)

    report.final_residual = solution_residual(field, problem, 1.0)
    report.converged = report.final_residual <= config.residual_tol
    if not report.converged:
        raise ResidualError(
            f"final residual {report.final_residual:.3g} exceeds "
            f"{config.residual_tol:g}"
        )
    return field, report
