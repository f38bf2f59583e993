"""Independent brute-force solver for equivalence testing.

Treats every tree unknown as one flat vector and runs a damped global
fixed-point iteration on the stacked system: each pass recomputes every node
simultaneously from the previous iterate (Jacobi splitting).  This is a
deliberately different operator splitting from the solver's cascading
forward/backward sweeps (which propagate fresh values within a pass), so
agreement between the two is evidence, not tautology.  The residual below is
likewise written from the level-l equations directly and shares no code with
solver.solution_residual.

Speed is irrelevant here; damping (default 0.5) trades it for robustness.
"""

from __future__ import annotations

import numpy as np

from .fields import SolutionField
from .linear_fbsde import mode_sign
from .solver import FBSDEProblem

ORACLE_NODE_LIMIT = 10_000


class OracleBudgetError(ValueError):
    """Tree too large for the brute-force oracle."""


class OracleDivergenceError(RuntimeError):
    def __init__(self, message: str, defect: float, iterations: int):
        super().__init__(message)
        self.defect = defect
        self.iterations = iterations


def _local_terms(problem: FBSDEProblem, l: float, k: int, X, Y, Z):
    """Level-l drift, diffusion and driver at one level, from given values."""
    tree = problem.tree
    sgn = mode_sign(problem.mode)
    G = problem.g.G
    t = tree.times[k]
    nn = X.shape[0]
    drift = np.zeros((nn, problem.n))
    diffusion = np.zeros((nn, problem.n, tree.d))
    driver = np.zeros((nn, problem.m))
    states = tree.states[k]
    for s in range(tree.d):
        idx = np.flatnonzero(states == s)
        if idx.size == 0:
            continue
        xg, yg, zg = X[idx], Y[idx], Z[idx]
        dr = (1.0 - l) * problem.c2p * (-sgn) * (yg @ G)
        di = (1.0 - l) * problem.c2p * (-sgn) * np.einsum("nm,vmd->vnd", G.T, zg)
        dv = (1.0 - l) * problem.c2 * sgn * (xg @ G.T)
        if l > 0.0:
            dr = dr + l * np.asarray(problem.coeffs.b(t, s, xg, yg, zg))
            di = di + l * np.asarray(problem.coeffs.sigma(t, s, xg, yg, zg))
            dv = dv + l * np.asarray(problem.coeffs.f(t, s, xg, yg, zg))
        drift[idx] = dr + problem.forcing.phi(t, s)
        diffusion[idx] = di + problem.forcing.psi(t, s)
        driver[idx] = dv + problem.forcing.gamma(t, s)
    return drift, diffusion, driver


def _terminal(problem: FBSDEProblem, l: float, XN):
    tree = problem.tree
    G = problem.g.G
    states = tree.states[tree.N]
    out = (1.0 - l) * (XN @ G.T)
    for s in range(tree.d):
        idx = np.flatnonzero(states == s)
        if idx.size == 0:
            continue
        if l > 0.0:
            out[idx] += l * np.asarray(problem.coeffs.phi(s, XN[idx]))
        out[idx] += problem.forcing.xi(s)
    return out


def _apply_once(problem: FBSDEProblem, l: float, fld: SolutionField) -> SolutionField:
    """One Jacobi application: every equation evaluated on the old field."""
    tree = problem.tree
    out = SolutionField.zeros(tree, problem.n, problem.m)
    out.X[0][0] = problem.x0
    for k in range(tree.N):
        drift, diffusion, driver = _local_terms(
            problem, l, k, fld.X[k], fld.Y[k], fld.Z[k])
        jump = np.einsum("vnw,viw->vin", diffusion, tree.edge_dm(k))
        out.X[k + 1] = (fld.X[k][:, None, :] + tree.dt * drift[:, None, :]
                        + jump).reshape(-1, problem.n)
        cond = tree.conditional_mean(k, fld.Y[k + 1])
        out.Y[k] = cond + tree.dt * driver
        _, out.Z[k] = tree.represent(k, fld.Y[k + 1])
    out.Y[tree.N] = _terminal(problem, l, fld.X[tree.N])
    return out


def global_residual(fld: SolutionField, problem: FBSDEProblem, l: float) -> dict:
    """Stacked defect norms of the discrete system, by category."""
    tree = problem.tree
    fwd = bwd = rep = 0.0
    for k in range(tree.N):
        drift, diffusion, driver = _local_terms(
            problem, l, k, fld.X[k], fld.Y[k], fld.Z[k])
        jump = np.einsum("vnw,viw->vin", diffusion, tree.edge_dm(k))
        xpred = (fld.X[k][:, None, :] + tree.dt * drift[:, None, :] + jump)
        xnext = fld.X[k + 1].reshape(tree.n_nodes(k), tree.d, problem.n)
        fwd = max(fwd, float(np.abs(xnext - xpred).max()))
        cond = tree.conditional_mean(k, fld.Y[k + 1])
        bwd = max(bwd, float(np.abs(fld.Y[k] - cond - tree.dt * driver).max()))
        ynext = fld.Y[k + 1].reshape(tree.n_nodes(k), tree.d, problem.m)
        zjump = np.einsum("vmw,viw->vim", fld.Z[k], tree.edge_dm(k))
        rep = max(rep, float(np.abs(ynext - cond[:, None, :] - zjump).max()))
    term = float(np.abs(fld.Y[tree.N]
                        - _terminal(problem, l, fld.X[tree.N])).max())
    root = float(np.abs(fld.X[0][0] - problem.x0).max())
    return {
        "forward": fwd,
        "backward": bwd,
        "representation": rep,
        "terminal": term,
        "root": root,
        "max": max(fwd, bwd, rep, term, root),
    }


def _flatten(fld: SolutionField) -> np.ndarray:
    parts = []
    for k in range(fld.tree.N + 1):
        parts.append(fld.X[k].ravel())
        parts.append(fld.Y[k].ravel())
        if k < fld.tree.N:
            parts.append(fld.Z[k].ravel())
    return np.concatenate(parts)


def _unflatten(vec: np.ndarray, like: SolutionField) -> SolutionField:
    out = SolutionField.zeros(like.tree, like.n, like.m)
    pos = 0
    for k in range(like.tree.N + 1):
        for arrs, src in ((out.X, like.X), (out.Y, like.Y)):
            size = src[k].size
            arrs[k] = vec[pos:pos + size].reshape(src[k].shape)
            pos += size
        if k < like.tree.N:
            size = like.Z[k].size
            out.Z[k] = vec[pos:pos + size].reshape(like.Z[k].shape)
            pos += size
    return out


def brute_force_solve(problem: FBSDEProblem, l: float = 1.0,
                      init: SolutionField | None = None,
                      damping: float = 0.5, tol: float = 1e-12,
                      max_iters: int = 50_000, window: int = 8) -> SolutionField:
    """Damped global fixed point on the stacked residual map.

    The basic step is field <- field + damping * (T(field) - field) with T
    the simultaneous (Jacobi) update of every node equation.  Plain damped
    iteration is not robust here: the Jacobi map couples the forward and
    backward recursions through the terminal condition into a loop whose
    linearisation carries complex eigenvalue pairs outside the stability
    region of every single relaxation weight on some desk-scale problems.
    The update therefore mixes the last ``window`` residuals (Anderson-style
    least squares on the stacked residual history), which preserves the
    fixed points, handles indefinite spectra, and stays deterministic.  On
    repeated divergence the history resets and the weight halves.
    """
    tree = problem.tree
    total = sum(tree.n_nodes(k) for k in range(tree.N + 1))
    if total > ORACLE_NODE_LIMIT:
        raise OracleBudgetError(
            f"tree has {total} nodes; the oracle refuses above "
            f"{ORACLE_NODE_LIMIT}"
        )
    fld = init.copy() if init is not None else \
        SolutionField.zeros(tree, problem.n, problem.m)
    defect = global_residual(fld, problem, l)["max"]
    if defect <= tol:
        return fld
    beta = damping
    u = _flatten(fld)
    hist_u: list[np.ndarray] = []
    hist_r: list[np.ndarray] = []
    best_u, best = u, defect
    iterations = 0
    while iterations < max_iters:
        fld = _unflatten(u, fld)
        r = _flatten(_apply_once(problem, l, fld)) - u
        hist_u.append(u)
        hist_r.append(r)
        if len(hist_u) > window:
            hist_u.pop(0)
            hist_r.pop(0)
        if len(hist_r) == 1:
            u_next = u + beta * r
        else:
            R = np.stack(hist_r, axis=1)            # (dim, q)
            dR = R[:, 1:] - R[:, :-1]
            dU = np.stack(hist_u, axis=1)[:, 1:] - np.stack(hist_u, axis=1)[:, :-1]
            coef, *_ = np.linalg.lstsq(dR, r, rcond=None)
            u_next = u + beta * r - (dU + beta * dR) @ coef
        iterations += 1
        fld = _unflatten(u_next, fld)
        defect = global_residual(fld, problem, l)["max"]
        if defect <= tol:
            return fld
        if not np.isfinite(defect) or defect > 100.0 * max(best, 1.0):
            # mixing went unstable (strong nonlinearity): reset and damp
            if beta <= 1.0 / 64.0:
                break
            beta *= 0.5
            hist_u.clear()
            hist_r.clear()
            u = best_u.copy()
            defect = best
            continue
        if defect < best:
            best_u, best = u_next, defect
        u = u_next
    raise OracleDivergenceError(
        f"oracle fixed point stalled after {iterations} iterations "
        f"(defect {defect:.3g})", defect, iterations
    )
