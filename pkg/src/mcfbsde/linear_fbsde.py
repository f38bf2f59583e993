"""Constructive solver for the linear FBSDEs underlying the continuation seed.

THM2 signs:   dX = [-c2' G*Y + phi] dt + [-c2' G*Z + psi] dM
             -dY = [ c2  G X + gamma] dt - Z dM,    Y_T = lam G X_T + xi
THM3 signs:   dX = [ c2' G*Y + phi] dt + [ c2' G*Z + psi] dM
             -dY = [-c2  G X + gamma] dt - Z dM,    Y_T = lam G X_T + xi

The construction splits on n <= m versus n > m, reduces to a transformed
system via G, and solves it with an affine value table Y' = Ktab X' + p on
the (time, state) grid.  Ktab is the exact discrete Riccati recursion (the
backward-Euler analogue of the continuous Riccati flow), so the assembled
field satisfies every discrete equation to roundoff, not merely O(dt); the
continuous RK4 Riccati solution is kept alongside for audit and differs from
Ktab by O(dt).

q (the transformed Z') is derived per (time, state) from the exact
martingale representation of next-step p values rather than from the printed
dM integrands, which carry sign inconsistencies in the flipped-sign variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .algebra import GStructure
from .chain import DiscreteChainTree
from .fields import Forcing, SolutionField
from .riccati import (CASE_N_GT_M, CASE_N_LE_M, RiccatiProblem,
                      RiccatiSolution, solve_riccati)

THM2 = "THM2"
THM3 = "THM3"

_SING_TOL = 1e-8


class SingularSystemError(RuntimeError):
    """A per-node linear system is singular and inconsistent."""


class LinearResidualError(RuntimeError):
    """Assembled field failed its own residual check; reports the worst
    node.  The construction is exact by design, so this only fires on
    numerical breakdown (near-singular value tables)."""


def mode_sign(mode: str) -> float:
    if mode == THM2:
        return 1.0
    if mode == THM3:
        return -1.0
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class LinearFBSDEProblem:
    mode: str
    c2: float
    c2p: float
    lam: float
    g: GStructure
    x0: np.ndarray
    forcing: Forcing
    tree: DiscreteChainTree

    def __post_init__(self):
        mode_sign(self.mode)
        if self.c2 <= 0 or self.c2p <= 0:
            raise ValueError("c2 and c2' must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.g.n,):
            raise ValueError(f"x0 shape {self.x0.shape} != ({self.g.n},)")

    @property
    def n(self) -> int:
        return self.g.n

    @property
    def m(self) -> int:
        return self.g.m


@dataclass
class AffineSolution:
    problem: LinearFBSDEProblem
    case: str
    K_continuous: RiccatiSolution
    Ktab: np.ndarray                  # (N+1, dim, dim) exact discrete table
    p: np.ndarray                     # (N+1, d, dim)
    q: np.ndarray                     # (N, d, dim, d)
    field: SolutionField
    # audit components; case 1 keeps (X', Y', Z') and (Y'', Z''),
    # case 2 keeps (X', Y', Z') and X''
    aux: dict = field(default_factory=dict)
    gauge_fixed: bool = False
    printed_formula_gap: float = 0.0

    def ktab_vs_continuous(self) -> float:
        """max_k |Ktab(t_k) - K(t_k)|_F; O(dt) by construction."""
        return float(max(
            np.linalg.norm(self.Ktab[k] - self.K_continuous.K[k])
            for k in range(self.Ktab.shape[0])
        ))


def _solve_maybe_singular(M: np.ndarray, rhs: np.ndarray):
    """Solve M x = rhs; fall back to least squares when M is singular.

    The least-squares route is accepted only if it is consistent (the linear
    problem then has a solution family; the minimal-norm representative is
    the canonical choice).  Returns (x, used_lstsq).
    """
    scale = 1.0 + float(np.abs(rhs).max(initial=0.0))
    try:
        cond_bad = np.linalg.cond(M) > 1.0 / _SING_TOL
    except np.linalg.LinAlgError:
        cond_bad = True
    if not cond_bad:
        return np.linalg.solve(M, rhs), False
    x, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    defect = float(np.abs(M @ x - rhs).max())
    if defect > _SING_TOL * scale:
        raise SingularSystemError(
            f"singular system is inconsistent (defect {defect:.3g}); "
            "the linear problem has no solution at these parameters"
        )
    return x, True


def solve_linear(problem: LinearFBSDEProblem,
                 residual_tol: float = 1e-9) -> AffineSolution:
    """Riccati-affine construction, exact on the discrete tree.

    The assembled field is residual-checked before returning; defects
    beyond ``residual_tol`` raise LinearResidualError naming the worst
    node."""
    tree = problem.tree
    g = problem.g
    if g.case == CASE_N_LE_M:
        sol = _solve_case_n_le_m(problem, tree, g)
    else:
        sol = _solve_case_n_gt_m(problem, tree, g)
    worst, where = linear_field_residual_located(sol.field, problem)
    if worst > residual_tol:
        raise LinearResidualError(
            f"assembled field has defect {worst:.3g} > {residual_tol:g} "
            f"({where})"
        )
    return sol


def solve_linear_forced_case(problem: LinearFBSDEProblem, case: str) -> AffineSolution:
    """Run a specific pipeline regardless of g.case; needs n == m for the
    non-native one.  Used to cross-check the two constructions."""
    if case == CASE_N_LE_M:
        return _solve_case_n_le_m(problem, problem.tree, problem.g)
    if case == CASE_N_GT_M:
        return _solve_case_n_gt_m(problem, problem.tree, problem.g)
    raise ValueError(f"unknown case {case!r}")


def _solve_case_n_le_m(problem, tree: DiscreteChainTree, g: GStructure):
    """Transformed unknowns X' = X, Y' = G*Y, Z' = G*Z plus the projected
    remainder (Y'', Z'') = (I - P)(Y, Z)."""
    sign = mode_sign(problem.mode)
    n, m, d, N = g.n, g.m, tree.d, tree.N
    dt = tree.dt
    G = g.G
    # factors derived here rather than from the GStructure cache, which is
    # tied to the native case; a square G may run either pipeline
    gram = G.T @ G
    lift = G @ np.linalg.inv(gram)        # G (G*G)^-1
    comp = np.eye(m) - lift @ G.T         # I_m - P

    phi_t, psi_t, gam_t, xi_t = problem.forcing.tables(tree, n, m)
    eye = np.eye(n)

    Ktab = np.empty((N + 1, n, n))
    p = np.empty((N + 1, d, n))
    q = np.empty((N, d, n, d))
    Ktab[N] = problem.lam * gram
    p[N] = xi_t @ G                       # G* xi per state
    gauge = False

    for k in range(N - 1, -1, -1):
        Knext = Ktab[k + 1]
        M1 = eye + sign * problem.c2p * dt * Knext
        M2 = eye + sign * problem.c2p * Knext
        Ktab[k] = np.linalg.solve(M1, Knext + sign * problem.c2 * dt * gram)
        Ktab[k] = 0.5 * (Ktab[k] + Ktab[k].T)
        pbar = tree.trans[k] @ p[k + 1]                        # (d, n)
        W = p[k + 1].T[None, :, :] - pbar[:, :, None]          # (d, n, d)
        for s in range(d):
            rhs_q = Knext @ psi_t[k, s] + W[s]
            q[k, s], used = _solve_maybe_singular(M2, rhs_q)
            gauge = gauge or used
            rhs_p = pbar[s] + dt * (Knext @ phi_t[k, s] + G.T @ gam_t[k, s])
            p[k, s] = np.linalg.solve(M1, rhs_p)

    # projected remainder, tabled per (time, state)
    ypp = np.empty((N + 1, d, m))
    zpp = np.empty((N, d, m, d))
    ypp[N] = xi_t @ comp.T
    for k in range(N - 1, -1, -1):
        mean = tree.trans[k] @ ypp[k + 1]
        zpp[k] = ypp[k + 1].T[None, :, :] - mean[:, :, None]
        ypp[k] = mean + dt * (gam_t[k] @ comp.T)

    # forward sweep for X' = X on the tree, then assembly
    Xp = [np.empty((tree.n_nodes(k), n)) for k in range(N + 1)]
    Xp[0][0] = problem.x0
    fld = SolutionField.zeros(tree, n, m)
    aux_yp = []
    aux_zp = []
    for k in range(N + 1):
        states = tree.states[k]
        if k < N:
            yp = Xp[k] @ Ktab[k].T + p[k][states]
            zp = q[k][states]
            drift = -sign * problem.c2p * yp + phi_t[k][states]
            diffusion = -sign * problem.c2p * zp + psi_t[k][states]
            inc = np.einsum("vnw,viw->vin", diffusion, tree.edge_dm(k))
            nxt = Xp[k][:, None, :] + dt * drift[:, None, :] + inc
            Xp[k + 1] = nxt.reshape(-1, n)
        else:
            yp = Xp[k] @ Ktab[k].T + p[k][states]
            zp = None
        aux_yp.append(yp)
        aux_zp.append(zp)
        fld.X[k] = Xp[k]
        fld.Y[k] = yp @ lift.T + ypp[k][states]
        if k < N:
            fld.Z[k] = np.einsum("mn,vnd->vmd", lift, zp) + zpp[k][states]
    fld.canonicalize_z()

    sol = AffineSolution(
        problem=problem,
        case=CASE_N_LE_M,
        K_continuous=solve_riccati(RiccatiProblem(
            CASE_N_LE_M, problem.c2, problem.c2p, g, problem.lam,
            tree.T, tree.N)) if problem.mode == THM2 else
        _flipped_continuous(problem, CASE_N_LE_M),
        Ktab=Ktab,
        p=p,
        q=q,
        field=fld,
        aux={"Xp": Xp, "Yp": aux_yp, "Zp": aux_zp, "Ypp": ypp, "Zpp": zpp},
        gauge_fixed=gauge,
    )
    sol.printed_formula_gap = _printed_gap(sol, psi_t)
    return sol


def _solve_case_n_gt_m(problem, tree: DiscreteChainTree, g: GStructure):
    """Transformed unknowns X' = G X, Y' = Y, Z' = Z plus the row-space
    remainder X'' = (I - P') X, which decouples into a plain forward SDE."""
    sign = mode_sign(problem.mode)
    n, m, d, N = g.n, g.m, tree.d, tree.N
    dt = tree.dt
    G = g.G
    gg = G @ G.T
    lift = G.T @ np.linalg.inv(gg)        # G* (GG*)^-1, n x m
    comp = np.eye(n) - lift @ G           # I_n - P'

    phi_t, psi_t, gam_t, xi_t = problem.forcing.tables(tree, n, m)
    eye = np.eye(m)

    Ktab = np.empty((N + 1, m, m))
    p = np.empty((N + 1, d, m))
    q = np.empty((N, d, m, d))
    Ktab[N] = problem.lam * eye
    p[N] = xi_t
    gauge = False

    for k in range(N - 1, -1, -1):
        Knext = Ktab[k + 1]
        M1 = eye + sign * problem.c2p * dt * Knext @ gg
        M2 = eye + sign * problem.c2p * Knext @ gg
        Ktab[k] = np.linalg.solve(M1, Knext + sign * problem.c2 * dt * eye)
        Ktab[k] = 0.5 * (Ktab[k] + Ktab[k].T)
        pbar = tree.trans[k] @ p[k + 1]
        W = p[k + 1].T[None, :, :] - pbar[:, :, None]
        for s in range(d):
            rhs_q = Knext @ (G @ psi_t[k, s]) + W[s]
            q[k, s], used = _solve_maybe_singular(M2, rhs_q)
            gauge = gauge or used
            rhs_p = pbar[s] + dt * (Knext @ (G @ phi_t[k, s]) + gam_t[k, s])
            p[k, s] = np.linalg.solve(M1, rhs_p)

    Xp = [np.empty((tree.n_nodes(k), m)) for k in range(N + 1)]
    Xpp = [np.empty((tree.n_nodes(k), n)) for k in range(N + 1)]
    Xp[0][0] = G @ problem.x0
    Xpp[0][0] = comp @ problem.x0
    fld = SolutionField.zeros(tree, n, m)
    for k in range(N + 1):
        states = tree.states[k]
        yp = Xp[k] @ Ktab[k].T + p[k][states]
        if k < N:
            zp = q[k][states]
            drift = -sign * problem.c2p * (yp @ gg.T) + phi_t[k][states] @ G.T
            diffusion = (-sign * problem.c2p * np.einsum("ab,vbd->vad", gg, zp)
                         + np.einsum("ab,vbd->vad", G, psi_t[k][states]))
            inc = np.einsum("vmw,viw->vim", diffusion, tree.edge_dm(k))
            Xp[k + 1] = (Xp[k][:, None, :] + dt * drift[:, None, :]
                         + inc).reshape(-1, m)
            drift2 = phi_t[k][states] @ comp.T
            diff2 = np.einsum("ab,vbd->vad", comp, psi_t[k][states])
            inc2 = np.einsum("vnw,viw->vin", diff2, tree.edge_dm(k))
            Xpp[k + 1] = (Xpp[k][:, None, :] + dt * drift2[:, None, :]
                          + inc2).reshape(-1, n)
        fld.X[k] = Xp[k] @ lift.T + Xpp[k]
        fld.Y[k] = yp
        if k < N:
            fld.Z[k] = zp
    fld.canonicalize_z()

    sol = AffineSolution(
        problem=problem,
        case=CASE_N_GT_M,
        K_continuous=solve_riccati(RiccatiProblem(
            CASE_N_GT_M, problem.c2, problem.c2p, g, problem.lam,
            tree.T, tree.N)) if problem.mode == THM2 else
        _flipped_continuous(problem, CASE_N_GT_M),
        Ktab=Ktab,
        p=p,
        q=q,
        field=fld,
        aux={"Xp": Xp, "Xpp": Xpp},
        gauge_fixed=gauge,
    )
    sol.printed_formula_gap = _printed_gap(sol, psi_t)
    return sol


def _flipped_continuous(problem, case: str) -> RiccatiSolution:
    """Continuous audit table for the flipped-sign mode.

    The flipped affine coefficient solves -Kdot = c2' K^2 - c2 (G-term) with
    the same terminal data; integrate it directly (it can leave the PSD cone,
    so no PSD certificate is enforced here).
    """
    from .riccati import RiccatiProblem as RP

    base = RP(case, problem.c2, problem.c2p, problem.g, problem.lam,
              problem.tree.T, problem.tree.N)

    N = base.N
    dt = base.T / N
    K = np.empty((N + 1, base.dim, base.dim))
    K[N] = base.terminal()
    for j in range(N, 0, -1):
        k1 = _neg_rhs(base, K[j])
        k2 = _neg_rhs(base, K[j] + 0.5 * dt * k1)
        k3 = _neg_rhs(base, K[j] + 0.5 * dt * k2)
        k4 = _neg_rhs(base, K[j] + dt * k3)
        K[j - 1] = K[j] + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        K[j - 1] = 0.5 * (K[j - 1] + K[j - 1].T)
    return RiccatiSolution(base, np.linspace(0.0, base.T, N + 1), K)


def _neg_rhs(base, K):
    # flipped mode: -Kdot = -(THM2 rhs evaluated with the same structure)
    return -base.rhs(K)


def _printed_gap(sol: AffineSolution, psi_t: np.ndarray) -> float:
    """Diagnostic: compare q against the paper-form integrand built from the
    continuous K.  O(dt) by construction; recorded, never asserted tight."""
    problem = sol.problem
    tree = problem.tree
    sign = mode_sign(problem.mode)
    worst = 0.0
    for k in range(tree.N):
        Kc = sol.K_continuous.K[k]
        pbar = tree.trans[k] @ sol.p[k + 1]
        W = sol.p[k + 1].T[None, :, :] - pbar[:, :, None]
        for s in range(tree.d):
            if sol.case == CASE_N_LE_M:
                lhs = (np.eye(problem.g.n) + sign * problem.c2p * Kc) @ sol.q[k, s]
                rhs = Kc @ psi_t[k, s] + W[s]
            else:
                lhs = (np.eye(problem.g.m)
                       + sign * problem.c2p * Kc @ (problem.g.G @ problem.g.G.T)) \
                    @ sol.q[k, s]
                rhs = Kc @ (problem.g.G @ psi_t[k, s]) + W[s]
            worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def linear_residual(solution: AffineSolution, problem: LinearFBSDEProblem | None = None):
    """Max discrete defect of the assembled field against the original
    (untransformed) linear dynamics: forward, backward, representation and
    terminal equations, over every node and edge."""
    problem = problem or solution.problem
    return linear_field_residual(solution.field, problem)


def linear_field_residual(fld: SolutionField, problem: LinearFBSDEProblem) -> float:
    return linear_field_residual_located(fld, problem)[0]


def linear_field_residual_located(fld: SolutionField,
                                  problem: LinearFBSDEProblem):
    """Max discrete defect plus a human-readable worst-node locator."""
    tree = problem.tree
    g = problem.g
    sign = mode_sign(problem.mode)
    n, m = g.n, g.m
    dt = tree.dt
    phi_t, psi_t, gam_t, xi_t = problem.forcing.tables(tree, n, m)
    G = g.G
    worst = 0.0
    where = "nowhere"

    def note(value: np.ndarray, kind: str, level: int):
        nonlocal worst, where
        v = float(np.abs(value).max())
        if v > worst:
            worst = v
            node = int(np.unravel_index(np.argmax(np.abs(value)),
                                        value.shape)[0])
            where = f"{kind} defect at level {level}, node {node}"

    for k in range(tree.N):
        states = tree.states[k]
        X, Y, Z = fld.X[k], fld.Y[k], fld.Z[k]
        drift = -sign * problem.c2p * (Y @ G) + phi_t[k][states]
        diffusion = (-sign * problem.c2p
                     * np.einsum("nm,vmd->vnd", G.T, Z) + psi_t[k][states])
        inc = np.einsum("vnw,viw->vin", diffusion, tree.edge_dm(k))
        pred = X[:, None, :] + dt * drift[:, None, :] + inc
        note(tree.child_block(k, fld.X[k + 1]) - pred, "forward", k)

        mean = tree.conditional_mean(k, fld.Y[k + 1])
        driver = sign * problem.c2 * (X @ G.T) + gam_t[k][states]
        note(Y - mean - dt * driver, "backward", k)

        zinc = np.einsum("vmw,viw->vim", Z, tree.edge_dm(k))
        note(tree.child_block(k, fld.Y[k + 1]) - mean[:, None, :] - zinc,
             "representation", k)

    leaves = tree.states[tree.N]
    note(fld.Y[tree.N] - problem.lam * (fld.X[tree.N] @ G.T) - xi_t[leaves],
         "terminal", tree.N)
    return worst, where
