"""Hypothesis checkers and identity validators.

The checkers are samplers, not provers: the monotonicity and Lipschitz
conditions quantify over all of R^n x R^m x R^(m x d), so a PASS only means
no sampled violation, while every FAIL carries a reproducible witness.  Two
monotonicity flavors exist because the printed per-functional inequalities
(LITERAL) are unsatisfiable whenever G is injective: take z1 = z2 and
x1 != x2 in the jump-part inequality and the left side is 0 while the right
side is strictly negative.  PROOF_SUFFICIENT tests exactly the combined
integrands the uniqueness and contraction computations consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algebra import CoefficientSet, GStructure
from .chain import (ChainModel, PathBundle, exact_predictable_qv_mean,
                    qv_density_matrix, simulate_paths)
from .fields import SolutionField
from .linear_fbsde import THM2, THM3, mode_sign
from .solver import FBSDEProblem, picard_sweep

LITERAL = "LITERAL"
PROOF_SUFFICIENT = "PROOF_SUFFICIENT"

_TINY = 1e-12


@dataclass
class Witness:
    t: float
    state: int
    u1: tuple                  # (x, y, z) as nested lists
    u2: tuple
    inequality: str            # which inequality failed / pinned the constant
    lhs: float
    margin: float

    def to_dict(self) -> dict:
        return {
            "t": self.t, "state": self.state,
            "u1": [np.asarray(v).tolist() for v in self.u1],
            "u2": [np.asarray(v).tolist() for v in self.u2],
            "inequality": self.inequality,
            "lhs": self.lhs, "margin": self.margin,
        }


@dataclass
class MonotonicityReport:
    mode: str
    flavor: str
    samples: int
    c2: float
    c2p: float
    c3: float
    status: str                      # PASS | FAIL | DEGENERATE
    violations: int = 0
    worst: Witness | None = None
    seed: int = 0
    box: float = 1.0

    @property
    def passed(self) -> bool:
        return self.status == "PASS"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "flavor": self.flavor, "samples": self.samples,
            "c2": self.c2, "c2p": self.c2p, "c3": self.c3,
            "status": self.status, "violations": self.violations,
            "worst": self.worst.to_dict() if self.worst else None,
            "seed": self.seed, "box": self.box,
        }


@dataclass
class LipschitzReport:
    constants: dict
    samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"constants": {k: float(v) for k, v in self.constants.items()},
                "samples": self.samples, "seed": self.seed}


def _draw_samples(rng, samples, n, m, d, box, T):
    """Deterministic per-index sample stream with a fixed draw count per
    sample, so the sample set for count k is a prefix of the set for k' > k."""
    for i in range(samples):
        t = float(rng.uniform(0.0, T))
        state = int(rng.integers(0, d))
        x1 = rng.uniform(-box, box, size=n)
        y1 = rng.uniform(-box, box, size=m)
        z1 = rng.uniform(-box, box, size=(m, d))
        dx = rng.uniform(-box, box, size=n)
        dy = rng.uniform(-box, box, size=m)
        dz = rng.uniform(-box, box, size=(m, d))
        kind = i % 4                      # 0: x-only, 1: y-only, 2: z-only, 3: joint
        if kind == 0:
            dy[:] = 0.0
            dz[:] = 0.0
        elif kind == 1:
            dx[:] = 0.0
            dz[:] = 0.0
        elif kind == 2:
            dx[:] = 0.0
            dy[:] = 0.0
        yield i, kind, t, state, (x1, y1, z1), (x1 - dx, y1 - dy, z1 - dz)


def _diffs(coeffs, t, state, u1, u2):
    x1, y1, z1 = u1
    x2, y2, z2 = u2
    bh = np.asarray(coeffs.b(t, state, x1, y1, z1)) \
        - np.asarray(coeffs.b(t, state, x2, y2, z2))
    sh = np.asarray(coeffs.sigma(t, state, x1, y1, z1)) \
        - np.asarray(coeffs.sigma(t, state, x2, y2, z2))
    fh = np.asarray(coeffs.f(t, state, x1, y1, z1)) \
        - np.asarray(coeffs.f(t, state, x2, y2, z2))
    ph = np.asarray(coeffs.phi(state, x1)) - np.asarray(coeffs.phi(state, x2))
    return bh, sh, fh, ph


class _ConstantEstimator:
    """Tracks the largest constant compatible with every sampled inequality
    lhs <= -c * quad (or >= c * quad for the flipped mode)."""

    def __init__(self):
        self.bound = np.inf
        self.seen = False

    def update(self, lhs_signed, quad):
        # lhs_signed is oriented so the constraint reads lhs_signed <= -c*quad
        if quad <= _TINY:
            return None
        self.seen = True
        cand = -lhs_signed / quad
        if cand < self.bound:
            self.bound = cand
        return cand

    @property
    def value(self) -> float:
        if not self.seen or not np.isfinite(self.bound):
            return 0.0
        return max(0.0, float(self.bound))


def check_monotonicity(coeffs: CoefficientSet, g: GStructure, model: ChainModel,
                       mode: str, flavor: str = PROOF_SUFFICIENT,
                       samples: int = 10_000, seed: int = 0, box: float = 1.0,
                       T: float = 1.0) -> MonotonicityReport:
    """Sample the monotonicity inequalities and estimate the largest
    constants they support.

    Directional samples (pure x, y, z differences) pin c2, c2', c3; joint
    samples validate the estimated pair and shrink it if they bind tighter.
    THM2 tests the downward inequalities, THM3 the reversed ones.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    if box <= 0:
        raise ValueError("sampling box must have positive width")
    if flavor not in (LITERAL, PROOF_SUFFICIENT):
        raise ValueError(f"unknown flavor {flavor!r}")
    sgn = mode_sign(mode)                 # +1: THM2 (<=), -1: THM3 (>=)
    rng = np.random.default_rng(seed)
    G = g.G
    est_c2 = _ConstantEstimator()
    est_c2p = _ConstantEstimator()
    est_c3 = _ConstantEstimator()
    violations = 0
    worst = None
    joint = []                            # (lhsF_signed, a, h) for validation

    for i, kind, t, state, u1, u2 in _draw_samples(
            rng, samples, coeffs.n, coeffs.m, coeffs.d, box, T):
        xh = u1[0] - u2[0]
        yh = u1[1] - u2[1]
        zh = u1[2] - u2[2]
        bh, sh, fh, ph = _diffs(coeffs, t, state, u1, u2)
        a = float(np.sum((G @ xh) ** 2))
        h = float(np.sum((G.T @ yh) ** 2))
        hz_flat = float(np.sum((G.T @ zh) ** 2))
        lhsF = float((-G.T @ fh) @ xh + (G @ bh) @ yh)
        lhsF_s = sgn * lhsF

        def record(ineq, lhs, margin, t=t, state=state, u1=u1, u2=u2):
            nonlocal worst, violations
            violations += 1
            w = Witness(t, state,
                        tuple(np.asarray(v).tolist() for v in u1),
                        tuple(np.asarray(v).tolist() for v in u2),
                        ineq, lhs, margin)
            if worst is None or margin > worst.margin:
                worst = w

        if flavor == LITERAL:
            lhsH = float(np.sum((G @ sh) * zh))
            lhsH_s = sgn * lhsH
            quad_full = a + h + hz_flat
            for name, lhs_s, lhs_raw in (("F", lhsF_s, lhsF), ("H", lhsH_s, lhsH)):
                if kind == 0 and a > _TINY:
                    cand = est_c2.update(lhs_s, a)
                    if cand is not None and cand < _TINY and name == "H":
                        # the forced literal failure: z-hat = 0, x-hat != 0
                        record(f"{name}-inequality (x-direction)", lhs_raw,
                               lhs_s + a)
                    elif lhs_s > _TINY * max(1.0, quad_full):
                        record(f"{name}-inequality (x-direction)", lhs_raw,
                               lhs_s)
                elif kind == 1 and h > _TINY:
                    est_c2p.update(lhs_s, h)
                    if lhs_s > _TINY * max(1.0, quad_full):
                        record(f"{name}-inequality (y-direction)", lhs_raw, lhs_s)
                elif kind == 2 and hz_flat > _TINY:
                    est_c2p.update(lhs_s, hz_flat)
                    if lhs_s > _TINY * max(1.0, quad_full):
                        record(f"{name}-inequality (z-direction)", lhs_raw, lhs_s)
        else:
            if kind == 0 and a > _TINY:
                est_c2.update(lhsF_s, a)
                if lhsF_s > _TINY * max(1.0, a):
                    record("F-inequality (x-direction)", lhsF, lhsF_s)
            elif kind == 1 and h > _TINY:
                est_c2p.update(lhsF_s, h)
                if lhsF_s > _TINY * max(1.0, h):
                    record("F-inequality (y-direction)", lhsF, lhsF_s)
            elif kind == 2:
                # jump part, weighted by the QV density of each basis state
                for v in range(coeffs.d):
                    qm = qv_density_matrix(model.rate_matrix(t), v)
                    _, shv, _, _ = _diffs(coeffs, t, v, u1, u2)
                    lhsHv = float(np.sum((G @ shv) @ qm * zh))
                    gz = G.T @ zh
                    hzv = float(np.sum((gz @ qm) * gz))
                    if hzv > _TINY:
                        est_c2p.update(sgn * lhsHv, hzv)
                        if sgn * lhsHv > _TINY * max(1.0, hzv):
                            record(f"H-inequality (state {v + 1})", lhsHv,
                                   sgn * lhsHv)
        if kind == 3:
            joint.append((lhsF_s, a, h if flavor == PROOF_SUFFICIENT
                          else h + hz_flat))
        # terminal inequality: THM2 wants (Phi-hat, G x-hat) >= c3 a,
        # THM3 wants <= -c3 a
        if a > _TINY and np.any(np.abs(xh) > 0):
            lhsPhi = float(ph @ (G @ xh))
            est_c3.update(-sgn * lhsPhi, a)
            if -sgn * lhsPhi > _TINY * max(1.0, a):
                record("Phi-inequality", lhsPhi, -sgn * lhsPhi)

    c2, c2p, c3 = est_c2.value, est_c2p.value, est_c3.value
    scale = 1.0
    for lhs_s, a, h in joint:
        denom = c2 * a + c2p * h
        bound = -lhs_s
        if denom > _TINY and bound < denom:
            if bound <= _TINY:
                scale = 0.0
            else:
                scale = min(scale, bound / denom)
    c2 *= scale
    c2p *= scale

    if violations > 0:
        status = "FAIL"
    elif min(c2, c2p, c3) <= _TINY:
        status = "FAIL" if flavor == LITERAL else "DEGENERATE"
    else:
        status = "PASS"
    return MonotonicityReport(mode=mode, flavor=flavor, samples=samples,
                              c2=c2, c2p=c2p, c3=c3, status=status,
                              violations=violations, worst=worst,
                              seed=seed, box=box)


def reevaluate_witness(coeffs: CoefficientSet, g: GStructure, model: ChainModel,
                       mode: str, witness: Witness) -> float:
    """Recompute a witness margin from its stored inputs."""
    sgn = mode_sign(mode)
    u1 = tuple(np.asarray(v, dtype=float) for v in witness.u1)
    u2 = tuple(np.asarray(v, dtype=float) for v in witness.u2)
    xh = u1[0] - u2[0]
    G = g.G
    a = float(np.sum((G @ xh) ** 2))
    bh, sh, fh, ph = _diffs(coeffs, witness.t, witness.state, u1, u2)
    name = witness.inequality
    if name.startswith("F"):
        lhs = float((-G.T @ fh) @ xh + (G @ bh) @ (u1[1] - u2[1]))
        return sgn * lhs
    if name.startswith("H-inequality (x-direction)") or \
            name.startswith("H-inequality (y") or name.startswith("H-inequality (z"):
        lhs = float(np.sum((G @ sh) * (u1[2] - u2[2])))
        return sgn * lhs + (a if "x-direction" in name else 0.0)
    if name.startswith("H-inequality (state"):
        v = int(name.split("state")[1].strip(" )")) - 1
        qm = qv_density_matrix(model.rate_matrix(witness.t), v)
        _, shv, _, _ = _diffs(coeffs, witness.t, v, u1, u2)
        zh = u1[2] - u2[2]
        return sgn * float(np.sum((G @ shv) @ qm * zh))
    if name.startswith("Phi"):
        return -sgn * float(ph @ (G @ xh))
    raise ValueError(f"unknown witness inequality {name!r}")


def check_lipschitz(coeffs: CoefficientSet, g: GStructure, model: ChainModel,
                    samples: int = 10_000, seed: int = 0, box: float = 1.0,
                    T: float = 1.0) -> LipschitzReport:
    """Sampled difference quotients for b, sigma, f, Phi and the functionals
    F, H, plus the QV-weighted variant for the jump coefficient."""
    rng = np.random.default_rng(seed)
    G = g.G
    sup = {k: 0.0 for k in
           ("b", "sigma", "f", "phi", "F", "H", "sigma_weighted")}
    for i, kind, t, state, u1, u2 in _draw_samples(
            rng, samples, coeffs.n, coeffs.m, coeffs.d, box, T):
        xh = u1[0] - u2[0]
        yh = u1[1] - u2[1]
        zh = u1[2] - u2[2]
        usq = float(np.sum(xh ** 2) + np.sum(yh ** 2) + np.sum(zh ** 2))
        if usq <= _TINY:
            continue
        unorm = np.sqrt(usq)
        bh, sh, fh, ph = _diffs(coeffs, t, state, u1, u2)
        sup["b"] = max(sup["b"], float(np.linalg.norm(bh)) / unorm)
        sup["sigma"] = max(sup["sigma"], float(np.linalg.norm(sh)) / unorm)
        sup["f"] = max(sup["f"], float(np.linalg.norm(fh)) / unorm)
        xnorm = float(np.linalg.norm(xh))
        if xnorm > _TINY:
            sup["phi"] = max(sup["phi"], float(np.linalg.norm(ph)) / xnorm)
        fF = np.sqrt(np.sum((G.T @ fh) ** 2) + np.sum((G @ bh) ** 2))
        sup["F"] = max(sup["F"], float(fF) / unorm)
        sup["H"] = max(sup["H"], float(np.linalg.norm(G @ sh)) / unorm)
        a = model.rate_matrix(t)
        for v in range(coeffs.d):
            qm = qv_density_matrix(a, v)
            gs = G @ sh
            wsq = float(np.sum((gs @ qm) * gs))
            if wsq > 0.0:
                sup["sigma_weighted"] = max(sup["sigma_weighted"],
                                            np.sqrt(wsq) / unorm)
    return LipschitzReport(constants=sup, samples=samples, seed=seed)


# -- duality identity -------------------------------------------------------------


def _level_terms(problem: FBSDEProblem, l: float, k: int, X, Y, Z):
    tree = problem.tree
    sgn = mode_sign(problem.mode)
    G = problem.g.G
    t = tree.times[k]
    drift = np.zeros((X.shape[0], problem.n))
    diffusion = np.zeros((X.shape[0], problem.n, tree.d))
    driver = np.zeros((X.shape[0], problem.m))
    states = tree.states[k]
    for s in range(tree.d):
        idx = np.flatnonzero(states == s)
        if idx.size == 0:
            continue
        xg, yg, zg = X[idx], Y[idx], Z[idx]
        dr = -(1.0 - l) * sgn * problem.c2p * (yg @ G)
        di = -(1.0 - l) * sgn * problem.c2p * np.einsum("nm,vmd->vnd", G.T, zg)
        dv = (1.0 - l) * sgn * problem.c2 * (xg @ G.T)
        if l > 0.0:
            dr = dr + l * np.asarray(problem.coeffs.b(t, s, xg, yg, zg))
            di = di + l * np.asarray(problem.coeffs.sigma(t, s, xg, yg, zg))
            dv = dv + l * np.asarray(problem.coeffs.f(t, s, xg, yg, zg))
        drift[idx] = dr + problem.forcing.phi(t, s)
        diffusion[idx] = di + problem.forcing.psi(t, s)
        driver[idx] = dv + problem.forcing.gamma(t, s)
    return drift, diffusion, driver


@dataclass
class DualityReport:
    lhs: float
    rhs_dt: float
    rhs_cross: float
    rhs_optional: float
    rhs_predictable: float
    rhs_predictable_qdt: float
    gap_optional: float
    gap_predictable: float
    gap_predictable_qdt: float

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in (
            "lhs", "rhs_dt", "rhs_cross", "rhs_optional", "rhs_predictable",
            "rhs_predictable_qdt", "gap_optional", "gap_predictable",
            "gap_predictable_qdt")}


def check_duality(problem_a: FBSDEProblem, field_a: SolutionField,
                  problem_b: FBSDEProblem, field_b: SolutionField,
                  l: float = 1.0) -> DualityReport:
    """Exact discrete summation-by-parts identity between two solved fields.

    E(Y_T, G X_T) - (Y_0, G X_0)
        = E sum_k [(G b-hat, y-hat) - (G x-hat, f-hat)] dt
        - E sum_k (G b-hat, f-hat) dt^2
        + E sum_k tr(G sigma-hat dM dM* Z-hat*)

    where hats are differences of full drifts/drivers (including forcing).
    The dt^2 cross term is what the continuous-time chain rule drops; the
    discrete identity holds to roundoff only with it.  The jump sum is
    evaluated three ways: pathwise (optional), with the exact one-step
    compensator E_k[dM dM*] = Q dt - (A e_j)(A e_j)* dt^2, and with the
    continuous-limit density Q dt alone (reported, O(dt^2) off).
    """
    tree = problem_a.tree
    if tree is not problem_b.tree:
        raise ValueError("fields must live on the same tree")
    G = problem_a.g.G
    dt = tree.dt
    lhs_terms = 0.0
    rhs_dt = 0.0
    rhs_cross = 0.0
    rhs_opt = 0.0
    rhs_pred = 0.0
    rhs_pred_qdt = 0.0
    for k in range(tree.N):
        Xa, Ya, Za = field_a.X[k], field_a.Y[k], field_a.Z[k]
        Xb, Yb, Zb = field_b.X[k], field_b.Y[k], field_b.Z[k]
        dra, dia, dva = _level_terms(problem_a, l, k, Xa, Ya, Za)
        drb, dib, dvb = _level_terms(problem_b, l, k, Xb, Yb, Zb)
        bh = dra - drb
        sh = dia - dib
        fh = dva - dvb
        xh = Xa - Xb
        yh = Ya - Yb
        zh = Za - Zb
        w = tree.node_probs[k]
        rhs_dt += dt * float(w @ (np.einsum("vm,vm->v", bh @ G.T, yh)
                                  - np.einsum("vn,vn->v", xh, fh @ G)))
        rhs_cross -= dt * dt * float(w @ np.einsum("vm,vm->v", bh @ G.T, fh))
        # optional form: per-edge dM dM*, weighted by edge probabilities
        gsh = np.einsum("mn,vnd->vmd", G, sh)
        dm = tree.edge_dm(k)                        # (v, i, d)
        pe = tree.edge_probs(k)                     # (v, i)
        a_inc = np.einsum("vmd,vid->vim", gsh, dm)  # G sigma-hat dM per edge
        z_inc = np.einsum("vmd,vid->vim", zh, dm)
        rhs_opt += float(np.einsum("v,vi,vim->", w, pe, a_inc * z_inc))
        # predictable forms; exact compensator is Q dt - (A e_j)(A e_j)* dt^2
        qv = tree.qv_at(k)                          # (v, d, d)
        states = tree.states[k]
        a_cols = np.empty((Xa.shape[0], tree.d))
        for s in range(tree.d):
            idx = np.flatnonzero(states == s)
            if idx.size:
                a_cols[idx] = tree.model.rate_matrix(tree.times[k])[:, s]
        comp = qv * dt - dt * dt * np.einsum("vi,vj->vij", a_cols, a_cols)
        rhs_pred += float(np.einsum(
            "v,vmd,vde,vme->", w, gsh, comp, zh))
        rhs_pred_qdt += dt * float(np.einsum(
            "v,vmd,vde,vme->", w, gsh, qv, zh))
    yh0 = field_a.Y[0][0] - field_b.Y[0][0]
    xh0 = field_a.X[0][0] - field_b.X[0][0]
    yhT = field_a.Y[tree.N] - field_b.Y[tree.N]
    xhT = field_a.X[tree.N] - field_b.X[tree.N]
    wT = tree.node_probs[tree.N]
    lhs_terms = float(wT @ np.einsum("vm,vm->v", yhT, xhT @ G.T)) \
        - float(yh0 @ (G @ xh0))
    opt_total = rhs_dt + rhs_cross + rhs_opt
    pred_total = rhs_dt + rhs_cross + rhs_pred
    pred_qdt_total = rhs_dt + rhs_cross + rhs_pred_qdt
    return DualityReport(
        lhs=lhs_terms, rhs_dt=rhs_dt, rhs_cross=rhs_cross,
        rhs_optional=rhs_opt, rhs_predictable=rhs_pred,
        rhs_predictable_qdt=rhs_pred_qdt,
        gap_optional=abs(lhs_terms - opt_total),
        gap_predictable=abs(lhs_terms - pred_total),
        gap_predictable_qdt=abs(lhs_terms - pred_qdt_total),
    )


# -- quadratic variation consistency ----------------------------------------------


@dataclass
class QVReport:
    mc_mean: np.ndarray
    exact: np.ndarray
    rel_error: float
    clt_tolerance: float
    paths: int

    def to_dict(self) -> dict:
        return {
            "mc_mean": self.mc_mean.tolist(),
            "exact": self.exact.tolist(),
            "rel_error": float(self.rel_error),
            "clt_tolerance": float(self.clt_tolerance),
            "paths": self.paths,
        }


def check_qv_consistency(model: ChainModel, T: float, N: int, paths: int,
                         seed: int = 0) -> QVReport:
    """Monte Carlo mean of [M,M]_T against the exact E<M,M>_T.

    The exact side integrates the QV density against the discrete forward
    state distribution; the CLT tolerance is three batch standard errors of
    the Frobenius-relative error.
    """
    if paths <= 0:
        raise ValueError("path budget must be positive")
    bundle = simulate_paths(model, T, N, 0, paths, seed)
    exact = exact_predictable_qv_mean(model, T, N, 0)
    scale = float(np.linalg.norm(exact))
    mc = bundle.mean_optional_qv()
    rel = float(np.linalg.norm(mc - exact)) / scale if scale > 0.0 else \
        float(np.linalg.norm(mc))
    # batch the paths to estimate the Monte Carlo error on the same statistic
    nb = 10
    size = paths // nb
    devs = []
    if size > 0:
        for b in range(nb):
            sub = PathBundle(model, T, N,
                             bundle.states[b * size:(b + 1) * size], seed)
            devs.append(np.linalg.norm(sub.mean_optional_qv() - exact)
                        / scale if scale > 0 else 0.0)
        clt = 3.0 * float(np.std(devs)) / np.sqrt(nb)
    else:
        clt = float("nan")
    return QVReport(mc_mean=mc, exact=exact, rel_error=rel,
                    clt_tolerance=clt, paths=paths)


# -- form equivalence --------------------------------------------------------------


@dataclass
class FormEquivalenceReport:
    max_discrepancy: float
    per_component: dict

    def to_dict(self) -> dict:
        return {"max_discrepancy": float(self.max_discrepancy),
                "per_component": {k: float(v)
                                  for k, v in self.per_component.items()}}


def _dm_form_sweep(problem: FBSDEProblem, l: float, current: SolutionField,
                   inner_tol: float = 1e-12, inner_max_iter: int = 50):
    """One decoupling sweep in the chain-driven form.

    Uses converted drifts b** = b_eff - sigma_eff A e_s, drivers
    f** = f_eff + z A e_s, and raw chain increments dm = e_i - e_j; the
    backward step subtracts Z E[dm] = Z A e_s dt.  Algebraically identical
    to the dM-form sweep, which is exactly what the equivalence check tests.
    """
    tree = problem.tree
    sgn = mode_sign(problem.mode)
    n, m, d, N = problem.n, problem.m, tree.d, tree.N
    dt = tree.dt
    G = problem.g.G
    out = SolutionField.zeros(tree, n, m)
    eye = np.eye(d)
    out.X[0][0] = problem.x0

    for k in range(N):
        t = tree.times[k]
        a = tree.model.rate_matrix(t)
        Y, Z = current.Y[k], current.Z[k]
        states = tree.states[k]
        drift = np.empty((tree.n_nodes(k), n))
        diffusion = np.empty((tree.n_nodes(k), n, d))
        for s in range(d):
            idx = np.flatnonzero(states == s)
            if idx.size == 0:
                continue
            xg, yg, zg = out.X[k][idx], Y[idx], Z[idx]
            dr = -(1.0 - l) * sgn * problem.c2p * (yg @ G)
            di = -(1.0 - l) * sgn * problem.c2p * np.einsum(
                "nm,vmd->vnd", G.T, zg)
            if l > 0.0:
                dr = dr + l * np.asarray(problem.coeffs.b(t, s, xg, yg, zg))
                di = di + l * np.asarray(problem.coeffs.sigma(t, s, xg, yg, zg))
            dr = dr + problem.forcing.phi(t, s)
            di = di + problem.forcing.psi(t, s)
            drift[idx] = dr - di @ a[:, s]          # b** = b - sigma A e_s
            diffusion[idx] = di
        # raw chain increments dm = e_i - e_j per (state, child)
        dmr = np.stack([eye - eye[s] for s in range(d)])   # (s, i, comp)
        inc = np.einsum("vnw,viw->vin", diffusion, dmr[states])
        out.X[k + 1] = (out.X[k][:, None, :] + dt * drift[:, None, :]
                        + inc).reshape(-1, n)

    leaves = tree.states[N]
    YN = (1.0 - l) * (out.X[N] @ G.T)
    for s in range(d):
        idx = np.flatnonzero(leaves == s)
        if idx.size == 0:
            continue
        if l > 0.0:
            YN[idx] += l * np.asarray(problem.coeffs.phi(s, out.X[N][idx]))
        YN[idx] += problem.forcing.xi(s)
    out.Y[N] = YN

    for k in range(N - 1, -1, -1):
        t = tree.times[k]
        a = tree.model.rate_matrix(t)
        states = tree.states[k]
        mean, out.Z[k] = tree.represent(k, out.Y[k + 1])
        ycur = mean.copy()
        for _ in range(inner_max_iter):
            ynew = np.empty_like(ycur)
            for s in range(d):
                idx = np.flatnonzero(states == s)
                if idx.size == 0:
                    continue
                xg, zg = out.X[k][idx], out.Z[k][idx]
                dv = (1.0 - l) * sgn * problem.c2 * (xg @ G.T)
                if l > 0.0:
                    dv = dv + l * np.asarray(
                        problem.coeffs.f(t, s, xg, ycur[idx], zg))
                dv = dv + problem.forcing.gamma(t, s)
                # f** adds z A e_s; the dm-form backward then subtracts
                # Z E[dm] = Z A e_s dt, so both corrections appear explicitly
                dv = dv + zg @ a[:, s]
                ynew[idx] = mean[idx] + dt * dv - dt * (zg @ a[:, s])
            if float(np.abs(ynew - ycur).max()) <= inner_tol:
                ycur = ynew
                break
            ycur = ynew
        out.Y[k] = ycur
    return out


def check_form_equivalence(problem: FBSDEProblem, l: float = 1.0,
                           start: SolutionField | None = None,
                           seed: int = 0) -> FormEquivalenceReport:
    """Run one sweep in the martingale form and one in the chain-driven form
    from the same input field; report the node-wise max discrepancy."""
    if start is None:
        start = SolutionField.random(problem.tree, problem.n, problem.m,
                                     seed=seed, scale=0.5)
    a = picard_sweep(problem, l, start)
    b = _dm_form_sweep(problem, l, start)
    per = {
        "X": max(float(np.abs(a.X[k] - b.X[k]).max())
                 for k in range(problem.tree.N + 1)),
        "Y": max(float(np.abs(a.Y[k] - b.Y[k]).max())
                 for k in range(problem.tree.N + 1)),
        "Z": max(float(np.abs(a.Z[k] - b.Z[k]).max())
                 for k in range(problem.tree.N)),
    }
    return FormEquivalenceReport(max_discrepancy=max(per.values()),
                                 per_component=per)
