"""Finite-state Markov chain machinery.

States are the unit vectors e_1 .. e_d of R^d.  The generator A(t) uses the
column convention: A[i, j] is the jump rate from state j to state i, so every
column of A sums to zero and the chain indicator m satisfies
dm = A m dt + dM with M the compensated martingale.

Discrete transitions use the Euler law p_i = delta_ij + A_ij * dt rather than
the matrix exponential.  With that law the compensated increment

    dM(j -> i) = e_i - e_j - A e_j * dt

is an exact discrete martingale (sum_i p_i dM_i = 0 to machine precision),
which is what makes the representation and duality identities downstream
testable at 1e-12 instead of O(dt^2).
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_NODE_BUDGET = 2**20
NODE_BUDGET_ENV = "MCFBSDE_NODE_BUDGET"


class GeneratorError(ValueError):
    """Matrix fails the rate-matrix requirements (shape, NaN, signs, sums)."""


class StepConstraintError(ValueError):
    """dt * max|A_jj| > 1: transition probabilities would leave [0, 1]."""


class NodeBudgetError(ValueError):
    """Full path tree would exceed the configured node budget."""


@dataclass(frozen=True)
class ValidationVerdict:
    ok: bool
    message: str = ""

    def __bool__(self) -> bool:
        return self.ok


def _as_generator_fn(a) -> Callable[[float], np.ndarray]:
    if callable(a):
        return lambda t: np.asarray(a(t), dtype=float)
    mat = np.asarray(a, dtype=float)
    return lambda t: mat


def validate_generator(a_values, tol: float = 1e-12) -> ValidationVerdict:
    """Check a sequence of candidate generator matrices.

    Accepts iff every matrix is square of a common dimension d >= 2, has
    finite entries, column sums that vanish within ``tol`` and off-diagonal
    entries >= -tol (tiny negatives are treated as zero by consumers).
    Returns a verdict carrying the first offending entry; raises
    GeneratorError for structural problems (dimension mismatch, NaN/Inf).
    """
    mats = [np.asarray(m, dtype=float) for m in a_values]
    if not mats:
        raise GeneratorError("no matrices supplied")
    d = mats[0].shape[0] if mats[0].ndim == 2 else -1
    for idx, m in enumerate(mats):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise GeneratorError(f"matrix {idx} is not square: shape {m.shape}")
        if m.shape[0] != d:
            raise GeneratorError(
                f"matrix {idx} has dimension {m.shape[0]}, expected {d}"
            )
        if not np.all(np.isfinite(m)):
            raise GeneratorError(f"matrix {idx} contains NaN/Inf entries")
    if d < 2:
        raise GeneratorError(f"state count must be >= 2, got {d}")

    for idx, m in enumerate(mats):
        colsums = m.sum(axis=0)
        j = int(np.argmax(np.abs(colsums)))
        if abs(colsums[j]) > tol:
            return ValidationVerdict(
                False,
                f"matrix {idx}: column {j + 1} sums to {colsums[j]:.6g}",
            )
        off = m - np.diag(np.diag(m))
        if off.min() < -tol:
            i, j = np.unravel_index(int(np.argmin(off)), off.shape)
            return ValidationVerdict(
                False,
                f"matrix {idx}: off-diagonal entry ({i + 1},{j + 1}) = "
                f"{m[i, j]:.6g} is negative",
            )
        if np.diag(m).max() > tol:
            j = int(np.argmax(np.diag(m)))
            return ValidationVerdict(
                False, f"matrix {idx}: diagonal entry {j + 1} is positive"
            )
    return ValidationVerdict(True, "ok")


@dataclass
class ChainModel:
    """State count d plus the generator evaluator t -> d x d matrix.

    ``generator`` may be a constant matrix or a callable of time.  Validation
    happens on construction (at t = 0) and again on every evaluation.
    """

    d: int
    generator: Callable[[float], np.ndarray] | np.ndarray | Sequence

    def __post_init__(self):
        if self.d < 2:
            raise GeneratorError(f"state count must be >= 2, got {self.d}")
        self._fn = _as_generator_fn(self.generator)
        verdict = validate_generator([self._fn(0.0)])
        if not verdict.ok:
            raise GeneratorError(verdict.message)
        if self._fn(0.0).shape[0] != self.d:
            raise GeneratorError(
                f"generator dimension {self._fn(0.0).shape[0]} != d = {self.d}"
            )

    def rate_matrix(self, t: float) -> np.ndarray:
        a = self._fn(t)
        verdict = validate_generator([a])
        if not verdict.ok:
            raise GeneratorError(f"A(t={t:.6g}): {verdict.message}")
        # clamp roundoff negatives on the off-diagonal so probabilities stay >= 0
        off = a - np.diag(np.diag(a))
        if off.min() < 0.0:
            a = a.copy()
            neg = (a < 0.0) & ~np.eye(self.d, dtype=bool)
            a[neg] = 0.0
        return a

    def max_exit_rate(self, times) -> float:
        return max(float(np.abs(np.diag(self._fn(t))).max()) for t in times)


def qv_density(model: ChainModel, state: int, t: float) -> np.ndarray:
    """Quadratic-variation density Q(e_j, t) for 0-based state j.

    Q = diag(A e_j) - diag(e_j) A* - A diag(e_j); symmetric PSD with zero
    row sums.  This is the density of the predictable bracket of M.
    """
    a = model.rate_matrix(t)
    return qv_density_matrix(a, state)


def qv_density_matrix(a: np.ndarray, state: int) -> np.ndarray:
    d = a.shape[0]
    if not 0 <= state < d:
        raise IndexError(f"state {state} out of range for d={d}")
    ej = np.zeros(d)
    ej[state] = 1.0
    aej = a[:, state]
    q = np.diag(aej) - np.outer(ej, aej) - np.outer(aej, ej)
    # the two outer products implement diag(e_j) A* and A diag(e_j)
    return q


class DiscreteChainTree:
    """Uniform time grid plus the full path tree of the chain.

    Level k holds d^k nodes; node i at level k has children i*d + s at level
    k+1 carrying state s.  Edge data (transition probabilities, compensated
    increments dM, QV densities) depend only on (level, parent state, child
    state) and are stored per level.
    """

    def __init__(self, model: ChainModel, T: float, N: int, root_state: int,
                 node_budget: int | None = None):
        if N < 1:
            raise ValueError("need at least one time step")
        if not 0 <= root_state < model.d:
            raise IndexError(f"root state {root_state} out of range")
        budget = _resolve_budget(node_budget)
        d = model.d
        total = _tree_size(d, N)
        if total > budget:
            raise NodeBudgetError(
                f"tree with d={d}, N={N} needs {total} nodes, budget is "
                f"{budget} (set {NODE_BUDGET_ENV} to override)"
            )
        self.model = model
        self.d = d
        self.T = float(T)
        self.N = int(N)
        self.dt = float(T) / N
        self.root_state = int(root_state)
        self.times = np.linspace(0.0, T, N + 1)

        maxrate = model.max_exit_rate(self.times[:-1])
        if self.dt * maxrate > 1.0 + 1e-12:
            nmin = int(np.ceil(self.T * maxrate))
            raise StepConstraintError(
                f"dt*max|A_jj| = {self.dt * maxrate:.6g} > 1; need N >= {nmin}"
            )
        if self.dt * maxrate > 1.0 - 1e-12:
            warnings.warn(
                "dt*max|A_jj| = 1: transition probabilities hit {0, 1}",
                stacklevel=2,
            )

        # per-level edge data, indexed [k][from_state, to_state]
        self.trans = np.empty((N, d, d))       # p(j -> i) at t_k
        self.dm = np.empty((N, d, d, d))       # dM vector per (j, i)
        self.qv = np.empty((N, d, d, d))       # Q(e_j, t_k) per j
        eye = np.eye(d)
        for k in range(N):
            a = model.rate_matrix(self.times[k])
            p = eye + self.dt * a.T            # rows = current state
            p = np.clip(p, 0.0, None)
            if p.max() > 1.0 + 1e-12:
                raise StepConstraintError(
                    f"transition probability {p.max():.6g} > 1 at step {k}"
                )
            self.trans[k] = p
            for j in range(d):
                aej = a[:, j]
                self.dm[k, j] = eye - eye[j] - self.dt * aej
                self.qv[k, j] = qv_density_matrix(a, j)
            # self.dm[k, j, i] = e_i - e_j - A e_j dt

        self.states = [np.array([self.root_state], dtype=np.int64)]
        self.node_probs = [np.array([1.0])]
        pattern = np.arange(d, dtype=np.int64)
        for k in range(N):
            prev = self.states[k]
            self.states.append(np.tile(pattern, prev.size))
            pr = self.node_probs[k][:, None] * self.trans[k][prev, :]
            self.node_probs.append(pr.ravel())

    # -- structure helpers ---------------------------------------------------

    def n_nodes(self, level: int) -> int:
        return self.states[level].size

    def child_block(self, level: int, values: np.ndarray) -> np.ndarray:
        """Reshape level-(k+1) node values to (nodes_k, d, ...) child blocks."""
        v = np.asarray(values)
        return v.reshape((self.n_nodes(level), self.d) + v.shape[1:])

    def edge_dm(self, level: int) -> np.ndarray:
        """dM vectors on the edges leaving level k, shape (nodes_k, d, d)."""
        return self.dm[level][self.states[level]]

    def edge_probs(self, level: int) -> np.ndarray:
        """Transition probabilities out of level k, shape (nodes_k, d)."""
        return self.trans[level][self.states[level]]

    def qv_at(self, level: int) -> np.ndarray:
        """Q(state, t_k) per node at level k, shape (nodes_k, d, d)."""
        return self.qv[level][self.states[level]]

    def expectation(self, level: int, values: np.ndarray) -> np.ndarray:
        """Exact expectation of per-node values at a level."""
        v = np.asarray(values, dtype=float)
        w = self.node_probs[level]
        return np.tensordot(w, v, axes=(0, 0))

    def conditional_mean(self, level: int, child_values: np.ndarray) -> np.ndarray:
        """E[next-level values | node] for every node at ``level``."""
        blocks = self.child_block(level, child_values)
        p = self.edge_probs(level)
        return np.einsum("vi,vi...->v...", p, blocks)

    def represent(self, level: int, child_values: np.ndarray):
        """Exact martingale representation of next-level values.

        Returns (mean, Z) per node: mean = sum_i p_i V_i and Z with columns
        Z[:, i] = V_i - mean (the canonical centered representative), so that
        V_i - mean = Z @ dM(-> i) holds exactly on every edge.
        """
        blocks = self.child_block(level, child_values)  # (v, d) or (v, d, m)
        if blocks.ndim == 2:
            blocks = blocks[:, :, None]
            squeeze = True
        else:
            squeeze = False
        p = self.edge_probs(level)
        mean = np.einsum("vi,vim->vm", p, blocks)
        z = blocks.transpose(0, 2, 1) - mean[:, :, None]
        if squeeze:
            return mean[:, 0], z[:, 0, :]
        return mean, z

    def martingale_defect(self) -> float:
        """max_k,j |sum_i p_i dM(j -> i)|, exact-zero up to roundoff."""
        worst = 0.0
        for k in range(self.N):
            s = np.einsum("ji,jiv->jv", self.trans[k], self.dm[k])
            worst = max(worst, float(np.abs(s).max()))
        return worst


def _tree_size(d: int, N: int) -> int:
    return (d ** (N + 1) - 1) // (d - 1)


def _resolve_budget(node_budget: int | None) -> int:
    if node_budget is not None:
        return int(node_budget)
    env = os.environ.get(NODE_BUDGET_ENV)
    return int(env) if env else DEFAULT_NODE_BUDGET


def build_tree(model: ChainModel, T: float, N: int, root_state: int,
               node_budget: int | None = None) -> DiscreteChainTree:
    """Construct the full discrete path tree (d^N leaves, budget-guarded)."""
    return DiscreteChainTree(model, T, N, root_state, node_budget)


# -- simulation ---------------------------------------------------------------


@dataclass
class ChainPath:
    """One simulated trajectory: states per grid time plus its grid."""

    states: np.ndarray          # (N+1,) 0-based state indices
    times: np.ndarray           # (N+1,)
    model: ChainModel
    lineage: tuple = ()

    def increments(self) -> np.ndarray:
        """Compensated increments dM per step, shape (N, d)."""
        d = self.model.d
        n = self.states.size - 1
        dm = np.zeros((n, d))
        dt = self.times[1] - self.times[0]
        eye = np.eye(d)
        for k in range(n):
            a = self.model.rate_matrix(self.times[k])
            j, i = self.states[k], self.states[k + 1]
            dm[k] = eye[i] - eye[j] - dt * a[:, j]
        return dm


class PathBundle:
    """Monte Carlo carrier: many i.i.d. chain paths under the Euler law.

    States are stored densely; dM increments are recomputed on demand from
    the states and the generator (they are a deterministic function of both).
    """

    def __init__(self, model: ChainModel, T: float, N: int, states: np.ndarray,
                 seed: int):
        self.model = model
        self.T = float(T)
        self.N = int(N)
        self.dt = self.T / N
        self.times = np.linspace(0.0, T, N + 1)
        self.states = states
        self.seed = seed

    @property
    def count(self) -> int:
        return self.states.shape[0]

    def path(self, i: int) -> ChainPath:
        return ChainPath(self.states[i], self.times, self.model,
                         lineage=(self.seed, i))

    def transition_counts(self) -> np.ndarray:
        """Counts of (step, from_state, to_state) over all paths, (N, d, d)."""
        d = self.model.d
        out = np.zeros((self.N, d, d), dtype=np.int64)
        for k in range(self.N):
            pair = self.states[:, k] * d + self.states[:, k + 1]
            out[k] = np.bincount(pair, minlength=d * d).reshape(d, d)
        return out

    def mean_optional_qv(self) -> np.ndarray:
        """Monte Carlo mean of [M,M]_T, aggregated over transition counts."""
        d = self.model.d
        counts = self.transition_counts()
        acc = np.zeros((d, d))
        eye = np.eye(d)
        for k in range(self.N):
            a = self.model.rate_matrix(self.times[k])
            for j in range(d):
                row = counts[k, j]
                if not row.any():
                    continue
                for i in range(d):
                    if row[i]:
                        dm = eye[i] - eye[j] - self.dt * a[:, j]
                        acc += row[i] * np.outer(dm, dm)
        return acc / self.count


def simulate_paths(model: ChainModel, T: float, N: int, root_state: int,
                   count: int, seed: int) -> PathBundle:
    """Simulate i.i.d. paths under the discrete Euler transition law.

    Deterministic given ``seed``; per-path streams are derived from a single
    Philox key so results do not depend on vectorisation order.
    """
    if count <= 0:
        raise ValueError("path count must be positive")
    if not 0 <= root_state < model.d:
        raise IndexError(f"root state {root_state} out of range")
    dt = T / N
    times = np.linspace(0.0, T, N + 1)
    maxrate = model.max_exit_rate(times[:-1])
    if dt * maxrate > 1.0 + 1e-12:
        nmin = int(np.ceil(T * maxrate))
        raise StepConstraintError(
            f"dt*max|A_jj| = {dt * maxrate:.6g} > 1; need N >= {nmin}"
        )
    rng = np.random.Generator(np.random.Philox(seed))
    d = model.d
    states = np.empty((count, N + 1), dtype=np.int64)
    states[:, 0] = root_state
    eye = np.eye(d)
    for k in range(N):
        a = model.rate_matrix(times[k])
        p = np.clip(eye + dt * a.T, 0.0, None)
        cum = np.cumsum(p, axis=1)
        cum[:, -1] = 1.0
        u = rng.random(count)
        states[:, k + 1] = (u[:, None] >= cum[states[:, k]]).sum(axis=1)
    return PathBundle(model, T, N, states, seed)


def optional_qv(path: ChainPath) -> np.ndarray:
    """Pathwise optional quadratic variation: sum of dM dM* over steps."""
    dm = path.increments()
    return dm.T @ dm


def predictable_qv(model: ChainModel, path: ChainPath) -> np.ndarray:
    """Predictable bracket along a path: sum_k Q(state_k, t_k) dt."""
    n = path.states.size - 1
    dt = path.times[1] - path.times[0]
    acc = np.zeros((model.d, model.d))
    for k in range(n):
        acc += qv_density(model, int(path.states[k]), float(path.times[k]))
    return acc * dt


def represent_martingale(next_values, state: int, A, t: float, dt: float):
    """Exact one-step martingale representation.

    ``next_values`` holds one value per child state (shape (d,) scalar or
    (d, m) vector).  Returns (mean, Z) with mean = sum_i p_i V_i and
    Z[:, i] = V_i - mean, the canonical centered representative: then
    V_i - mean = Z @ dM(-> i) exactly for every child i.  Z is unique only
    up to additions w 1* that vanish against dM.
    """
    a = np.asarray(A(t) if callable(A) else A, dtype=float)
    d = a.shape[0]
    vals = np.asarray(next_values, dtype=float)
    scalar = vals.ndim == 1
    if scalar:
        vals = vals[:, None]
    if vals.shape[0] != d:
        raise ValueError(f"need one value per child state, got {vals.shape}")
    p = np.zeros(d)
    p[state] = 1.0
    p = np.clip(p + dt * a[:, state], 0.0, None)
    mean = p @ vals
    z = vals.T - mean[:, None]
    if scalar:
        return float(mean[0]), z[0]
    return mean, z


def exact_state_distribution(model: ChainModel, T: float, N: int,
                             root_state: int) -> np.ndarray:
    """Forward Kolmogorov under the Euler law: pi_k per grid time, (N+1, d)."""
    d = model.d
    dt = T / N
    times = np.linspace(0.0, T, N + 1)
    pi = np.zeros((N + 1, d))
    pi[0, root_state] = 1.0
    eye = np.eye(d)
    for k in range(N):
        a = model.rate_matrix(times[k])
        p = np.clip(eye + dt * a.T, 0.0, None)
        pi[k + 1] = pi[k] @ p
    return pi


def exact_predictable_qv_mean(model: ChainModel, T: float, N: int,
                              root_state: int) -> np.ndarray:
    """E<M,M>_T computed exactly from the discrete state distribution."""
    pi = exact_state_distribution(model, T, N, root_state)
    dt = T / N
    times = np.linspace(0.0, T, N + 1)
    acc = np.zeros((model.d, model.d))
    for k in range(N):
        a = model.rate_matrix(times[k])
        for j in range(model.d):
            if pi[k, j] > 0.0:
                acc += pi[k, j] * qv_density_matrix(a, j)
    return acc * dt
