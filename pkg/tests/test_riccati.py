import numpy as np
import pytest

from mcfbsde.algebra import GStructure
from mcfbsde.riccati import (CASE_N_GT_M, CASE_N_LE_M, RiccatiProblem,
                             riccati_residual, solve_riccati)


def scalar_closed_form(a, b, k_terminal, s):
    """Independent oracle for K' = b - a K^2 (in reversed time s = T - t),
    K(0) = k_terminal, via the Moebius form of the scalar Riccati flow:

        K(s) = kappa (K0 + kappa tanh(w s)) / (kappa + K0 tanh(w s)),
        kappa = sqrt(b/a), w = sqrt(a b).

    Valid for a, b > 0 and K0 >= 0; handles both the tanh and coth branches.
    """
    kappa = np.sqrt(b / a)
    w = np.sqrt(a * b)
    th = np.tanh(w * s)
    return kappa * (k_terminal + kappa * th) / (kappa + k_terminal * th)


def test_scalar_tanh_case():
    g = GStructure([[1.0]])
    prob = RiccatiProblem(CASE_N_LE_M, 1.0, 1.0, g, 0.0, 1.0, 1000)
    sol = solve_riccati(prob)
    assert sol.K[0][0, 0] == pytest.approx(np.tanh(1.0), abs=1e-8)
    assert sol.K[0][0, 0] == pytest.approx(0.761594, abs=1e-6)


def test_terminal_condition_exact():
    g = GStructure([[1.0], [1.0]])      # m=2, n=1: G*G = [[2]]
    prob = RiccatiProblem(CASE_N_LE_M, 1.0, 1.0, g, 2.0, 1.0, 10)
    sol = solve_riccati(prob)
    np.testing.assert_allclose(sol.K[-1], [[4.0]])


def test_tiny_c2_continuity():
    g = GStructure([[1.0]])
    prob = RiccatiProblem(CASE_N_LE_M, 1e-8, 1.0, g, 0.0, 1.0, 200)
    sol = solve_riccati(prob)
    assert 0.0 <= sol.K[0][0, 0] <= 1e-7


def test_scalar_oracle_sweep_case_n_le_m():
    rng = np.random.default_rng(12)
    for _ in range(20):
        c2 = rng.uniform(0.3, 3.0)
        c2p = rng.uniform(0.3, 3.0)
        lam = rng.uniform(0.0, 2.0)
        gsc = rng.uniform(0.5, 2.0)
        T = rng.uniform(0.5, 2.0)
        g = GStructure([[gsc]])
        prob = RiccatiProblem(CASE_N_LE_M, c2, c2p, g, lam, T, 1000)
        sol = solve_riccati(prob)
        # -Kdot = -c2p K^2 + c2 g^2: reversed-time K' = c2 g^2 - c2p K^2
        for k in (0, 250, 500, 999):
            s = T - sol.times[k]
            want = scalar_closed_form(c2p, c2 * gsc * gsc, lam * gsc * gsc, s)
            assert sol.K[k][0, 0] == pytest.approx(want, abs=1e-8)


def test_scalar_oracle_sweep_case_n_gt_m():
    rng = np.random.default_rng(13)
    for _ in range(20):
        c2 = rng.uniform(0.3, 3.0)
        c2p = rng.uniform(0.3, 3.0)
        lam = rng.uniform(0.0, 2.0)
        gsc = rng.uniform(0.5, 2.0)
        T = rng.uniform(0.5, 2.0)
        g = GStructure([[gsc]])
        prob = RiccatiProblem(CASE_N_GT_M, c2, c2p, g, lam, T, 1000)
        sol = solve_riccati(prob)
        # -Kdot = c2 - c2p g^2 K^2, K(T) = lam
        for k in (0, 500, 999):
            s = T - sol.times[k]
            want = scalar_closed_form(c2p * gsc * gsc, c2, lam, s)
            assert sol.K[k][0, 0] == pytest.approx(want, abs=1e-8)


def test_matrix_case_reduces_to_eigenvalue_flows():
    # for diagonal G the matrix flow decouples into scalar flows per
    # eigenvalue of G*G; the closed form is an independent matrix oracle
    g = GStructure(np.diag([1.0, 1.7]))
    c2, c2p, lam, T = 1.3, 0.7, 0.4, 1.2
    prob = RiccatiProblem(CASE_N_LE_M, c2, c2p, g, lam, T, 800)
    sol = solve_riccati(prob)
    for k in (0, 400, 799):
        s = T - sol.times[k]
        for i, gsq in enumerate((1.0, 1.7 ** 2)):
            want = scalar_closed_form(c2p, c2 * gsq, lam * gsq, s)
            assert sol.K[k][i, i] == pytest.approx(want, abs=1e-8)
        assert abs(sol.K[k][0, 1]) <= 1e-10


def test_solution_symmetric_psd():
    g = GStructure(np.array([[1.0, 0.2], [0.1, 0.8], [0.3, -0.4]]))
    prob = RiccatiProblem(CASE_N_LE_M, 1.0, 1.0, g, 0.7, 1.5, 400)
    sol = solve_riccati(prob)
    assert sol.symmetry_defect() <= 1e-10
    assert sol.min_eigenvalue() >= -1e-10


def test_monotone_in_lambda():
    g = GStructure(np.array([[1.0, 0.2], [0.1, 0.8]]))
    sols = []
    for lam in (0.0, 0.5, 2.0):
        prob = RiccatiProblem(CASE_N_LE_M, 1.0, 1.0, g, lam, 1.0, 300)
        sols.append(solve_riccati(prob))
    for lo, hi in ((0, 1), (1, 2)):
        for k in range(0, 301, 50):
            gap = sols[hi].K[k] - sols[lo].K[k]
            assert np.linalg.eigvalsh(gap).min() >= -1e-8


def test_residual_of_true_solution_small():
    g = GStructure([[1.0]])
    prob = RiccatiProblem(CASE_N_LE_M, 1.0, 1.0, g, 0.0, 1.0, 1000)
    sol = solve_riccati(prob)
    assert riccati_residual(sol, prob) <= 1e-6


def test_residual_flags_non_solution():
    g = GStructure([[1.0], [1.0]])
    prob = RiccatiProblem(CASE_N_LE_M, 1.0, 1.0, g, 0.0, 1.0, 50)
    sol = solve_riccati(prob)
    sol.K[:] = 0.0
    want = np.linalg.norm(1.0 * g.G.T @ g.G)
    assert riccati_residual(sol, prob) == pytest.approx(want)


def test_residual_order_two_under_halving():
    g = GStructure(np.array([[1.0, 0.3], [0.0, 0.9]]))
    res = []
    for N in (200, 400):
        prob = RiccatiProblem(CASE_N_LE_M, 1.2, 0.8, g, 0.5, 1.0, N)
        res.append(riccati_residual(solve_riccati(prob), prob))
    ratio = res[0] / res[1]
    assert 3.5 <= ratio <= 4.5


def test_problem_validation():
    g = GStructure([[1.0]])
    with pytest.raises(ValueError):
        RiccatiProblem(CASE_N_LE_M, 0.0, 1.0, g, 0.0, 1.0, 10)
    with pytest.raises(ValueError):
        RiccatiProblem(CASE_N_LE_M, 1.0, 1.0, g, -0.1, 1.0, 10)
    with pytest.raises(ValueError):
        RiccatiProblem("CASE_BAD", 1.0, 1.0, g, 0.0, 1.0, 10)
