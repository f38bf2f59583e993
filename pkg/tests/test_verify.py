import numpy as np
import pytest

from mcfbsde.algebra import CoefficientSet, GStructure
from mcfbsde.chain import ChainModel, build_tree
from mcfbsde.fields import Forcing, SolutionField
from mcfbsde.problems import get_builtin, make_problem
from mcfbsde.solver import solve_continuation
from mcfbsde.verify import (LITERAL, PROOF_SUFFICIENT, check_duality,
                            check_form_equivalence, check_lipschitz,
                            check_monotonicity, check_qv_consistency,
                            reevaluate_witness)

A2 = np.array([[-1.0, 2.0], [1.0, -2.0]])


def _zero_coeffs(d=2):
    return CoefficientSet(
        n=1, m=1, d=d,
        b=lambda t, s, x, y, z: np.zeros_like(x),
        sigma=lambda t, s, x, y, z: np.zeros_like(z),
        f=lambda t, s, x, y, z: np.zeros_like(y),
        phi=lambda s, x: x,          # Phi = G x keeps c3 positive
    )


# -- monotonicity -------------------------------------------------------------------


def test_proof_sufficient_passes_on_scalar_monotone(model2):
    bp = get_builtin("scalar-monotone", 2)
    rep = check_monotonicity(bp.coeffs, GStructure(bp.G), model2, "THM2",
                             PROOF_SUFFICIENT, samples=10_000, seed=0)
    assert rep.status == "PASS"
    assert rep.c2 >= 0.99 and rep.c2p >= 0.99 and rep.c3 >= 0.99


def test_literal_fails_with_forced_witness(model2):
    bp = get_builtin("scalar-monotone", 2)
    rep = check_monotonicity(bp.coeffs, GStructure(bp.G), model2, "THM2",
                             LITERAL, samples=2_000, seed=0)
    assert rep.status == "FAIL"
    assert rep.worst is not None
    zh = np.array(rep.worst.u1[2]) - np.array(rep.worst.u2[2])
    xh = np.array(rep.worst.u1[0]) - np.array(rep.worst.u2[0])
    assert np.allclose(zh, 0.0)
    assert not np.allclose(xh, 0.0)
    assert "H-inequality" in rep.worst.inequality


def test_zero_coefficients_literal_fails_sufficient_degenerate(model2):
    coeffs = _zero_coeffs()
    g = GStructure([[1.0]])
    lit = check_monotonicity(coeffs, g, model2, "THM2", LITERAL,
                             samples=1_000, seed=1)
    suf = check_monotonicity(coeffs, g, model2, "THM2", PROOF_SUFFICIENT,
                             samples=1_000, seed=1)
    assert lit.status == "FAIL"
    assert suf.status == "DEGENERATE"
    assert suf.c2 == 0.0 and suf.c2p == 0.0


def test_thm3_mirror_passes_reversed_inequalities(model2):
    bp = get_builtin("thm3-mirror", 2)
    rep = check_monotonicity(bp.coeffs, GStructure(bp.G), model2, "THM3",
                             PROOF_SUFFICIENT, samples=8_000, seed=2)
    assert rep.status == "PASS"
    assert rep.c2 == pytest.approx(1.0, abs=1e-9)
    assert rep.c2p == pytest.approx(0.8, abs=1e-9)
    assert rep.c3 == pytest.approx(1.0, abs=1e-9)


def test_estimated_constants_monotone_in_sample_count(model2):
    bp = get_builtin("linear-affine", 2, seed=9)
    g = GStructure(bp.G)
    vals = []
    for samples in (500, 2_000, 8_000):
        rep = check_monotonicity(bp.coeffs, g, model2, "THM2",
                                 PROOF_SUFFICIENT, samples=samples, seed=5)
        vals.append((rep.c2, rep.c2p, rep.c3))
    for a, b in zip(vals, vals[1:]):
        assert b[0] <= a[0] + 1e-12
        assert b[1] <= a[1] + 1e-12
        assert b[2] <= a[2] + 1e-12


def test_witness_margin_reproducible(model2):
    bp = get_builtin("scalar-monotone", 2)
    g = GStructure(bp.G)
    rep = check_monotonicity(bp.coeffs, g, model2, "THM2", LITERAL,
                             samples=500, seed=0)
    margin = reevaluate_witness(bp.coeffs, g, model2, "THM2", rep.worst)
    assert margin == pytest.approx(rep.worst.margin, abs=1e-12)


def test_report_serialises(model2):
    bp = get_builtin("scalar-monotone", 2)
    rep = check_monotonicity(bp.coeffs, GStructure(bp.G), model2, "THM2",
                             LITERAL, samples=200, seed=0)
    d = rep.to_dict()
    assert d["status"] == "FAIL"
    assert d["worst"]["inequality"].startswith("H")
    import json
    json.dumps(d)


# -- Lipschitz ---------------------------------------------------------------------


def test_lipschitz_linear_matrix_operator_norm(model2):
    B = np.array([[1.0, 2.0], [0.0, 1.5]])
    coeffs = CoefficientSet(
        n=2, m=2, d=2,
        b=lambda t, s, x, y, z: x @ B.T,
        sigma=lambda t, s, x, y, z: np.zeros_like(z),
        f=lambda t, s, x, y, z: np.zeros_like(y),
        phi=lambda s, x: np.zeros_like(x),
    )
    g = GStructure(np.eye(2))
    rep = check_lipschitz(coeffs, g, model2, samples=10_000, seed=0)
    opnorm = np.linalg.svd(B, compute_uv=False)[0]
    assert rep.constants["b"] <= opnorm + 1e-12
    assert rep.constants["b"] >= 0.95 * opnorm


def test_lipschitz_constant_coefficients_zero(model2):
    coeffs = CoefficientSet(
        n=1, m=1, d=2,
        b=lambda t, s, x, y, z: np.ones_like(x) * 3.0,
        sigma=lambda t, s, x, y, z: np.ones_like(z),
        f=lambda t, s, x, y, z: np.full_like(y, -2.0),
        phi=lambda s, x: np.ones_like(x),
    )
    rep = check_lipschitz(coeffs, GStructure([[1.0]]), model2,
                          samples=2_000, seed=0)
    for key in ("b", "sigma", "f", "phi", "F", "H", "sigma_weighted"):
        assert rep.constants[key] == 0.0


def test_lipschitz_tanh_terminal(model2):
    coeffs = CoefficientSet(
        n=1, m=1, d=2,
        b=lambda t, s, x, y, z: np.zeros_like(x),
        sigma=lambda t, s, x, y, z: np.zeros_like(z),
        f=lambda t, s, x, y, z: np.zeros_like(y),
        phi=lambda s, x: np.tanh(x),
    )
    rep = check_lipschitz(coeffs, GStructure([[1.0]]), model2,
                          samples=10_000, seed=0)
    assert rep.constants["phi"] <= 1.0 + 1e-6


# -- duality -----------------------------------------------------------------------


def test_duality_identical_data_all_zero(model2):
    tree = build_tree(model2, 1.0, 6, 0)
    prob = make_problem(get_builtin("scalar-monotone", 2), tree)
    field, _ = solve_continuation(prob)
    rep = check_duality(prob, field, prob, field)
    assert rep.lhs == 0.0
    assert rep.gap_optional == 0.0
    assert rep.gap_predictable == 0.0


def test_duality_exact_for_initial_state_pairs(model2):
    tree = build_tree(model2, 1.0, 8, 0)
    bp = get_builtin("scalar-monotone", 2)
    pa = make_problem(bp, tree, x0=np.array([0.0]))
    pb = make_problem(bp, tree, x0=np.array([1.0]))
    fa, _ = solve_continuation(pa)
    fb, _ = solve_continuation(pb)
    rep = check_duality(pa, fa, pb, fb)
    assert rep.gap_optional <= 1e-10
    assert rep.gap_predictable <= 1e-10


def test_duality_exact_with_jump_activating_forcing(model2):
    # state-modulated gamma and xi force Z-hat away from zero, so the
    # quadratic-variation terms genuinely participate; the naive Q dt form
    # then shows its O(dt^2) defect while the exact compensator stays tight
    tree = build_tree(model2, 1.0, 8, 0)
    bp = get_builtin("scalar-monotone", 2)
    forcing = Forcing(
        phi=lambda t, s: np.zeros(1),
        psi=lambda t, s: np.zeros((1, 2)),
        gamma=lambda t, s: np.array([0.5 if s == 0 else -0.2]),
        xi=lambda s: np.array([0.3 if s == 0 else -0.1]),
    )
    pa = make_problem(bp, tree, x0=np.array([0.0]))
    pb = make_problem(bp, tree, forcing=forcing, x0=np.array([1.0]))
    fa, _ = solve_continuation(pa)
    fb, _ = solve_continuation(pb)
    zhat = max(float(np.abs(fa.Z[k] - fb.Z[k]).max()) for k in range(tree.N))
    assert zhat > 1e-2
    rep = check_duality(pa, fa, pb, fb)
    assert rep.gap_optional <= 1e-10
    assert rep.gap_predictable <= 1e-10
    assert rep.gap_predictable_qdt > 1e-4


def test_duality_exact_for_any_dynamics_satisfying_fields(model2):
    # the identity is a summation-by-parts fact about the discrete dynamics,
    # so it must hold for solver and oracle outputs alike
    from mcfbsde.oracle import brute_force_solve
    tree = build_tree(model2, 1.0, 6, 0)
    bp = get_builtin("two-dim-G", 2)
    pa = make_problem(bp, tree, x0=np.array([0.0]))
    pb = make_problem(bp, tree, x0=np.array([0.9]))
    fa = brute_force_solve(pa, 1.0)
    fb, _ = solve_continuation(pb)
    rep = check_duality(pa, fa, pb, fb)
    assert rep.gap_optional <= 1e-10
    assert rep.gap_predictable <= 1e-10


def test_duality_rejects_mismatched_trees(model2):
    tree_a = build_tree(model2, 1.0, 4, 0)
    tree_b = build_tree(model2, 1.0, 5, 0)
    bp = get_builtin("scalar-monotone", 2)
    pa = make_problem(bp, tree_a)
    pb = make_problem(bp, tree_b)
    fa = SolutionField.zeros(tree_a, 1, 1)
    fb = SolutionField.zeros(tree_b, 1, 1)
    with pytest.raises(ValueError):
        check_duality(pa, fa, pb, fb)


# -- QV consistency -----------------------------------------------------------------


def test_qv_consistency_frozen_chain(frozen_model):
    rep = check_qv_consistency(frozen_model, 1.0, 20, 100, seed=0)
    assert rep.rel_error == 0.0


def test_qv_consistency_two_state(model2):
    rep = check_qv_consistency(ChainModel(2, np.array([[-1.0, 1.0],
                                                       [1.0, -1.0]])),
                               1.0, 100, 20_000, seed=4)
    assert rep.rel_error <= 0.02


def test_qv_consistency_rejects_zero_paths(model2):
    with pytest.raises(ValueError):
        check_qv_consistency(model2, 1.0, 10, 0)


# -- form equivalence ---------------------------------------------------------------


def test_form_equivalence_zero(model2):
    tree = build_tree(model2, 1.0, 6, 0)
    prob = make_problem(get_builtin("zero", 2), tree)
    rep = check_form_equivalence(prob, seed=0)
    assert rep.max_discrepancy <= 1e-12


def test_form_equivalence_all_builtins(model2):
    tree = build_tree(model2, 1.0, 6, 0)
    for name in ("scalar-monotone", "thm3-mirror", "two-dim-G",
                 "linear-affine"):
        prob = make_problem(get_builtin(name, 2), tree)
        rep = check_form_equivalence(prob, seed=3)
        assert rep.max_discrepancy <= 1e-12, name
