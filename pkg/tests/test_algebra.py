import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mcfbsde.algebra import (CoefficientSet, GStructure, RankError,
                             TripleVector, bracket, eval_F, eval_H,
                             to_chain_driven, weighted_bracket)
from mcfbsde.chain import ChainModel, build_tree

A2 = np.array([[-1.0, 2.0], [1.0, -2.0]])

finite = st.floats(-10.0, 10.0, allow_nan=False)


def triple(x, y, z):
    return TripleVector.of(x, y, z)


# -- bracket ---------------------------------------------------------------------


def test_bracket_unit_vector():
    u = triple([1.0, 0.0], [0.0], [[0.0, 0.0]])
    assert bracket(u, u) == pytest.approx(1.0)


def test_bracket_dot_product():
    u1 = triple([1.0, 2.0], [0.0], [[0.0, 0.0]])
    u2 = triple([3.0, 4.0], [0.0], [[0.0, 0.0]])
    assert bracket(u1, u2) == pytest.approx(11.0)


def test_bracket_trace_identity():
    z = np.eye(2)
    u = triple([0.0], [0.0, 0.0], z)
    assert bracket(u, u) == pytest.approx(2.0)


def test_bracket_dimension_mismatch():
    u1 = triple([1.0], [0.0], [[0.0]])
    u2 = triple([1.0, 2.0], [0.0], [[0.0]])
    with pytest.raises(ValueError):
        bracket(u1, u2)


@given(st.lists(finite, min_size=2, max_size=2),
       st.lists(finite, min_size=2, max_size=2),
       st.lists(finite, min_size=2, max_size=2), finite, finite)
@settings(max_examples=60, deadline=None)
def test_bracket_symmetric_bilinear(x1, x2, x3, a, b):
    u1 = triple(x1, [0.0], [[0.0, 0.0]])
    u2 = triple(x2, [0.0], [[0.0, 0.0]])
    u3 = triple(x3, [0.0], [[0.0, 0.0]])
    assert bracket(u1, u2) == pytest.approx(bracket(u2, u1), abs=1e-12)
    lhs = bracket(u1.scale(a) + u2.scale(b), u3)
    rhs = a * bracket(u1, u3) + b * bracket(u2, u3)
    assert lhs == pytest.approx(rhs, abs=1e-9)


# -- G structure -----------------------------------------------------------------


def test_projector_identities_n_le_m():
    g = GStructure([[1.0], [1.0]])
    assert g.case == "CASE_N_LE_M"
    assert g.check_projector() <= 1e-10
    np.testing.assert_allclose(g.projector @ g.G, g.G, atol=1e-10)


def test_projector_identities_n_gt_m():
    g = GStructure([[1.0, 0.5]])
    assert g.case == "CASE_N_GT_M"
    assert g.check_projector() <= 1e-10
    np.testing.assert_allclose(g.G @ g.projector, g.G, atol=1e-10)


def test_gstructure_refuses_rank_deficiency():
    with pytest.raises(RankError):
        GStructure([[1.0, 1.0], [1.0, 1.0]])


def test_gstructure_refuses_bad_condition():
    with pytest.raises(RankError):
        GStructure(np.diag([1.0, 1e-9]))


# -- F and H ---------------------------------------------------------------------


def _coeffs_scalar():
    return CoefficientSet(
        n=1, m=1, d=2,
        b=lambda t, s, x, y, z: -y,
        sigma=lambda t, s, x, y, z: np.zeros_like(z),
        f=lambda t, s, x, y, z: x,
        phi=lambda s, x: x,
    )


def test_eval_f_zero_coefficients():
    coeffs = CoefficientSet(
        n=1, m=1, d=2,
        b=lambda t, s, x, y, z: np.zeros_like(x),
        sigma=lambda t, s, x, y, z: np.zeros_like(z),
        f=lambda t, s, x, y, z: np.zeros_like(y),
        phi=lambda s, x: np.zeros_like(x),
    )
    g = GStructure([[1.0]])
    u = TripleVector.of([1.0], [2.0], [[3.0, 4.0]])
    fv = eval_F(coeffs, g, 0.0, 0, u)
    hv = eval_H(coeffs, g, 0.0, 0, u)
    assert bracket(fv, fv) == 0.0
    assert bracket(hv, hv) == 0.0


def test_eval_f_substitution():
    # n=m=1, G=1, f(x)=x, b(y)=-y at u=(2,3,.) gives F = (-2, -3, 0)
    g = GStructure([[1.0]])
    u = TripleVector.of([2.0], [3.0], [[0.0, 0.0]])
    fv = eval_F(_coeffs_scalar(), g, 0.0, 0, u)
    np.testing.assert_allclose(fv.x, [-2.0])
    np.testing.assert_allclose(fv.y, [-3.0])
    np.testing.assert_allclose(fv.z, 0.0)


def test_eval_h_columnwise():
    coeffs = CoefficientSet(
        n=1, m=2, d=2,
        b=lambda t, s, x, y, z: np.zeros(1),
        sigma=lambda t, s, x, y, z: np.array([[1.0, 0.0]]),
        f=lambda t, s, x, y, z: np.zeros(2),
        phi=lambda s, x: np.zeros(2),
    )
    g = GStructure([[1.0], [1.0]])
    u = TripleVector.of([0.0], [0.0, 0.0], np.zeros((2, 2)))
    hv = eval_H(coeffs, g, 0.0, 0, u)
    np.testing.assert_allclose(hv.z, [[1.0, 0.0], [1.0, 0.0]])


def test_f_bracket_invariant_under_constant_shifts():
    g = GStructure([[1.0]])
    base = _coeffs_scalar()
    shifted = CoefficientSet(
        n=1, m=1, d=2,
        b=lambda t, s, x, y, z: -y + 5.0,
        sigma=base.sigma,
        f=lambda t, s, x, y, z: x - 3.0,
        phi=base.phi,
    )
    rng = np.random.default_rng(0)
    for _ in range(50):
        u1 = TripleVector.of(rng.normal(size=1), rng.normal(size=1),
                             rng.normal(size=(1, 2)))
        u2 = TripleVector.of(rng.normal(size=1), rng.normal(size=1),
                             rng.normal(size=(1, 2)))
        du = u1 - u2
        for coeffs in (base, shifted):
            val = bracket(eval_F(coeffs, g, 0.0, 0, u1)
                          - eval_F(coeffs, g, 0.0, 0, u2), du)
            if coeffs is base:
                expected = val
        assert val == pytest.approx(expected, abs=1e-12)


# -- weighted bracket --------------------------------------------------------------


def test_weighted_bracket_zero_weight():
    assert weighted_bracket([[1.0, 0.0]], [[1.0, 0.0]], np.zeros((2, 2))) == 0.0


def test_weighted_bracket_hand_values():
    q = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert weighted_bracket([[1.0, 0.0]], [[1.0, 0.0]], q) == pytest.approx(1.0)
    assert weighted_bracket([[1.0, 1.0]], [[1.0, 1.0]], q) == pytest.approx(0.0)


def test_weighted_bracket_rejects_indefinite_weight():
    with pytest.raises(ValueError):
        weighted_bracket([[1.0, 0.0]], [[1.0, 0.0]],
                         np.array([[1.0, 0.0], [0.0, -1.0]]))


@given(st.integers(0, 200))
@settings(max_examples=50, deadline=None)
def test_weighted_bracket_psd_nonnegative(seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((2, 3))
    m = rng.standard_normal((3, 3))
    q = m @ m.T
    assert weighted_bracket(c, c, q) >= -1e-12


# -- chain-driven conversion ---------------------------------------------------------


def test_to_chain_driven_noop_without_sigma_or_z():
    model = ChainModel(2, A2)
    coeffs = _coeffs_scalar()           # sigma = 0, f independent of z
    conv = to_chain_driven(coeffs, model)
    x, y, z = np.array([1.5]), np.array([-0.5]), np.zeros((1, 2))
    np.testing.assert_allclose(conv.b(0.3, 0, x, y, z),
                               coeffs.b(0.3, 0, x, y, z))
    np.testing.assert_allclose(conv.f(0.3, 0, x, y, z),
                               coeffs.f(0.3, 0, x, y, z))


def test_to_chain_driven_drift_shift():
    # sigma = [[1, 0]] and state 1: b** = b - sigma A e_1 = b + 1
    model = ChainModel(2, A2)
    coeffs = CoefficientSet(
        n=1, m=1, d=2,
        b=lambda t, s, x, y, z: np.zeros(1),
        sigma=lambda t, s, x, y, z: np.array([[1.0, 0.0]]),
        f=lambda t, s, x, y, z: np.zeros(1),
        phi=lambda s, x: np.zeros(1),
    )
    conv = to_chain_driven(coeffs, model)
    out = conv.b(0.0, 0, np.zeros(1), np.zeros(1), np.zeros((1, 2)))
    np.testing.assert_allclose(out, [1.0])


def test_to_chain_driven_forward_dynamics_node_for_node():
    # running the forward recursion with dM equals running the converted
    # drift against raw chain increments dm, on every node of a random tree
    rng = np.random.default_rng(4)
    model = ChainModel(2, A2)
    tree = build_tree(model, T=1.0, N=6, root_state=0)
    B = rng.standard_normal((1, 1))
    S0 = rng.standard_normal((1, 2))
    coeffs = CoefficientSet(
        n=1, m=1, d=2,
        b=lambda t, s, x, y, z: x @ B.T,
        sigma=lambda t, s, x, y, z: np.broadcast_to(S0, z.shape).copy()
        + 0.5 * z,
        f=lambda t, s, x, y, z: np.zeros_like(y),
        phi=lambda s, x: x,
    )
    conv = to_chain_driven(coeffs, model)
    eye = np.eye(2)

    def forward(use_dm_form):
        xs = [np.zeros((tree.n_nodes(k), 1)) for k in range(tree.N + 1)]
        xs[0][0] = 0.7
        rngy = np.random.default_rng(8)
        for k in range(tree.N):
            states = tree.states[k]
            y = rngy.standard_normal((tree.n_nodes(k), 1))
            z = rngy.standard_normal((tree.n_nodes(k), 1, 2))
            nxt = np.empty((tree.n_nodes(k), 2, 1))
            for s in range(2):
                idx = np.flatnonzero(states == s)
                if idx.size == 0:
                    continue
                if use_dm_form:
                    drift = conv.b(tree.times[k], s, xs[k][idx], y[idx], z[idx])
                    sig = conv.sigma(tree.times[k], s, xs[k][idx], y[idx], z[idx])
                    inc = np.einsum("vnw,iw->vin", sig, eye - eye[s])
                else:
                    drift = coeffs.b(tree.times[k], s, xs[k][idx], y[idx], z[idx])
                    sig = coeffs.sigma(tree.times[k], s, xs[k][idx], y[idx], z[idx])
                    inc = np.einsum("vnw,iw->vin", sig, tree.dm[k][s])
                nxt[idx] = xs[k][idx][:, None, :] + tree.dt * drift[:, None, :] + inc
            xs[k + 1] = nxt.reshape(-1, 1)
        return xs

    xa = forward(False)
    xb = forward(True)
    worst = max(float(np.abs(a - b).max()) for a, b in zip(xa, xb))
    assert worst <= 1e-12
