import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadpriv.errors import (
    DimensionMismatch,
    EmptySupport,
    InfiniteCost,
    InvalidEpsilon,
    SupportTooLarge,
    UnknownRow,
)
from roadpriv.lp import HighsSolver, SimplexSolver
from roadpriv.mechanisms import (
    ObfuscationMatrix,
    PrivacyParams,
    UtilityModel,
    delta_cost,
    delta_cost_matrix,
    geo_ind_audit,
    laplace_matrix,
    lp_matrix,
    matrix_utility_loss,
    read_matrix,
    sample_obfuscated,
    support_distances,
    uniform_matrix,
    write_matrix,
)
from roadpriv.roadnet import build_graph, grid_graph

# optimum of the 3-location instance below, from exhaustive vertex enumeration
THREE_LOC_OPT = 1.061368104235729
THREE_D = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], float)
THREE_DC = np.array([[0, 3, 5], [3, 0, 2], [5, 2, 0]], float)

# sum_l 1/4 |c_xl - c_vl| on the line with node positions 0, 1, 3, 6
LINE4_DC = np.array([
    [0.0, 1.0, 2.5, 4.0],
    [1.0, 0.0, 2.0, 4.0],
    [2.5, 2.0, 0.0, 3.0],
    [4.0, 4.0, 3.0, 0.0],
])


def util_from_positions(pos, q=None):
    pos = np.asarray(pos, float)
    cost = np.abs(pos[:, None] - pos[None, :])
    L = len(pos)
    q = np.full(L, 1.0 / L) if q is None else np.asarray(q, float)
    return UtilityModel(np.arange(L), q, cost)


def util_for_dc(dc):
    """Single-target utility reproducing a line metric ``dc``.

    With one target and c_x = dc[0, x], delta cost is |c_x - c_v|, which
    equals ``dc`` whenever ``dc`` is the metric of points on a line.
    """
    a = dc[0]
    return UtilityModel(np.array([0]), np.array([1.0]), a[:, None].copy())


# --------------------------------------------------------------- laplace

def test_laplace_eps_to_zero_is_uniform():
    g = grid_graph(3, 3)
    Z = laplace_matrix(np.arange(9), g, PrivacyParams(1e-12))
    np.testing.assert_allclose(Z.probs, 1 / 9, atol=1e-9)


def test_laplace_two_location_ratio():
    d = np.array([[0.0, 2.0], [2.0, 0.0]])
    Z = laplace_matrix([0, 1], d, PrivacyParams(3.0, lambda_max=2.0))
    assert Z.probs[0, 0] / Z.probs[0, 1] == pytest.approx(math.e ** 3.0, rel=1e-12)


@given(st.floats(0.01, 50.0))
@settings(max_examples=25)
def test_laplace_rows_sum_to_one(eps):
    g = grid_graph(4, 4)
    Z = laplace_matrix(np.arange(16), g, PrivacyParams(eps))
    np.testing.assert_allclose(Z.probs.sum(axis=1), 1.0, atol=1e-12)


def test_laplace_empty():
    with pytest.raises(EmptySupport):
        laplace_matrix([], np.zeros((0, 0)), PrivacyParams(1.0))


def test_invalid_epsilon():
    with pytest.raises(InvalidEpsilon):
        PrivacyParams(0.0)


@pytest.mark.parametrize("seed", range(6))
def test_laplace_geo_ind_budgets(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(5, 31))
    pts = rng.uniform(0, 3, (L, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    eps = float(rng.uniform(0.5, 20))
    lam = d.max()
    # unnormalized kernel: exact at eps / lam
    K = np.exp(-eps * d / lam)
    I, J = np.nonzero(~np.eye(L, dtype=bool))
    slack = K[I] - np.exp(eps / lam * d[I, J])[:, None] * K[J]
    assert slack.max() <= 1e-12
    Z = laplace_matrix(np.arange(L), d, PrivacyParams(eps))
    assert geo_ind_audit(Z, d, 2 * eps / lam, math.inf, tol=1e-12).violations == []


# -------------------------------------------------------------------- lp

def test_lp_single_location():
    Z = lp_matrix([0], np.zeros((1, 1)), PrivacyParams(1.0), util_from_positions([0.0]))
    assert Z.probs.tolist() == [[1.0]]
    assert Z.objective == 0.0


def test_lp_no_neighbor_pairs_gives_identity():
    d = THREE_D * 10
    Z = lp_matrix([0, 1, 2], d, PrivacyParams(1.0, gamma=0.5), util_for_dc(THREE_DC))
    np.testing.assert_allclose(Z.probs, np.eye(3), atol=1e-12)
    assert Z.objective == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("solver", [HighsSolver(), SimplexSolver()])
def test_lp_three_locations_matches_vertex_enumeration(solver):
    u = util_for_dc(THREE_DC)
    np.testing.assert_allclose(delta_cost_matrix(u, [0, 1, 2], [0, 1, 2]), THREE_DC)
    Z = lp_matrix([0, 1, 2], THREE_D, PrivacyParams(1.0, gamma=1.5), u, solver=solver)
    assert Z.objective == pytest.approx(THREE_LOC_OPT, abs=1e-6)
    assert geo_ind_audit(Z, THREE_D, 1.0, 1.5, tol=1e-9).violation_ratio == 0.0


def test_lp_support_cap():
    with pytest.raises(SupportTooLarge):
        lp_matrix(np.arange(5), np.zeros((5, 5)), PrivacyParams(1.0), util_from_positions(range(5)), cap=4)


@pytest.mark.parametrize("seed", range(4))
def test_lp_properties_on_grid(seed):
    rng = np.random.default_rng(seed)
    g = grid_graph(4, 4, cell_km=0.1)
    u = UtilityModel.from_graph(g, q=rng.dirichlet(np.ones(16)))
    eps = float(rng.uniform(2, 15))
    gamma = 0.11
    sup = np.arange(16)
    Z = lp_matrix(sup, g, PrivacyParams(eps, gamma), u)
    np.testing.assert_allclose(Z.probs.sum(axis=1), 1.0, atol=1e-9)
    assert geo_ind_audit(Z, g, eps, gamma, tol=1e-9).violation_ratio == 0.0
    ul = matrix_utility_loss(Z, u)
    assert ul <= matrix_utility_loss(uniform_matrix(sup, Z.params), u) + 1e-9
    lap = laplace_matrix(sup, g, PrivacyParams(eps * support_distances(g, sup).max() / 2))
    if not geo_ind_audit(lap, g, eps, gamma, tol=1e-12).violations:
        assert ul <= matrix_utility_loss(lap, u) + 1e-9


def test_solvers_agree_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(4):
        L = 5
        pts = rng.uniform(0, 1, (L, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        u = util_from_positions(rng.uniform(0, 100, L))
        params = PrivacyParams(float(rng.uniform(1, 6)), gamma=0.6)
        a = lp_matrix(np.arange(L), d, params, u, solver="highs")
        b = lp_matrix(np.arange(L), d, params, u, solver="simplex")
        assert a.objective == pytest.approx(b.objective, abs=1e-7)


# ----------------------------------------------------------------- audit

def test_audit_uniform_clean():
    d = THREE_D
    Z = uniform_matrix([0, 1, 2], PrivacyParams(1.0))
    rep = geo_ind_audit(Z, d, 1.0, 5.0)
    assert rep.violations == [] and rep.checked_triples == 6 * 3


def test_audit_identity_flags_diagonals():
    d = np.array([[0.0, 0.1], [0.1, 0.0]])
    Z = ObfuscationMatrix(np.array([0, 1]), np.eye(2), PrivacyParams(1.0), "lp")
    rep = geo_ind_audit(Z, d, 1.0, 0.5)
    assert sorted((v[0], v[1], v[2]) for v in rep.violations) == [(0, 1, 0), (1, 0, 1)]
    assert rep.violation_ratio == 0.5


# --------------------------------------------------------------- utility

def test_delta_cost_line_table():
    g = build_graph([(i, (0.0, 0.01 * i)) for i in range(4)],
                    [(0, 1, 1.0), (1, 0, 1.0), (1, 2, 2.0), (2, 1, 2.0), (2, 3, 3.0), (3, 2, 3.0)])
    u = UtilityModel.from_graph(g)
    np.testing.assert_allclose(delta_cost_matrix(u, range(4), range(4)), LINE4_DC)
    assert delta_cost(2, 2, u) == 0.0


def test_delta_cost_single_target():
    u = util_from_positions([0, 4, 9], q=[0, 0, 1])
    assert delta_cost(0, 1, u) == abs(9 - 5)


def test_delta_cost_infinite():
    g = build_graph([(0, (0, 0)), (1, (0, 0.01))], [(0, 1, 1.0)])
    u = UtilityModel.from_graph(g)
    with pytest.raises(InfiniteCost):
        delta_cost(1, 0, u)


def test_utility_loss_identity_and_hand_case():
    u = util_from_positions([0.0, 2.0], q=[1.0, 0.0])
    I = ObfuscationMatrix(np.array([0, 1]), np.eye(2), PrivacyParams(1.0), "lp")
    assert matrix_utility_loss(I, u) == 0.0
    Z = ObfuscationMatrix(np.array([0, 1]), np.array([[0.7, 0.3], [0.4, 0.6]]), PrivacyParams(1.0), "lp")
    # 0.25*(0.7*0 + 0.3*2) + 0.75*(0.4*2 + 0.6*0)
    assert matrix_utility_loss(Z, u, prior=[0.25, 0.75]) == pytest.approx(0.75)


@given(st.floats(0, 1))
def test_utility_loss_linear(alpha):
    u = util_from_positions([0.0, 1.0, 5.0])
    a = uniform_matrix([0, 1, 2], PrivacyParams(1.0))
    b = ObfuscationMatrix(np.arange(3), np.eye(3)[[1, 2, 0]], PrivacyParams(1.0), "lp")
    mix = ObfuscationMatrix(np.arange(3), alpha * a.probs + (1 - alpha) * b.probs, PrivacyParams(1.0), "lp")
    lin = alpha * matrix_utility_loss(a, u) + (1 - alpha) * matrix_utility_loss(b, u)
    assert matrix_utility_loss(mix, u) == pytest.approx(lin, abs=1e-12)


def test_utility_prior_mismatch():
    u = util_from_positions([0.0, 1.0])
    with pytest.raises(DimensionMismatch):
        matrix_utility_loss(uniform_matrix([0, 1], PrivacyParams(1.0)), u, prior=[1.0])


# -------------------------------------------------------------- sampling

def test_sample_deterministic_row():
    Z = ObfuscationMatrix(np.arange(3), np.eye(3), PrivacyParams(1.0), "lp")
    rng = np.random.default_rng(0)
    assert {sample_obfuscated(Z, 1, rng) for _ in range(200)} == {1}


def test_sample_uniform_frequencies():
    Z = uniform_matrix(np.arange(4), PrivacyParams(1.0))
    rng = np.random.default_rng(123)
    draws = np.array([sample_obfuscated(Z, 0, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / len(draws)
    np.testing.assert_allclose(freq, 0.25, atol=0.01)


def test_sample_reproducible_and_unknown_row():
    Z = laplace_matrix(np.arange(9), grid_graph(3, 3), PrivacyParams(5.0))
    r1, r2 = np.random.default_rng(42), np.random.default_rng(42)
    assert [sample_obfuscated(Z, 4, r1) for _ in range(50)] == [sample_obfuscated(Z, 4, r2) for _ in range(50)]
    with pytest.raises(UnknownRow):
        sample_obfuscated(Z, 9, r1)


# --------------------------------------------------------- serialization

def test_matrix_roundtrip(tmp_path):
    g = grid_graph(3, 3)
    Z = laplace_matrix(np.arange(9), g, PrivacyParams(7.5, gamma=0.2))
    write_matrix(Z, tmp_path / "z.csv")
    back = read_matrix(tmp_path / "z.csv")
    np.testing.assert_array_equal(back.probs, Z.probs)
    assert back.params == Z.params and back.provenance == "laplace"
    assert (tmp_path / "z.csv").read_text().splitlines()[0] == "row_loc,col_loc,prob"
