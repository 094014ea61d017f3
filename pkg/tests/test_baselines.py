import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadpriv.baselines import (
    TransitionModel,
    bayes_attack,
    learn_transitions,
    path_log_score,
    read_transitions,
    viterbi,
    viterbi_linear,
    write_transitions,
)
from roadpriv.errors import AllPathsZero, AllZeroColumn, EmptyCorpus
from roadpriv.mechanisms import ObfuscationMatrix, PrivacyParams
from roadpriv.roadnet import build_graph
from roadpriv.vehitrack import Trajectory

P = PrivacyParams(1.0)

HAND_Z = np.array([
    [0.40, 0.30, 0.20, 0.10],
    [0.10, 0.50, 0.20, 0.20],
    [0.25, 0.25, 0.25, 0.25],
    [0.10, 0.10, 0.10, 0.70],
])
HAND_PRIOR = np.array([0.1, 0.2, 0.3, 0.4])
# prior * column, by hand: y=0 -> (.04,.02,.075,.04), y=1 -> (.03,.10,.075,.04),
# y=2 -> (.02,.04,.075,.04), y=3 -> (.01,.04,.075,.28)
HAND_MAP = {0: 2, 1: 1, 2: 2, 3: 3}


def matrix(probs, support=None):
    probs = np.asarray(probs, float)
    support = np.arange(len(probs)) if support is None else np.asarray(support)
    return ObfuscationMatrix(support, probs, P, "test")


def traj(nodes, tid="t"):
    return Trajectory(tid, np.arange(len(nodes)) * 20.0, np.asarray(nodes))


def tri_graph():
    nodes = [(i, (41.90 + 0.001 * i, 12.49)) for i in range(3)]
    edges = [(u, v, 10.0) for u in range(3) for v in range(3) if u != v]
    return build_graph(nodes, edges)


def random_stochastic(rng, r, c, zeros=0.0):
    m = rng.random((r, c)) * (rng.random((r, c)) >= zeros)
    m[m.sum(axis=1) == 0, 0] = 1.0
    return m / m.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------- bayes

def test_bayes_identity_returns_report():
    Z = matrix(np.eye(5))
    for y in range(5):
        est = bayes_attack(Z, y)
        assert est.location == y and not est.fallback


def test_bayes_uniform_matrix_returns_prior_argmax():
    Z = matrix(np.full((4, 4), 0.25))
    assert bayes_attack(Z, 2, prior=[0.1, 0.5, 0.2, 0.2]).location == 1


def test_bayes_hand_case_matches_enumeration():
    Z = matrix(HAND_Z)
    for y, x in HAND_MAP.items():
        assert bayes_attack(Z, y, HAND_PRIOR).location == x


def test_bayes_ties_go_to_smallest_id():
    Z = matrix(np.full((3, 3), 1 / 3), support=[4, 7, 9])
    assert bayes_attack(Z, 7).location == 4


def test_bayes_all_zero_column_falls_back_to_prior():
    probs = np.array([[1.0, 0.0], [1.0, 0.0]])
    est = bayes_attack(matrix(probs), 1, prior=[0.3, 0.7])
    assert est.fallback and est.location == 1


def test_bayes_report_outside_support_raises():
    with pytest.raises(AllZeroColumn):
        bayes_attack(matrix(np.eye(2)), 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_bayes_invariant_to_prior_scale(seed, scale):
    rng = np.random.default_rng(seed)
    Z = matrix(random_stochastic(rng, 6, 6))
    prior = rng.random(6) + 0.01
    y = int(rng.integers(6))
    assert bayes_attack(Z, y, prior).location == bayes_attack(Z, y, prior * scale).location


# ------------------------------------------------------------- transitions

def test_self_loop_corpus_gives_identity_row():
    g = tri_graph()
    T = learn_transitions([traj([1, 1, 1, 1])], g, smoothing=0.0)
    assert np.array_equal(T.matrix()[1], [0.0, 1.0, 0.0])


def test_two_equal_successors_split_evenly():
    g = tri_graph()
    T = learn_transitions([traj([0, 1, 0, 2])], g, smoothing=0.0)
    assert np.allclose(T.matrix()[0], [0.0, 0.5, 0.5])


def test_unseen_rows_are_uniform_over_self_and_neighbors():
    nodes = [(i, (41.90 + 0.001 * i, 12.49)) for i in range(3)]
    g = build_graph(nodes, [(0, 1, 5.0), (1, 2, 5.0)])
    T = learn_transitions([traj([0, 1])], g, smoothing=0.0)
    assert np.allclose(T.matrix()[1], [0.0, 0.5, 0.5])
    assert np.allclose(T.matrix()[2], [0.0, 0.0, 1.0])


def test_transitions_match_generator_frequencies():
    g = tri_graph()
    truth = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.25, 0.25, 0.5]])
    rng = np.random.default_rng(7)
    nodes = [0]
    for _ in range(10_000):
        nodes.append(int(rng.choice(3, p=truth[nodes[-1]])))
    T = learn_transitions([traj(nodes)], g, smoothing=0.0)
    assert np.max(np.abs(T.matrix() - truth)) < 0.02


def test_transition_rows_stochastic_with_smoothing():
    g = tri_graph()
    T = learn_transitions([traj([0, 1, 2, 0])], g)
    assert np.allclose(T.matrix().sum(axis=1), 1.0, atol=1e-12)
    assert np.all(T.matrix() > 0)


def test_empty_corpus_raises():
    with pytest.raises(EmptyCorpus):
        learn_transitions([], tri_graph())
    with pytest.raises(EmptyCorpus):
        learn_transitions([traj([0])], tri_graph())


def test_transitions_round_trip(tmp_path):
    g = tri_graph()
    T = learn_transitions([traj([0, 1, 2, 0, 2])], g)
    write_transitions(T, tmp_path / "T.csv")
    R = read_transitions(tmp_path / "T.csv")
    assert np.array_equal(R.matrices, T.matrices) and R.smoothing == T.smoothing


# ----------------------------------------------------------------- viterbi

def model(T):
    T = np.asarray(T, float)
    return TransitionModel(np.arange(len(T)), T[None], 0.0)


def brute_force(T, Z, reports, prior=None):
    """Best path by enumeration; lexicographic order breaks ties."""
    S = T.shape[0]
    prior = np.ones(S) if prior is None else prior
    best, arg = -1.0, None
    for path in itertools.product(range(S), repeat=len(reports)):
        p = prior[path[0]] * Z[path[0], reports[0]]
        for n in range(1, len(reports)):
            p *= T[path[n - 1], path[n]] * Z[path[n], reports[n]]
        if p > best * (1 + 1e-12):
            best, arg = p, path
    return np.array(arg), best


def test_viterbi_identity_emission_returns_reports():
    T = model(np.full((4, 4), 0.25))
    Z = matrix(np.eye(4))
    res = viterbi(T, [3, 1, 2], [Z] * 3)
    assert res.path.tolist() == [3, 1, 2] and not res.fallback


def test_viterbi_deterministic_chain_is_forced():
    T = model(np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], float))
    Z = matrix(np.full((3, 3), 1 / 3))
    prior = np.array([0.0, 1.0, 0.0])
    assert viterbi(T, [0, 0, 0, 0], [Z] * 4, prior).path.tolist() == [1, 2, 0, 1]


def test_viterbi_matches_exhaustive_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(50):
        T = random_stochastic(rng, 4, 4, zeros=0.3)
        Z = random_stochastic(rng, 4, 4, zeros=0.3)
        reports = rng.integers(4, size=3).tolist()
        path, p = brute_force(T, Z, reports)
        res = viterbi(model(T), reports, [matrix(Z)] * 3)
        if p == 0:
            assert res.fallback
            continue
        assert res.path.tolist() == path.tolist()
        assert res.log_score == pytest.approx(np.log(p), rel=1e-12)


def test_viterbi_ties_pick_lexicographically_smallest():
    T = model(np.full((3, 3), 1 / 3))
    Z = matrix(np.full((3, 3), 1 / 3))
    assert viterbi(T, [2, 1, 0], [Z] * 3).path.tolist() == [0, 0, 0]


def test_viterbi_beats_random_paths():
    rng = np.random.default_rng(3)
    S, N = 6, 8
    T = random_stochastic(rng, S, S)
    Zs = [matrix(random_stochastic(rng, S, S)) for _ in range(N)]
    reports = rng.integers(S, size=N).tolist()
    tm = model(T)
    res = viterbi(tm, reports, Zs)
    best = path_log_score(tm, res.path, reports, Zs)
    assert best == pytest.approx(res.log_score, rel=1e-12)
    for _ in range(1000):
        alt = rng.integers(S, size=N)
        assert path_log_score(tm, alt, reports, Zs) <= best + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.integers(1, 6))
def test_log_and_linear_viterbi_agree(seed, S, N):
    rng = np.random.default_rng(seed)
    tm = model(random_stochastic(rng, S, S))
    Zs = [matrix(random_stochastic(rng, S, S)) for _ in range(N)]
    reports = rng.integers(S, size=N).tolist()
    a = viterbi(tm, reports, Zs)
    b = viterbi_linear(tm, reports, Zs)
    assert a.path.tolist() == b.path.tolist()
    assert a.log_score == pytest.approx(b.log_score, rel=1e-9)


def test_all_paths_zero_falls_back_to_bayes():
    T = model(np.eye(2))
    Z = matrix(np.eye(2))
    res = viterbi(T, [0, 1], [Z, Z])
    assert res.fallback and res.path.tolist() == [0, 1]
    with pytest.raises(AllPathsZero):
        viterbi_linear(T, [0, 1], [Z, Z])


def test_viterbi_uses_slot_specific_matrices():
    T = model(np.full((3, 3), 1 / 3))
    Z1 = matrix(np.eye(3))
    Z2 = matrix(np.roll(np.eye(3), 1, axis=1))   # row x reports x+1
    assert viterbi(T, [1, 1], [Z1, Z2]).path.tolist() == [1, 0]
