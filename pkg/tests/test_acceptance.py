"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through ``verdict``; the conftest hook
prints all of them at the end of the session.
"""
import csv
import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, SESSION, random_geo_graph
from test_baselines import brute_force, model as transition_model, random_stochastic
from test_vehitrack import obs_of, oracle
from roadpriv.baselines import viterbi
from roadpriv.harness.config import make_config
from roadpriv.harness.experiment import run_experiment
from roadpriv.harness.synth import synth_scenario
from roadpriv.mechanisms import (
    ObfuscationMatrix,
    PrivacyParams,
    UtilityModel,
    delta_cost_matrix,
    geo_ind_audit,
    laplace_kernel,
    laplace_matrix,
    lp_matrix,
    resolve_lambda_max,
    support_distances,
    uniform_matrix,
)
from roadpriv.neural import (
    GCNLayer,
    Linear,
    LSTMStack,
    MultiHeadAttention,
    ParameterStore,
    cross_entropy_logits,
    cross_entropy_probs,
    finite_difference,
    normalized_adjacency,
    softmax,
)
from roadpriv.roadnet import GeoPoint, build_graph, dijkstra_spt, haversine, prune_by_speed, reachable_set
from roadpriv.transprotect import (
    EmbeddingTable,
    ScorerConfig,
    TransformerScorer,
    top1_accuracy,
)
from roadpriv.vehitrack import (
    Phase2Config,
    Phase2Model,
    generate_training_samples,
    phase1_posteriors,
    token_accuracy,
)

EPSILONS = (5.0, 7.5, 10.0)
SUITE_BUDGET_S = 15 * 60


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def matrix(probs):
    return ObfuscationMatrix(np.arange(len(probs)), np.asarray(probs, float), PrivacyParams(1.0), "test")


# ------------------------------------------------------- 1. geo-ind soundness

def test_c01_lp_matrices_pass_audit():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = random_geo_graph(rng, int(rng.integers(10, 41)), extent_km=2.0, p_edge=0.3)
        U = UtilityModel.from_graph(g, targets=np.arange(g.n_nodes))
        reach = np.isfinite(U.cost).all(axis=0)
        U = UtilityModel.from_graph(g, targets=np.flatnonzero(reach))
        support = np.flatnonzero(np.isfinite(U.cost).all(axis=1))
        for eps in EPSILONS:
            Z = lp_matrix(support, g, PrivacyParams(eps), U)
            rep = geo_ind_audit(Z, g, eps, math.inf, tol=1e-9)
            worst = max(worst, rep.violation_ratio)
            count += 1
    secs = time.perf_counter() - t0
    verdict(1, worst == 0.0 and count >= 60 and secs < 120,
            f"{count} LP matrices, max violation_ratio {worst}, {secs:.1f} s")


# ------------------------------------------------------- 2. LP optimality

def vertex_optimum(dist, eps, dc):
    """Minimum of the 3-location LP by enumerating every basic solution.

    Row sums are eliminated (z_i2 = 1 - z_i0 - z_i1), leaving 6 free
    variables and 27 inequalities: 9 nonnegativity rows and 18 Geo-Ind rows.
    """
    L = 3

    def lin(i, k):
        # z_ik as (coefficients over the 6 free variables, constant)
        a = np.zeros(6)
        if k < 2:
            a[2 * i + k] = 1.0
            return a, 0.0
        a[2 * i], a[2 * i + 1] = -1.0, -1.0
        return a, 1.0

    G, h = [], []          # G x <= h
    for i in range(L):
        for k in range(L):
            a, c = lin(i, k)
            G.append(-a)
            h.append(c)
    for i in range(L):
        for j in range(L):
            if i == j:
                continue
            m = math.exp(eps * dist[i, j])
            for k in range(L):
                ai, ci = lin(i, k)
                aj, cj = lin(j, k)
                G.append(ai - m * aj)
                h.append(m * cj - ci)
    G, h = np.array(G), np.array(h)
    cost, const = np.zeros(6), 0.0
    for i in range(L):
        for k in range(L):
            a, c = lin(i, k)
            cost += dc[i, k] / L * a
            const += dc[i, k] / L * c
    combos = np.array(list(itertools.combinations(range(len(G)), 6)))
    A, b = G[combos], h[combos]
    ok = np.abs(np.linalg.det(A)) > 1e-12
    x = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    feasible = np.all(x @ G.T <= h + 1e-9, axis=1)
    return float((x[feasible] @ cost).min() + const)


def test_c02_lp_matches_vertex_enumeration():
    rng = np.random.default_rng(7)
    diffs, wins = [], []
    for _ in range(10):
        g = random_geo_graph(rng, 3, extent_km=1.0, p_edge=1.0)
        U = UtilityModel.from_graph(g)
        eps = float(rng.choice(EPSILONS))
        support = np.arange(3)
        Z = lp_matrix(support, g, PrivacyParams(eps), U)
        dc = delta_cost_matrix(U, support, support)
        want = vertex_optimum(support_distances(g, support), eps, dc)
        diffs.append(abs(Z.objective - want))
        uni = float(np.sum(uniform_matrix(support, PrivacyParams(eps)).probs * dc) / 3)
        wins.append(Z.objective <= uni + 1e-12)
    verdict(2, max(diffs) < 1e-6 and all(wins),
            f"10 instances, max |LP - enumeration| {max(diffs):.2e}, LP <= uniform on {sum(wins)}/10")


# ------------------------------------------------------- 3. laplace kernel law

def test_c03_laplace_kernel_law():
    rng = np.random.default_rng(3)
    eps_mach = np.finfo(float).eps
    worst_excess, audits = -math.inf, []
    for L in range(2, 31):
        g = random_geo_graph(rng, L, extent_km=2.0, p_edge=0.0)
        support = np.arange(L)
        eps = float(rng.choice(EPSILONS))
        d = support_distances(g, support)
        lam = resolve_lambda_max(PrivacyParams(eps), d)
        K = laplace_kernel(d, eps, lam)
        budget = eps / lam
        # kernel law: K[i,k] <= exp(budget * d_ij) K[j,k] for every triple,
        # measured in ulps; rounding the exponents costs eps per unit of exponent
        ratio = K[:, None, :] / K[None, :, :]
        bound = np.exp(budget * d)[:, :, None]
        a = budget * d
        ulps = 4 * (1 + a[:, None, :] + a[None, :, :] + a[:, :, None])
        worst_excess = max(worst_excess, float(np.max((ratio / bound - 1.0) / (eps_mach * ulps))))
        Z = laplace_matrix(support, g, PrivacyParams(eps))
        audits.append(geo_ind_audit(Z, g, 2 * budget, math.inf, tol=1e-12).violation_ratio)
    verdict(3, worst_excess <= 1.0 and max(audits) == 0.0,
            f"L=2..30, worst kernel excess {worst_excess:.2f} of its rounding bound, "
            f"max audit violation_ratio at 2e/lambda {max(audits)}")


# ------------------------------------------------------- 4. reachability

def full_threshold(g, i, dt):
    return set(np.flatnonzero(dijkstra_spt(g, i).cost <= dt + 1e-9).tolist())


def detour_instance(rng):
    """A slow direct edge plus a fast route through a node outside the ball."""
    base = (41.9 + rng.uniform(0, 0.01), 12.49 + rng.uniform(0, 0.01))
    near = (base[0] + rng.uniform(0.0005, 0.0015), base[1])
    far = (base[0] + rng.uniform(0.01, 0.03), base[1] + rng.uniform(-0.01, 0.01))
    pts = [base, near, far]

    def d(a, b):
        return haversine(GeoPoint(*a), GeoPoint(*b))

    edges = [(0, 1, d(base, near) / rng.uniform(3, 8) * 3600), (0, 2, d(base, far) / 120 * 3600),
             (2, 1, d(far, near) / 120 * 3600), (1, 0, d(base, near) / 30 * 3600)]
    return build_graph(list(enumerate(pts)), edges), 0, d(base, near) / 100 * 3600


def test_c04_pruned_reachability_equals_full_dijkstra():
    rng = np.random.default_rng(404)
    agree, pruned_detours = 0, 0
    for trial in range(100):
        if trial % 5 == 0:
            g, i, dt = detour_instance(rng)
        else:
            g = random_geo_graph(rng, int(rng.integers(15, 40)), extent_km=3.0, p_edge=0.12)
            i, dt = int(rng.integers(g.n_nodes)), float(rng.uniform(10.0, 90.0))
        ball = set(prune_by_speed(g, i, dt).tolist())
        spt = dijkstra_spt(g, i)
        pruned_detours += any(spt.path_to(k) and not set(spt.path_to(k)) <= ball for k in range(g.n_nodes)
                              if np.isfinite(spt.cost[k]))
        agree += reachable_set(g, i, dt).members == full_threshold(g, i, dt)
    verdict(4, agree == 100 and pruned_detours >= 20,
            f"{agree}/100 instances agree, {pruned_detours} with shortest paths leaving the ball")


# ------------------------------------------------------- 5. oracles

def test_c05_phase1_and_viterbi_match_enumeration():
    rng = np.random.default_rng(2025)
    post_checked, worst = 0, 0.0
    while post_checked < 50:
        n = int(rng.integers(4, 9))
        g = random_geo_graph(rng, n, extent_km=1.0, p_edge=0.4)
        N = int(rng.integers(2, 6))
        times = np.cumsum(rng.uniform(5, 40, N))
        Zp = rng.random((n, n)) + 0.05
        Zp /= Zp.sum(axis=1, keepdims=True)
        prior = rng.random(n) + 0.1
        prior /= prior.sum()
        reports = rng.integers(n, size=N).tolist()
        xi = float(rng.choice([0.0, 0.02, 0.1]))
        want = oracle(g, times.tolist(), reports, Zp, prior, xi)
        if want is None:
            continue
        got = phase1_posteriors(obs_of(times, reports, matrix(Zp)), g, prior, xi, on_degenerate="raise")
        for s, (R, raw, S, post) in zip(got.slots, want):
            assert s.reachable.tolist() == R and s.support.tolist() == S
            worst = max(worst, float(np.max(np.abs(s.raw - raw))), float(np.max(np.abs(s.posterior - post))))
        post_checked += 1
    paths_ok = 0
    for _ in range(50):
        T = random_stochastic(rng, 4, 4)
        Z = random_stochastic(rng, 4, 4)
        reports = rng.integers(4, size=3).tolist()
        path, _ = brute_force(T, Z, reports)
        paths_ok += viterbi(transition_model(T), reports, [matrix(Z)] * 3).path.tolist() == path.tolist()
    verdict(5, worst < 1e-12 and paths_ok == 50,
            f"phase-1 max abs diff {worst:.1e} over 50 instances, viterbi {paths_ok}/50 exact paths")


# ------------------------------------------------------- 6. gradients

def tensor_error(a, b):
    """Norm-wise relative error of one sampled gradient tensor.

    Element ratios are unusable on entries near 1e-7, where central
    difference roundoff alone is about 1e-10.
    """
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def _max_fd_error(store, loss_fn, extra=()):
    store.zero_grad()
    loss_fn(True)
    rng = np.random.default_rng(0)
    err = 0.0
    for name in store.names():
        idx, num = finite_difference(lambda: loss_fn(False), store[name], 1e-5, 12, rng)
        err = max(err, tensor_error(store.grads[name].reshape(-1)[idx], num))
    for arr, grad in extra:
        idx, num = finite_difference(lambda: loss_fn(False), arr, 1e-5, 12, rng)
        err = max(err, tensor_error(grad().reshape(-1)[idx], num))
    return err


def _lstm_error(seed):
    st = ParameterStore(seed)
    stack = LSTMStack(st, "l", 3, 3, layers=2)
    head = Linear(st, "fc", 6, 4)
    rng = np.random.default_rng(seed + 1000)
    x = rng.normal(size=(2, 4, 3))
    lengths = np.array([4, 3])
    tgt = rng.integers(0, 4, (2, 4))
    mask = np.arange(4)[None] < lengths[:, None]

    def loss(backward):
        h, c = stack.forward(x, lengths)
        y, cy = head.forward(h)
        r = cross_entropy_logits(y, tgt, mask)
        if backward:
            stack.backward(head.backward(r.grad, cy), c)
        return r.loss

    return _max_fd_error(st, loss)


def _attention_error(seed):
    st = ParameterStore(seed)
    mha = MultiHeadAttention(st, "a", 8, 2)
    head = Linear(st, "fc", 8, 5)
    rng = np.random.default_rng(seed + 1000)
    X = rng.normal(size=(2, 3, 8))
    tgt = rng.integers(0, 5, (2, 3))
    held = {}

    def loss(backward):
        o, c = mha.forward(X)
        y, cy = head.forward(o)
        r = cross_entropy_logits(y, tgt)
        if backward:
            held["dX"] = mha.backward(head.backward(r.grad, cy), c)
        return r.loss

    return _max_fd_error(st, loss, [(X, lambda: held["dX"])])


def _gcn_error(seed):
    st = ParameterStore(seed)
    A = normalized_adjacency(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)])
    g1, g2 = GCNLayer(st, "g1", 3, 4), GCNLayer(st, "g2", 4, 3)
    rng = np.random.default_rng(seed + 1000)
    S = rng.normal(size=(5, 3))
    tgt = rng.integers(0, 3, 5)

    def loss(backward):
        h1, c1 = g1.forward(A, S)
        h2, c2 = g2.forward(A, h1)
        r = cross_entropy_logits(h2, tgt)
        if backward:
            g1.backward(g2.backward(r.grad, c2), c1)
        return r.loss

    return _max_fd_error(st, loss)


def _fc_error(seed):
    st = ParameterStore(seed)
    lin = Linear(st, "fc", 5, 4)
    rng = np.random.default_rng(seed + 1000)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 4))
    held = {}

    def loss(backward):
        y, c = lin.forward(x)
        if backward:
            held["dx"] = lin.backward(w, c)
        return float(np.sum(w * y))

    return _max_fd_error(st, loss, [(x, lambda: held["dx"])])


def _ce_error(seed):
    rng = np.random.default_rng(seed + 1000)
    logits = rng.normal(size=(3, 4, 6))
    tgt = rng.integers(0, 6, (3, 4))
    mask = rng.random((3, 4)) < 0.8
    idx, num = finite_difference(lambda: cross_entropy_logits(logits, tgt, mask).loss, logits, 1e-5)
    err = tensor_error(cross_entropy_logits(logits, tgt, mask).grad.reshape(-1)[idx], num)
    probs = softmax(rng.normal(size=(4, 6)))
    one_hot = np.eye(6)[rng.integers(0, 6, 4)]
    idx, num = finite_difference(lambda: cross_entropy_probs(probs, one_hot).loss, probs, 1e-5)
    return max(err, tensor_error(cross_entropy_probs(probs, one_hot).grad.reshape(-1)[idx], num))


def test_c06_gradients_match_finite_differences():
    checks = {"lstm": _lstm_error, "attention": _attention_error, "gcn": _gcn_error,
              "fc": _fc_error, "cross-entropy": _ce_error}
    worst = {k: max(f(seed) for seed in range(20)) for k, f in checks.items()}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(6, all(v < 1e-4 for v in worst.values()), f"max relative error over 20 draws: {detail}")


# ------------------------------------------------------- 7. learning capability

def test_c07_models_memorize_small_corpora():
    t0 = time.perf_counter()
    g, trajs = synth_scenario(5, 5, n_traj=10, length=10, seed=11)
    Z = laplace_matrix(np.arange(g.n_nodes), g, PrivacyParams(5.0))
    samples = generate_training_samples(trajs, Z, g, 1, seed=11).samples
    m = Phase2Model(g.n_nodes, Phase2Config(hidden=32, layers=2, lr=1e-2, batch_size=10, seed=1))
    acc, epochs = 0.0, 0
    while epochs < 500 and acc < 0.95:
        m.train(samples, epochs=25)
        epochs += 25
        acc = token_accuracy(m, samples)
    g5, trajs5 = synth_scenario(5, 5, n_traj=5, length=20, seed=8, momentum=1.0)
    base = EmbeddingTable(np.random.default_rng(1).normal(size=(g5.n_nodes, 32)), "node2vec")
    s = TransformerScorer(g5, base, ScorerConfig(heads=4, layers=2, gcn_layers=2, seed=1, lr=1e-2,
                                                 epochs=150, batch_size=5))
    s.train(trajs5)
    top1 = top1_accuracy(s, trajs5)
    secs = time.perf_counter() - t0
    verdict(7, len(samples) == 10 and acc >= 0.95 and top1 >= 0.9 and secs < 300,
            f"phase-2 accuracy {acc:.3f} after {epochs} epochs, scorer top-1 {top1:.3f}, {secs:.1f} s")


# ------------------------------------------------------- 8, 9, 11. full runs

def acceptance_config(**over):
    return make_config({"workers": min(4, os.cpu_count() or 1), **over})


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    res = run_experiment(acceptance_config(), out)
    assert not res.failures
    with open(res.results_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return res, rows


def means(rows, metric, **where):
    vals = [float(r[metric]) for r in rows if all(r[k] == v for k, v in where.items())]
    assert vals, where
    return float(np.mean(vals))


def test_c08_vehitrack_beats_bayes(default_run):
    _, rows = default_run
    ok, parts = True, []
    for mech in ("laplace", "lp"):
        for eps in EPSILONS:
            w = dict(mechanism=mech, defense="none", epsilon=repr(eps))
            vt = means(rows, "eie_km", attack="vehitrack", **w)
            by = means(rows, "eie_km", attack="bayes", **w)
            vi = means(rows, "eie_km", attack="vehitrack-i", **w)
            ok &= vt <= 0.9 * by and vt <= vi
            parts.append(f"{mech} e={eps:g}: {vt:.3f}/{vi:.3f}/{by:.3f}")
    verdict(8, ok, "EIE km vehitrack/vehitrack-i/bayes; " + "; ".join(parts))


def test_c09_transprotect_raises_error_and_cuts_elimination(default_run):
    _, rows = default_run
    cfg = acceptance_config()
    K, alpha = repr(cfg["defense"]["K"][0]), repr(cfg["defense"]["alpha"][0])
    elim_ok, eie_ok, parts = True, True, []
    for mech in ("laplace", "lp"):
        for eps in EPSILONS:
            plain = dict(mechanism=mech, epsilon=repr(eps), defense="none")
            tp = dict(mechanism=mech, epsilon=repr(eps), defense="transprotect", K=K, alpha=alpha)
            e0 = means(rows, "elimination_ratio", **plain)
            e1 = means(rows, "elimination_ratio", **tp)
            elim_ok &= e0 >= 5 * e1
            gains = []
            for a in cfg["attacks"]:
                b0 = means(rows, "eie_km", attack=a, **plain)
                b1 = means(rows, "eie_km", attack=a, **tp)
                eie_ok &= b1 > b0
                gains.append(f"{a} {(b1 - b0) / b0 * 100:+.0f}%")
            parts.append(f"{mech} e={eps:g}: elim {e0:.3f} vs {e1:.3f}, " + " ".join(gains))
    verdict(9, elim_ok and eie_ok, "; ".join(parts))


# ------------------------------------------------------- 10. utility trend

def test_c10_utility_loss_nondecreasing_in_K(tmp_path):
    Ks = [5, 10, 15, 20, 25]
    cfg = make_config({
        "scenario": {"grid_w": 10, "grid_h": 10, "length": 15},
        "n_eval": 10, "n_train": 60, "n_val": 0, "seeds": [0], "attacks": [],
        "epsilons": [5.0],
        "transprotect": {"dim": 32, "walks_per_node": 4, "epochs": 2},
        "defense": {"modes": [True], "K": Ks, "alpha": [1e4]},
    })
    rows = run_experiment(cfg, tmp_path).rows
    ok, parts = True, []
    for mech in cfg["mechanisms"]:
        losses = [next(float(r["utility_loss_s"]) for r in rows
                       if r["mechanism"] == mech and int(r["K"]) == K) for K in Ks]
        ok &= all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))
        parts.append(f"{mech} " + " ".join(f"{x:.2f}" for x in losses))
    verdict(10, ok, "utility loss s for K=5..25: " + "; ".join(parts))


# ------------------------------------------------------- 11. reproducibility

def test_c11_rerun_is_byte_identical_and_suite_is_fast(default_run, tmp_path_factory):
    first, _ = default_run
    second = run_experiment(acceptance_config(), tmp_path_factory.mktemp("run_b"))
    same = Path(first.results_path).read_bytes() == Path(second.results_path).read_bytes()
    elapsed = time.time() - SESSION["start"]
    verdict(11, same and elapsed < SUITE_BUDGET_S,
            f"results byte-identical: {same}; session time so far {elapsed:.0f} s "
            f"on {os.cpu_count()} core(s), budget {SUITE_BUDGET_S} s")
