"""Comparison attacks: single-shot Bayes and HMM decoding with Viterbi."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AllPathsZero, AllZeroColumn, DimensionMismatch, EmptyCorpus, FormatError, NotStochastic
from .mechanisms import STOCHASTIC_TOL, ObfuscationMatrix, sidecar_path
from .roadnet import RoadGraph

DEFAULT_SMOOTHING = 1e-6
TIE_TOL = 1e-12
TRANSITIONS_FORMAT_VERSION = 1


@dataclass
class BayesEstimate:
    location: int
    fallback: bool


def _prior_over(prior, locs: np.ndarray) -> np.ndarray:
    """Prior weights for ``locs``; ``prior`` is indexed by node id (None = flat)."""
    if prior is None:
        return np.ones(len(locs))
    p = np.asarray(prior, dtype=float)
    return p[locs]


def bayes_attack(Z: ObfuscationMatrix, y: int, prior=None) -> BayesEstimate:
    """MAP real location for report ``y``; smallest id wins ties.

    An all-zero column yields the prior argmax with ``fallback`` set.
    """
    col = Z.positions([y])[0]
    if col < 0:
        raise AllZeroColumn(f"report {y} outside the mechanism support")
    w = _prior_over(prior, Z.support)
    score = w * Z.probs[:, col]
    fallback = not np.any(score > 0)
    if fallback:
        score = w
    best = score.max()
    hits = Z.support[score >= best * (1 - TIE_TOL)] if best > 0 else Z.support
    return BayesEstimate(int(hits.min()), fallback)


# -------------------------------------------------------------- transitions

@dataclass(frozen=True, eq=False)
class TransitionModel:
    """Row-stochastic ``matrices[bucket, from, to]`` over ``states``."""

    states: np.ndarray
    matrices: np.ndarray
    smoothing: float
    bucket_names: tuple[str, ...] = ("default",)

    def __post_init__(self):
        S = len(self.states)
        if self.matrices.ndim != 3 or self.matrices.shape[1:] != (S, S):
            raise DimensionMismatch(f"transition shape {self.matrices.shape} vs {S} states")
        if np.max(np.abs(self.matrices.sum(axis=2) - 1.0)) > STOCHASTIC_TOL:
            raise NotStochastic("transition rows must sum to 1")

    def matrix(self, bucket: int = 0) -> np.ndarray:
        return self.matrices[bucket]


def learn_transitions(
    corpus: Sequence,
    graph: RoadGraph,
    smoothing: float = DEFAULT_SMOOTHING,
    states: Sequence[int] | None = None,
) -> TransitionModel:
    """Count consecutive moves per time bucket, smooth, normalize.

    Rows that saw no moves fall back to uniform over the node and its
    out-neighbors. Each move is keyed to the bucket of its departure time.
    """
    if len(corpus) == 0 or all(len(t) < 2 for t in corpus):
        raise EmptyCorpus("need at least one trajectory with two slots")
    states = np.arange(graph.n_nodes) if states is None else np.asarray(states, dtype=np.int64)
    pos = np.full(graph.n_nodes, -1, dtype=np.int64)
    pos[states] = np.arange(len(states))
    B = graph.n_buckets
    S = len(states)
    counts = np.zeros((B, S, S))
    for traj in corpus:
        a = pos[traj.nodes[:-1]]
        b = pos[traj.nodes[1:]]
        bk = np.array([graph.schedule.bucket_at(t) if graph.schedule else 0 for t in traj.times[:-1]], dtype=np.int64)
        ok = (a >= 0) & (b >= 0)
        np.add.at(counts, (bk[ok], a[ok], b[ok]), 1.0)

    # uniform over self + neighbors, used for rows without observations
    fallback = np.zeros((S, S))
    for r, s in enumerate(states.tolist()):
        nb = pos[[s] + graph.neighbors(s)]
        fallback[r, nb[nb >= 0]] = 1.0
    fallback /= fallback.sum(axis=1, keepdims=True)

    mats = np.empty_like(counts)
    for b in range(B):
        c = counts[b]
        seen = c.sum(axis=1) > 0
        m = np.where(seen[:, None], c, fallback) + smoothing
        mats[b] = m / m.sum(axis=1, keepdims=True)
    return TransitionModel(states, mats, float(smoothing), graph.bucket_names)


def write_transitions(model: TransitionModel, path) -> None:
    """Matrix CSV schema (``row_loc,col_loc,prob``), one file per bucket."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    files = []
    for b in range(model.matrices.shape[0]):
        p = path if b == 0 else path.with_name(f"{path.stem}.{model.bucket_names[b]}{path.suffix}")
        files.append(p.name)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row_loc", "col_loc", "prob"])
            st = model.states.tolist()
            for a, r in enumerate(st):
                row = model.matrices[b, a]
                for k in np.flatnonzero(row).tolist():
                    w.writerow([r, st[k], repr(float(row[k]))])
    side = {
        "format_version": TRANSITIONS_FORMAT_VERSION,
        "provenance": "hmm-transitions",
        "support": model.states.tolist(),
        "smoothing": model.smoothing,
        "buckets": list(model.bucket_names),
        "files": files,
    }
    sidecar_path(path).write_text(json.dumps(side, indent=2), encoding="utf-8")


def read_transitions(path) -> TransitionModel:
    path = Path(path)
    try:
        side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"missing sidecar {sidecar_path(path)}") from None
    if side.get("provenance") != "hmm-transitions":
        raise FormatError(f"{path}: not a transition model")
    states = np.asarray(side["support"], dtype=np.int64)
    pos = {s: a for a, s in enumerate(states.tolist())}
    mats = np.zeros((len(side["files"]), len(states), len(states)))
    for b, name in enumerate(side["files"]):
        with open(path.with_name(name), newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                mats[b, pos[int(r["row_loc"])], pos[int(r["col_loc"])]] = float(r["prob"])
    return TransitionModel(states, mats, float(side["smoothing"]), tuple(side["buckets"]))


# ------------------------------------------------------------------ viterbi

@dataclass
class ViterbiResult:
    path: np.ndarray
    log_score: float
    fallback: bool


def emission_table(states: np.ndarray, reports: Sequence[int], matrices: Sequence[ObfuscationMatrix]) -> np.ndarray:
    """``E[n, s] = z_n[states[s], reports[n]]`` (zero off-support)."""
    if len(reports) != len(matrices):
        raise DimensionMismatch("one matrix per report is required")
    return np.stack([Z.likelihood(y, states) for y, Z in zip(reports, matrices)]) if len(reports) else np.zeros((0, len(states)))


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def viterbi(
    transitions: TransitionModel,
    reports: Sequence[int],
    matrices: Sequence[ObfuscationMatrix],
    prior=None,
    buckets: Sequence[int] | None = None,
) -> ViterbiResult:
    """MAP state path in log space; ties go to the lexicographically smallest path.

    A backward max-product pass gives each state's best completion score,
    then the path is built front to back taking the smallest state among
    the maximizers at every slot, which yields the smallest optimal path.
    ``buckets[n]`` selects the transition matrix for the move n -> n+1.
    """
    states = transitions.states
    N = len(reports)
    if N == 0:
        return ViterbiResult(np.zeros(0, dtype=np.int64), 0.0, False)
    E = _log(emission_table(states, reports, matrices))
    logp = _log(_prior_over(prior, states))
    buckets = [0] * (N - 1) if buckets is None else list(buckets)
    logs = {b: _log(transitions.matrix(b)) for b in set(buckets)}
    logT = [logs[b] for b in buckets]

    beta = np.zeros((N, len(states)))
    for n in range(N - 2, -1, -1):
        beta[n] = np.max(logT[n] + (E[n + 1] + beta[n + 1])[None, :], axis=1)

    head = logp + E[0] + beta[0]
    best = head.max()
    if not np.isfinite(best):
        est = [bayes_attack(Z, y, prior).location for y, Z in zip(reports, matrices)]
        return ViterbiResult(np.asarray(est, dtype=np.int64), -np.inf, True)
    path = np.empty(N, dtype=np.int64)
    s = _first_max(head)
    path[0] = s
    for n in range(1, N):
        s = _first_max(logT[n - 1][s] + E[n] + beta[n])
        path[n] = s
    return ViterbiResult(states[path], float(best), False)


def _first_max(v: np.ndarray) -> int:
    m = v.max()
    return int(np.flatnonzero(v >= m - TIE_TOL * max(1.0, abs(m)))[0])


def viterbi_linear(
    transitions: TransitionModel,
    reports: Sequence[int],
    matrices: Sequence[ObfuscationMatrix],
    prior=None,
) -> ViterbiResult:
    """Reference in linear probability space (underflows on long inputs)."""
    states = transitions.states
    N = len(reports)
    E = emission_table(states, reports, matrices)
    T = transitions.matrix(0)
    beta = np.ones((N, len(states)))
    for n in range(N - 2, -1, -1):
        beta[n] = np.max(T * (E[n + 1] * beta[n + 1])[None, :], axis=1)
    head = _prior_over(prior, states) * E[0] * beta[0]
    if not head.max() > 0:
        raise AllPathsZero("every path has zero probability")
    path = np.empty(N, dtype=np.int64)
    s = int(np.flatnonzero(head >= head.max() * (1 - TIE_TOL))[0])
    path[0] = s
    for n in range(1, N):
        v = T[s] * E[n] * beta[n]
        s = int(np.flatnonzero(v >= v.max() * (1 - TIE_TOL))[0])
        path[n] = s
    return ViterbiResult(states[path], float(np.log(head.max())), False)


def path_log_score(transitions: TransitionModel, path_states: Sequence[int], reports, matrices, prior=None) -> float:
    """Log joint probability of one state path (node ids)."""
    states = transitions.states
    pos = {s: a for a, s in enumerate(states.tolist())}
    idx = [pos[int(x)] for x in path_states]
    E = emission_table(states, reports, matrices)
    w = _prior_over(prior, states)
    T = transitions.matrix(0)
    with np.errstate(divide="ignore"):
        total = np.log(w[idx[0]]) + np.log(E[0, idx[0]])
        for n in range(1, len(idx)):
            total += np.log(T[idx[n - 1], idx[n]]) + np.log(E[n, idx[n]])
    return float(total)
