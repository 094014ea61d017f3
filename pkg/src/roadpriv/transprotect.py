"""Defense: predict plausible next locations and obfuscate only among them.

Locations are embedded with node2vec (skip-gram with negative sampling over
biased random walks), refined by graph convolutions and summed with
sinusoidal position codes. A causal multi-head attention stack maps the real
history to a distribution over the next location. Each location is ranked by
that probability plus ``alpha / dc`` (its travel-cost distortion with respect
to the real location), the top ``K`` form the candidate set, and the
obfuscation mechanism is rebuilt over that set alone.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import EmptyCandidateSet, NonFinite, ShapeMismatch, UnknownNode, UntrainedModel
from .mechanisms import (
    ObfuscationMatrix,
    PrivacyParams,
    UtilityModel,
    laplace_matrix,
    lp_matrix,
    obfuscate,
)
from .neural import (
    AdamConfig,
    GCNLayer,
    Linear,
    MultiHeadAttention,
    ParameterStore,
    check_finite,
    cross_entropy_logits,
    load_checkpoint,
    normalized_adjacency,
    positional_encoding,
    save_checkpoint,
    softmax,
)
from .roadnet import RoadGraph
from .vehitrack import ObservationSequence, Trajectory

log = logging.getLogger(__name__)

NEGATIVE_POWER = 0.75
DEFAULT_K = 10
DEFAULT_ALPHA = 1e4
OUT_INIT_SCALE = 0.1       # small output layer so an untrained scorer is near uniform


# ---------------------------------------------------------------- node2vec

@dataclass
class WalkCorpus:
    walks: np.ndarray          # [W, walk_length], -1 after a dead end
    truncated: int = 0


def node2vec_walks(
    graph: RoadGraph,
    p: float = 1.0,
    q: float = 1.0,
    walks_per_node: int = 10,
    walk_length: int = 20,
    seed: int = 0,
) -> WalkCorpus:
    """Second-order biased walks; every node starts ``walks_per_node`` walks."""
    if not (p > 0 and q > 0):
        raise ValueError("p and q must be positive")
    rng = np.random.default_rng(seed)
    starts = np.tile(np.arange(graph.n_nodes, dtype=np.int64), walks_per_node)
    uniforms = rng.random((len(starts), max(0, walk_length - 1)))
    walks = kernels.node2vec_walks(graph.indptr, graph.indices, starts, walk_length, float(p), float(q), uniforms)
    walks = np.asarray(walks, dtype=np.int64)
    truncated = int(np.sum(walks[:, -1] < 0)) if walk_length else 0
    if truncated:
        log.info("%d walks stopped at nodes without out-edges", truncated)
    return WalkCorpus(walks, truncated)


def skipgram_pairs(walks: np.ndarray, window: int) -> np.ndarray:
    """All (center, context) pairs within ``window`` steps, padding skipped."""
    out = []
    W, T = walks.shape
    for off in range(1, window + 1):
        if off >= T:
            break
        a, b = walks[:, :-off].ravel(), walks[:, off:].ravel()
        ok = (a >= 0) & (b >= 0)
        out.append(np.stack([a[ok], b[ok]], axis=1))
        out.append(np.stack([b[ok], a[ok]], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


def negative_distribution(walks: np.ndarray, n_nodes: int) -> np.ndarray:
    counts = np.bincount(walks[walks >= 0], minlength=n_nodes).astype(float)
    w = counts ** NEGATIVE_POWER
    return w / w.sum()


def sgns_loss(u_in: np.ndarray, v_out: np.ndarray, centers, contexts, negatives):
    """Negative-sampling loss and gradients for one batch.

    ``negatives`` is ``[B, k]``. Returns (summed loss, d_in, d_out) where the
    gradients are dense over the tables.
    """
    uc = u_in[centers]
    vo = v_out[contexts]
    vn = v_out[negatives]
    pos = np.sum(uc * vo, axis=1)
    neg = np.einsum("bg,bkg->bk", uc, vn)
    loss = float(np.sum(np.logaddexp(0.0, -pos)) + np.sum(np.logaddexp(0.0, neg)))
    gp = -1.0 / (1.0 + np.exp(pos))                 # d/dpos of -log sig(pos)
    gn = 1.0 / (1.0 + np.exp(-neg))                 # d/dneg of -log sig(-neg)
    d_uc = gp[:, None] * vo + np.einsum("bk,bkg->bg", gn, vn)
    d_in = np.zeros_like(u_in)
    d_out = np.zeros_like(v_out)
    np.add.at(d_in, centers, d_uc)
    np.add.at(d_out, contexts, gp[:, None] * uc)
    np.add.at(d_out, negatives, gn[:, :, None] * uc[:, None, :])
    return loss, d_in, d_out


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    stage: str

    def __post_init__(self):
        check_finite(self.vectors, f"{self.stage} embeddings")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class Node2VecConfig:
    dim: int = 128
    p: float = 1.0
    q: float = 1.0
    walks_per_node: int = 10
    walk_length: int = 20
    window: int = 5
    negatives: int = 5
    epochs: int = 2
    batch_size: int = 2048
    lr: float = 0.01
    seed: int = 0


@dataclass
class Node2VecResult:
    table: EmbeddingTable
    losses: list
    corpus: WalkCorpus


def node2vec_train(corpus: WalkCorpus, n_nodes: int, config: Node2VecConfig | None = None) -> Node2VecResult:
    """Skip-gram with negative sampling over the walk corpus (Adam)."""
    c = config or Node2VecConfig()
    pairs = skipgram_pairs(corpus.walks, c.window)
    if len(pairs) == 0:
        raise ValueError("walk corpus yields no training pairs")
    store = ParameterStore(c.seed, AdamConfig(lr=c.lr))
    store.add("in", (n_nodes, c.dim), fan_in=c.dim)
    store.add("out", (n_nodes, c.dim), init="zeros")
    noise = negative_distribution(corpus.walks, n_nodes)
    rng = np.random.default_rng(c.seed + 1)
    losses = []
    for _ in range(c.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for s in range(0, len(order), c.batch_size):
            batch = pairs[order[s:s + c.batch_size]]
            neg = rng.choice(n_nodes, size=(len(batch), c.negatives), p=noise)
            loss, d_in, d_out = sgns_loss(store["in"], store["out"], batch[:, 0], batch[:, 1], neg)
            store.grads["in"][...] = d_in / len(batch)
            store.grads["out"][...] = d_out / len(batch)
            store.step()
            total += loss
        losses.append(total / len(pairs))
    return Node2VecResult(EmbeddingTable(store["in"].copy(), "node2vec"), losses, corpus)


def train_node2vec(graph: RoadGraph, config: Node2VecConfig | None = None) -> Node2VecResult:
    c = config or Node2VecConfig()
    corpus = node2vec_walks(graph, c.p, c.q, c.walks_per_node, c.walk_length, c.seed)
    return node2vec_train(corpus, graph.n_nodes, c)


def standardize(vectors: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance columns so the first convolution is not flat."""
    sd = vectors.std(axis=0)
    return (vectors - vectors.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def graph_adjacency(graph: RoadGraph) -> np.ndarray:
    src = np.repeat(np.arange(graph.n_nodes), np.diff(graph.indptr))
    return normalized_adjacency(graph.n_nodes, zip(src.tolist(), graph.indices.tolist()))


def gcn_refine(graph: RoadGraph, table: EmbeddingTable, thetas: Sequence[np.ndarray]) -> EmbeddingTable:
    """Apply ``sigmoid(A_hat S Theta)`` once per entry of ``thetas``."""
    A = graph_adjacency(graph)
    S = table.vectors
    for th in thetas:
        if th.shape[0] != S.shape[1]:
            raise ShapeMismatch(f"theta {th.shape} vs embedding width {S.shape[1]}")
        S = 1.0 / (1.0 + np.exp(-(A @ S @ th)))
    return EmbeddingTable(S, "gcn")


def embed_trajectory(table: EmbeddingTable, nodes: Sequence[int]) -> np.ndarray:
    """Row n is the location embedding of ``nodes[n]`` plus position code n."""
    nodes = np.asarray(nodes, dtype=np.int64)
    bad = (nodes < 0) | (nodes >= len(table.vectors))
    if np.any(bad):
        raise UnknownNode(int(nodes[np.flatnonzero(bad)[0]]))
    return table.vectors[nodes] + positional_encoding(len(nodes), table.dim)


# ------------------------------------------------------------------ scorer

@dataclass
class ScorerConfig:
    heads: int = 4
    layers: int = 2
    gcn_layers: int = 2
    residual: bool = True
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


class TransformerScorer:
    """Causal attention over ``[start, x_1, ..., x_{N-1}]`` predicting ``x_n``.

    Node2vec vectors are fixed inputs; the graph convolutions, the start
    token, the attention blocks and the output layer are trained together.
    """

    def __init__(self, graph: RoadGraph, base: EmbeddingTable, config: ScorerConfig | None = None):
        self.config = config or ScorerConfig()
        c = self.config
        self.L = graph.n_nodes
        self.g = base.dim
        if self.g % 2:
            raise ShapeMismatch("embedding width must be even for position codes")
        self.raw_base = base.vectors
        self.base = standardize(base.vectors)
        self.A = graph_adjacency(graph)
        self.store = ParameterStore(c.seed, AdamConfig(lr=c.lr))
        self.gcn = [GCNLayer(self.store, f"gcn{k}", self.g, self.g) for k in range(c.gcn_layers)]
        self.store.add("start", (self.g,), fan_in=self.g)
        self.attn = [MultiHeadAttention(self.store, f"attn{k}", self.g, c.heads) for k in range(c.layers)]
        self.fc = Linear(self.store, "fc", self.g, self.L)
        self.store.params["fc.W"] *= OUT_INIT_SCALE
        self.store.params["fc.b"][:] = 0.0
        self.trained = False

    # -- embedding tables
    def _table(self):
        S = self.base
        caches = []
        for layer in self.gcn:
            S, cache = layer.forward(self.A, S)
            caches.append(cache)
        return S, caches

    def table(self) -> EmbeddingTable:
        return EmbeddingTable(self._table()[0], "gcn")

    # -- forward / backward on padded batches of histories
    def _forward(self, nodes: np.ndarray):
        """``nodes`` is ``[B, N]``; position n sees start plus ``nodes[:, :n]``."""
        B, N = nodes.shape
        S, gcache = self._table()
        X = np.empty((B, N, self.g))
        X[:, 0] = self.store["start"]
        if N > 1:
            X[:, 1:] = S[np.maximum(nodes[:, :-1], 0)]
        X = X + positional_encoding(N, self.g)[None]
        caches = []
        h = X
        for layer in self.attn:
            o, cache = layer.forward(h, causal=True)
            caches.append(cache)
            h = h + o if self.config.residual else o
        logits, fcache = self.fc.forward(h)
        return check_finite(logits, "scorer logits"), (gcache, caches, fcache, nodes)

    def _backward(self, dlogits: np.ndarray, cache) -> None:
        gcache, caches, fcache, nodes = cache
        dh = self.fc.backward(dlogits, fcache)
        for layer, c in zip(reversed(self.attn), reversed(caches)):
            dx = layer.backward(dh, c)
            dh = dh + dx if self.config.residual else dx
        self.store.grads["start"] += dh[:, 0].sum(axis=0)
        dS = np.zeros((self.L, self.g))
        if nodes.shape[1] > 1:
            np.add.at(dS, np.maximum(nodes[:, :-1], 0).ravel(), dh[:, 1:].reshape(-1, self.g))
        for layer, c in zip(reversed(self.gcn), reversed(gcache)):
            dS = layer.backward(dS, c)

    def score_matrix(self, nodes: Sequence[int]) -> np.ndarray:
        """``H[n]`` = distribution of the location at slot n given slots before it."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if np.any((nodes < 0) | (nodes >= self.L)):
            raise UnknownNode(int(nodes[np.flatnonzero((nodes < 0) | (nodes >= self.L))[0]]))
        logits, _ = self._forward(nodes[None])
        return softmax(logits[0])

    def score_slot(self, history: Sequence[int]) -> np.ndarray:
        """Next-location distribution after ``history`` (may be empty)."""
        history = np.asarray(history, dtype=np.int64)
        seq = np.append(history, 0)
        return self.score_matrix(seq)[-1]

    def loss(self, trajectories: Sequence[Trajectory]) -> float:
        nodes, mask = _pad_nodes(trajectories)
        logits, _ = self._forward(nodes)
        return cross_entropy_logits(logits, nodes, mask).loss

    def train(self, trajectories: Sequence[Trajectory], epochs: int | None = None) -> list:
        if not trajectories:
            raise ValueError("scorer training needs at least one trajectory")
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        rng = np.random.default_rng(c.seed + 1)
        losses = []
        for _ in range(epochs):
            order = rng.permutation(len(trajectories))
            total = count = 0
            for s in range(0, len(order), c.batch_size):
                batch = [trajectories[i] for i in order[s:s + c.batch_size]]
                nodes, mask = _pad_nodes(batch)
                snap = self.store.snapshot()
                try:
                    logits, cache = self._forward(nodes)
                    res = cross_entropy_logits(logits, nodes, mask)
                    self.store.zero_grad()
                    self._backward(res.grad / max(1, res.count), cache)
                    self.store.step()
                except NonFinite:
                    self.store.restore(snap)
                    log.warning("scorer training aborted on non-finite values")
                    self.trained = True
                    return losses
                total += res.loss
                count += res.count
            losses.append(total / max(1, count))
        self.trained = True
        return losses

    def save(self, path) -> None:
        meta = {
            "kind": "transprotect-scorer",
            "config": asdict(self.config),
            "base": self.raw_base.tolist(),
            "trained": self.trained,
        }
        save_checkpoint(self.store, path, meta)

    @classmethod
    def load(cls, path, graph: RoadGraph) -> "TransformerScorer":
        store, meta = load_checkpoint(path)
        base = EmbeddingTable(np.asarray(meta["base"], dtype=float), "node2vec")
        model = cls(graph, base, ScorerConfig(**meta["config"]))
        for k in model.store.params:
            model.store.params[k] = store.params[k]
            model.store.grads[k] = np.zeros_like(store.params[k])
            model.store.m[k] = store.m[k]
            model.store.v[k] = store.v[k]
        model.store.t = store.t
        model.trained = bool(meta.get("trained", True))
        return model


def _pad_nodes(trajectories: Sequence[Trajectory]):
    lengths = np.array([len(t) for t in trajectories])
    N = int(lengths.max())
    nodes = np.zeros((len(trajectories), N), dtype=np.int64)
    for b, t in enumerate(trajectories):
        nodes[b, :lengths[b]] = t.nodes
    mask = np.arange(N)[None, :] < lengths[:, None]
    return nodes, mask


def top1_accuracy(scorer: TransformerScorer, trajectories: Sequence[Trajectory]) -> float:
    hit = tot = 0
    for t in trajectories:
        H = scorer.score_matrix(t.nodes)
        hit += int(np.sum(np.argmax(H, axis=1) == t.nodes))
        tot += len(t)
    return hit / tot


# ----------------------------------------------------------- candidate sets

@dataclass
class CandidateSet:
    slot: int
    members: np.ndarray        # sorted ids
    scores: np.ndarray         # weighted score per member
    alpha: float
    K: int

    def to_json(self, traj: str = "") -> dict:
        return {
            "traj": traj,
            "slot": self.slot,
            "members": self.members.tolist(),
            "scores": [None if math.isinf(s) else float(s) for s in self.scores],
            "alpha": self.alpha,
            "K": self.K,
        }


def weighted_scores(h: np.ndarray, real: int, dc: np.ndarray, alpha: float) -> np.ndarray:
    """``h_j + alpha / dc_j``; zero distortion scores +inf."""
    with np.errstate(divide="ignore"):
        s = h + np.where(dc > 0, alpha / np.where(dc > 0, dc, 1.0), np.inf)
    s[real] = np.inf
    return s


def top_k_heap(scores: np.ndarray, K: int, first: int | None = None) -> np.ndarray:
    """Indices of the ``K`` largest scores in one pass with a size-K min-heap.

    Equal scores favor the smaller index; ``first`` outranks everything.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    heap: list = []
    for j, s in enumerate(scores.tolist()):
        key = (s, 1 if j == first else 0, -j)
        if len(heap) < K:
            heapq.heappush(heap, key)
        elif key > heap[0]:
            heapq.heapreplace(heap, key)
    return np.sort(np.array([-k[2] for k in heap], dtype=np.int64))


def candidate_set(
    h: np.ndarray,
    real: int,
    utility: UtilityModel,
    alpha: float = DEFAULT_ALPHA,
    K: int = DEFAULT_K,
    slot: int = 0,
) -> CandidateSet:
    """Top-K locations by ``h_j + alpha / dc(real, j)``; the real location always enters."""
    s = weighted_scores(h, real, utility.delta_row(int(real)), alpha)
    members = top_k_heap(s, K, first=real)
    return CandidateSet(slot, members, s[members], float(alpha), int(K))


def restrict_mechanism(
    kind: str,
    candidates: CandidateSet | Sequence[int],
    params: PrivacyParams,
    geometry,
    utility: UtilityModel | None = None,
    solver: str = "highs",
) -> ObfuscationMatrix:
    """Laplace or LP mechanism whose support is the candidate set alone.

    For Laplace the caller should pin ``params.lambda_max`` to the region's
    value so the restricted rows are the unrestricted rows conditioned on the
    candidate set.
    """
    members = candidates.members if isinstance(candidates, CandidateSet) else np.asarray(candidates, dtype=np.int64)
    if len(members) == 0:
        raise EmptyCandidateSet("no candidate locations")
    if kind == "laplace":
        Z = laplace_matrix(members, geometry, params)
    elif kind == "lp":
        if utility is None:
            raise ValueError("LP restriction needs a utility model")
        Z = lp_matrix(members, geometry, params, utility, solver=solver)
    else:
        raise ValueError(f"unknown mechanism kind {kind!r}")
    return ObfuscationMatrix(Z.support, Z.probs, Z.params, "restricted", Z.objective, {**Z.meta, "base": kind})


# ------------------------------------------------------------------ defense

@dataclass
class TransProtect:
    """Vehicle-side defense; ``observe`` plays the role of a per-slot mechanism."""

    graph: RoadGraph
    scorer: TransformerScorer
    utility: UtilityModel
    kind: str
    params: PrivacyParams
    K: int = DEFAULT_K
    alpha: float = DEFAULT_ALPHA
    solver: str = "highs"
    log: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.scorer.trained:
            raise UntrainedModel("train the scorer before serving the defense")

    def candidates(self, traj: Trajectory) -> list:
        H = self.scorer.score_matrix(traj.nodes)
        return [candidate_set(H[n], int(x), self.utility, self.alpha, self.K, n) for n, x in enumerate(traj.nodes)]

    def mechanism_for(self, cs: CandidateSet) -> ObfuscationMatrix:
        key = tuple(cs.members.tolist())
        Z = self._cache.get(key)
        if Z is None:
            Z = restrict_mechanism(self.kind, cs, self.params, self.graph, self.utility, self.solver)
            self._cache[key] = Z
        return Z

    def observe(self, traj: Trajectory, rng: np.random.Generator) -> ObservationSequence:
        sets = self.candidates(traj)
        mats, reports = [], []
        for cs, x in zip(sets, traj.nodes):
            Z = self.mechanism_for(cs)
            mats.append(Z)
            reports.append(obfuscate(Z, int(x), rng))
            self.log.append(cs.to_json(traj.id))
        return ObservationSequence(traj.times, reports, tuple(mats), traj.id)


def write_candidate_log(entries: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, separators=(",", ":")) + "\n")
