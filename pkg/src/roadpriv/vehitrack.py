"""Trajectory inference attack: mobility-aware Bayes filtering plus BiLSTM refinement.

Phase 1 walks the reports slot by slot. The locations still considered
possible at slot n-1 expand into the union of their road-network reachable
sets for the elapsed time; Bayes' rule over that union with the slot's
obfuscation matrix gives a posterior, and locations whose posterior falls
below ``xi`` are dropped. Phase 2 feeds the posterior sequence to a stacked
bidirectional LSTM trained on simulated (posterior, truth) pairs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    DegenerateSlot,
    DimensionMismatch,
    LengthMismatch,
    MatrixMissing,
    ShapeMismatch,
    UnknownNode,
)
from .mechanisms import ObfuscationMatrix, sample_obfuscated
from .neural import (
    AdamConfig,
    Linear,
    LSTMStack,
    ParameterStore,
    check_finite,
    cross_entropy_logits,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)
from .roadnet import ReachabilityIndex, RoadGraph, haversine_km
from .units import DEFAULT_SAMPLE_INTERVAL_S, DEFAULT_SPEED_LIMIT_KMH

log = logging.getLogger(__name__)

DEFAULT_XI = 1e-4
DATASET_FORMAT_VERSION = 1


# ------------------------------------------------------------------ types

@dataclass(frozen=True, eq=False)
class Trajectory:
    id: str
    times: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.int64))
        if self.times.shape != self.nodes.shape or self.times.ndim != 1:
            raise LengthMismatch("times and nodes must be aligned 1-D arrays")
        if len(self.times) == 0:
            raise LengthMismatch("a trajectory needs at least one slot")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"trajectory {self.id}: timestamps must strictly increase")

    def __len__(self) -> int:
        return len(self.nodes)

    def check_nodes(self, g: RoadGraph) -> None:
        bad = (self.nodes < 0) | (self.nodes >= g.n_nodes)
        if np.any(bad):
            raise UnknownNode(int(self.nodes[np.flatnonzero(bad)[0]]))

    def to_json(self) -> dict:
        return {"id": self.id, "times": self.times.tolist(), "nodes": self.nodes.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        return cls(str(d["id"]), d["times"], d["nodes"])


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    """Reported locations with the matrix each was drawn from."""

    times: np.ndarray
    reports: np.ndarray
    matrices: tuple
    traj_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "reports", np.asarray(self.reports, dtype=np.int64))
        if len(self.times) != len(self.reports):
            raise LengthMismatch("times and reports must align")
        if len(self.matrices) != len(self.reports):
            raise MatrixMissing(f"{len(self.reports)} reports but {len(self.matrices)} matrices")
        if any(Z is None for Z in self.matrices):
            raise MatrixMissing("every slot needs an obfuscation matrix")

    def __len__(self) -> int:
        return len(self.reports)


@dataclass
class SlotPosterior:
    reachable: np.ndarray      # R_n, sorted node ids
    raw: np.ndarray            # posterior over R_n before thresholding
    support: np.ndarray        # S_n, sorted node ids
    posterior: np.ndarray      # renormalized over S_n
    fallback: str | None = None


@dataclass
class PosteriorSequence:
    slots: list

    def __len__(self) -> int:
        return len(self.slots)

    def dense(self, n_locations: int) -> np.ndarray:
        """``[N, L]`` matrix with each slot's renormalized posterior, zeros elsewhere."""
        out = np.zeros((len(self.slots), n_locations))
        for n, s in enumerate(self.slots):
            out[n, s.support] = s.posterior
        return out

    def fallbacks(self) -> list:
        return [s.fallback for s in self.slots]


@dataclass
class InferenceResult:
    estimates: np.ndarray
    errors_km: np.ndarray

    @property
    def eie(self) -> float:
        return float(self.errors_km.mean()) if len(self.errors_km) else 0.0


class Mechanism(Protocol):
    def observe(self, traj: Trajectory, rng: np.random.Generator) -> ObservationSequence: ...


@dataclass(frozen=True, eq=False)
class StaticMechanism:
    """The same matrix for every slot."""

    Z: ObfuscationMatrix

    def observe(self, traj: Trajectory, rng: np.random.Generator) -> ObservationSequence:
        rows = self.Z.positions(traj.nodes)
        if np.any(rows < 0):
            raise MatrixMissing(f"trajectory {traj.id} leaves the mechanism support")
        reports = [int(self.Z.support[sample_obfuscated(self.Z, int(r), rng)]) for r in rows]
        return ObservationSequence(traj.times, reports, (self.Z,) * len(traj), traj.id)


# ----------------------------------------------------------------- phase 1

def _bucket(g: RoadGraph, t: float) -> int:
    return g.schedule.bucket_at(t) if g.schedule is not None else 0


def _bayes(prior: np.ndarray, Z: ObfuscationMatrix, y: int, locs: np.ndarray):
    w = prior[locs] * Z.likelihood(y, locs)
    total = w.sum()
    return w, total


def phase1_posteriors(
    obs: ObservationSequence,
    graph: RoadGraph,
    prior: np.ndarray | None = None,
    xi: float = DEFAULT_XI,
    s_limit: float = DEFAULT_SPEED_LIMIT_KMH,
    reach: ReachabilityIndex | None = None,
    bootstrap_dt: float | None = None,
    on_degenerate: str = "fallback",
) -> PosteriorSequence:
    """Per-slot possible sets and posteriors.

    Slot 1 runs Bayes over the speed ball around the first report, with
    ``bootstrap_dt`` defaulting to the first inter-report gap (or the nominal
    20 s for a single report). Later slots use the union of reachable sets
    from the previous possible set over the elapsed time.

    Degenerate slots (``on_degenerate="fallback"``) are patched and tagged:
    ``"top1"`` keeps the single best location when ``xi`` removes all of
    them; ``"rebootstrap"`` restarts from the speed ball around the current
    report when no reachable location can explain it; ``"prior"`` keeps the
    prior argmax of the reachable union when even that fails.
    """
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    if on_degenerate not in ("fallback", "raise"):
        raise ValueError("on_degenerate must be 'fallback' or 'raise'")
    L = graph.n_nodes
    prior = np.full(L, 1.0 / L) if prior is None else np.asarray(prior, dtype=float)
    if prior.shape != (L,):
        raise DimensionMismatch(f"prior over {prior.shape} for {L} nodes")
    reach = reach or ReachabilityIndex(graph, s_limit)
    N = len(obs)
    if bootstrap_dt is None:
        bootstrap_dt = float(obs.times[1] - obs.times[0]) if N > 1 else float(DEFAULT_SAMPLE_INTERVAL_S)

    slots: list[SlotPosterior] = []
    prev: np.ndarray | None = None
    for n in range(N):
        y = int(obs.reports[n])
        Z = obs.matrices[n]
        if prev is None:
            R = reach.ball(y, bootstrap_dt)
        else:
            dt = float(obs.times[n] - obs.times[n - 1])
            b = _bucket(graph, float(obs.times[n - 1]))
            R = reach.union(prev, dt, b)
        w, total = _bayes(prior, Z, y, R)
        fallback = None
        if total > 0:
            raw = w / total
            keep = raw >= xi if xi > 0 else raw > 0
            if not keep.any():
                if on_degenerate == "raise":
                    raise DegenerateSlot(f"slot {n}: threshold {xi} removes every location")
                keep = np.zeros(len(R), dtype=bool)
                keep[int(np.argmax(raw))] = True
                fallback = "top1"
        else:
            if on_degenerate == "raise":
                raise DegenerateSlot(f"slot {n}: report {y} has zero likelihood on the reachable set")
            raw = np.zeros(len(R))
            ball = reach.ball(y, bootstrap_dt)
            wb, tb = _bayes(prior, Z, y, ball)
            if tb > 0:
                R = ball
                raw = wb / tb
                keep = raw >= xi if xi > 0 else raw > 0
                if not keep.any():
                    keep[int(np.argmax(raw))] = True
                fallback = "rebootstrap"
            else:
                keep = np.zeros(len(R), dtype=bool)
                keep[int(np.argmax(prior[R]))] = True
                fallback = "prior"
            log.debug("slot %d of %s degenerate, fallback %s", n, obs.traj_id, fallback)
        S = R[keep]
        post = raw[keep]
        post = post / post.sum() if post.sum() > 0 else np.full(len(S), 1.0 / len(S))
        slots.append(SlotPosterior(R, raw, S, post, fallback))
        prev = S
    return PosteriorSequence(slots)


def phase1_estimates(posteriors: PosteriorSequence) -> np.ndarray:
    """VehiTrack-I: per-slot posterior argmax, smallest id on ties."""
    out = np.empty(len(posteriors), dtype=np.int64)
    for n, s in enumerate(posteriors.slots):
        out[n] = s.support[int(np.argmax(s.posterior))]
    return out


# ----------------------------------------------------------------- metrics

def eie(estimates, truth, graph: RoadGraph) -> float:
    """Mean great-circle distance in km between estimates and truth."""
    return inference_result(estimates, truth, graph).eie


def inference_result(estimates, truth, graph: RoadGraph) -> InferenceResult:
    est = np.asarray(estimates, dtype=np.int64)
    tru = np.asarray(truth, dtype=np.int64)
    if est.shape != tru.shape:
        raise LengthMismatch(f"{len(est)} estimates for {len(tru)} true locations")
    err = haversine_km(graph.lat[est], graph.lon[est], graph.lat[tru], graph.lon[tru])
    return InferenceResult(est, np.asarray(err, dtype=float))


def elimination_ratio(posteriors: PosteriorSequence, ranges: Sequence) -> float:
    """Mean over slots of the share of each range the attacker rules out.

    ``ranges[n]`` is either the set of locations the report could have come
    from (ids) or just its size. With ids the ratio is
    ``|range \\ S_n| / |range|``; with sizes it is ``1 - |S_n| / size``.
    """
    if len(ranges) != len(posteriors):
        raise LengthMismatch("one range per slot is required")
    if not len(ranges):
        return 0.0
    vals = []
    for s, r in zip(posteriors.slots, ranges):
        if np.ndim(r) == 0:
            vals.append(1.0 - len(s.support) / float(r))
        else:
            r = np.asarray(r, dtype=np.int64)
            vals.append(1.0 - np.isin(r, s.support).sum() / len(r))
    return float(np.mean(vals))


def speed_balls(obs: ObservationSequence, reach: ReachabilityIndex, bootstrap_dt: float | None = None) -> list:
    """Speed ball around every report for the gap preceding it."""
    N = len(obs)
    if bootstrap_dt is None:
        bootstrap_dt = float(obs.times[1] - obs.times[0]) if N > 1 else float(DEFAULT_SAMPLE_INTERVAL_S)
    out = []
    for n in range(N):
        dt = bootstrap_dt if n == 0 else float(obs.times[n] - obs.times[n - 1])
        out.append(reach.ball(int(obs.reports[n]), dt))
    return out


# -------------------------------------------------------- training samples

@dataclass
class TrainingSample:
    traj_id: str
    seed: int
    times: np.ndarray
    reports: np.ndarray
    supports: list
    posteriors: list
    truth: np.ndarray
    fallbacks: list = field(default_factory=list)

    def dense(self, n_locations: int) -> np.ndarray:
        out = np.zeros((len(self.truth), n_locations))
        for n, (s, p) in enumerate(zip(self.supports, self.posteriors)):
            out[n, s] = p
        return out

    def to_json(self) -> dict:
        return {
            "traj": self.traj_id,
            "seed": self.seed,
            "times": self.times.tolist(),
            "obfuscated": self.reports.tolist(),
            "support": [s.tolist() for s in self.supports],
            "posterior": [[float(v) for v in p] for p in self.posteriors],
            "truth": self.truth.tolist(),
            "fallbacks": self.fallbacks,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainingSample":
        return cls(
            d["traj"], int(d["seed"]), np.asarray(d["times"], dtype=float),
            np.asarray(d["obfuscated"], dtype=np.int64),
            [np.asarray(s, dtype=np.int64) for s in d["support"]],
            [np.asarray(p, dtype=float) for p in d["posterior"]],
            np.asarray(d["truth"], dtype=np.int64), list(d.get("fallbacks", [])),
        )


@dataclass
class SampleReport:
    samples: list
    dropped: int = 0


def derive_seed(master: int, *key: int) -> int:
    """Counter-based child seed: independent of iteration order."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_training_samples(
    trajectories: Sequence[Trajectory],
    mechanism,
    graph: RoadGraph,
    samples_per_traj: int = 20,
    seed: int = 0,
    prior: np.ndarray | None = None,
    xi: float = DEFAULT_XI,
    s_limit: float = DEFAULT_SPEED_LIMIT_KMH,
    reach: ReachabilityIndex | None = None,
) -> SampleReport:
    """Obfuscate each trajectory ``samples_per_traj`` times and run Phase 1.

    ``mechanism`` is an ObfuscationMatrix or anything with ``observe``.
    Sample ``s`` of trajectory ``i`` uses ``derive_seed(seed, i, s)``.
    """
    if isinstance(mechanism, ObfuscationMatrix):
        mechanism = StaticMechanism(mechanism)
    reach = reach or ReachabilityIndex(graph, s_limit)
    out = []
    dropped = 0
    for i, traj in enumerate(trajectories):
        for s in range(samples_per_traj):
            sd = derive_seed(seed, i, s)
            rng = np.random.default_rng(sd)
            obs = mechanism.observe(traj, rng)
            try:
                post = phase1_posteriors(obs, graph, prior, xi, s_limit, reach, on_degenerate="raise")
            except DegenerateSlot:
                dropped += 1
                continue
            out.append(TrainingSample(
                traj.id, sd, traj.times, obs.reports,
                [p.support for p in post.slots], [p.posterior for p in post.slots],
                traj.nodes.copy(), post.fallbacks(),
            ))
    if dropped:
        log.info("dropped %d degenerate samples", dropped)
    return SampleReport(out, dropped)


def write_dataset(samples: Sequence[TrainingSample], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def read_dataset(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [TrainingSample.from_json(json.loads(line)) for line in fh if line.strip()]


# ----------------------------------------------------------------- phase 2

@dataclass
class Phase2Config:
    hidden: int = 32
    layers: int = 5
    bidirectional: bool = True
    skip: bool = True
    log_floor: float = 1e-6
    input_scale: str = "size"
    forget_bias: float = 1.0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int | None = None
    aborted: bool = False


class Phase2Model:
    """Stacked BiLSTM over posterior vectors with a per-location output head.

    With ``skip`` the head adds ``beta * log(x + floor)`` of the input
    posterior (``beta`` starts at 1, the head at zero), so the untrained
    model reproduces the Phase-1 argmax and training learns corrections.
    Outputs pass through a sigmoid; the argmax is taken over all locations.
    """

    def __init__(self, n_locations: int, config: Phase2Config | None = None):
        self.L = int(n_locations)
        self.config = config or Phase2Config()
        c = self.config
        self.store = ParameterStore(c.seed, AdamConfig(lr=c.lr))
        self.lstm = LSTMStack(self.store, "lstm", self.L, c.hidden, c.layers, c.bidirectional)
        for layer in self.lstm.fwd + self.lstm.bwd:
            self.store[layer.b][:c.hidden] = c.forget_bias
        self.head = Linear(self.store, "head", self.lstm.d_out, self.L, init="zeros" if c.skip else "uniform")
        if c.skip:
            self.store.add("skip.beta", (1,), init="zeros")
            self.store["skip.beta"][...] = 1.0

    # -- forward / backward
    def features(self, x: np.ndarray) -> np.ndarray:
        """Posterior vectors rescaled so a flat posterior reads as ones."""
        if self.config.input_scale == "size":
            return x * self.L
        if self.config.input_scale == "log1p":
            return np.log1p(x * self.L)
        if self.config.input_scale == "none":
            return x
        raise ValueError(f"unknown input_scale {self.config.input_scale!r}")

    def _logits(self, x: np.ndarray, lengths: np.ndarray):
        H, cache = self.lstm.forward(self.features(x), lengths)
        out, hcache = self.head.forward(H)
        lx = None
        if self.config.skip:
            lx = np.log(x + self.config.log_floor)
            out = out + self.store["skip.beta"][0] * lx
        return check_finite(out, "phase-2 logits"), (cache, hcache, lx)

    def _backward(self, dlogits: np.ndarray, caches) -> None:
        cache, hcache, lx = caches
        if lx is not None:
            self.store.grads["skip.beta"][0] += float(np.sum(dlogits * lx))
        dH = self.head.backward(dlogits, hcache)
        self.lstm.backward(dH, cache, input_grad=False)

    def outputs(self, x: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        """Sigmoid outputs ``[B, T, L]`` for padded inputs ``[B, T, L]``."""
        if x.ndim != 3 or x.shape[2] != self.L:
            raise ShapeMismatch(f"expected [B, T, {self.L}], got {x.shape}")
        lengths = np.full(x.shape[0], x.shape[1]) if lengths is None else np.asarray(lengths)
        logits, _ = self._logits(x, lengths)
        return sigmoid(logits)

    def infer(self, dense: np.ndarray) -> np.ndarray:
        """Estimates for one unpadded ``[N, L]`` posterior sequence."""
        if dense.ndim != 2 or dense.shape[1] != self.L:
            raise ShapeMismatch(f"expected [N, {self.L}], got {dense.shape}")
        y = self.outputs(dense[None])[0]
        return np.argmax(y, axis=1).astype(np.int64)

    def infer_posteriors(self, posteriors: PosteriorSequence) -> np.ndarray:
        return self.infer(posteriors.dense(self.L))

    def loss(self, x: np.ndarray, targets: np.ndarray, lengths: np.ndarray) -> float:
        mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
        logits, _ = self._logits(x, lengths)
        return cross_entropy_logits(logits, targets, mask).loss / max(1, int(mask.sum()))

    # -- training
    def train(
        self,
        samples: Sequence[TrainingSample],
        epochs: int | None = None,
        rng_seed: int | None = None,
        val_samples: Sequence[TrainingSample] | None = None,
        patience: int | None = None,
    ) -> TrainLog:
        """Adam on mean masked cross-entropy; inputs padded to the longest sample.

        With ``val_samples`` the parameters of the epoch with the lowest
        validation loss are restored at the end, and training stops after
        ``patience`` epochs without improvement.
        """
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        x, targets, lengths = pad_samples(samples, self.L)
        val = pad_samples(val_samples, self.L) if val_samples else None
        rng = np.random.default_rng(c.seed if rng_seed is None else rng_seed)
        out = TrainLog()
        best, best_snap, stale = np.inf, None, 0
        for epoch in range(epochs):
            order = rng.permutation(len(samples))
            total, count = 0.0, 0
            for start in range(0, len(order), c.batch_size):
                idx = order[start:start + c.batch_size]
                T = int(lengths[idx].max())
                xb, tb, lb = x[idx, :T], targets[idx, :T], lengths[idx]
                mask = np.arange(T)[None, :] < lb[:, None]
                snap = self.store.snapshot()
                try:
                    logits, caches = self._logits(xb, lb)
                    res = cross_entropy_logits(logits, tb, mask)
                    self.store.zero_grad()
                    self._backward(res.grad / max(1, res.count), caches)
                    self.store.step()
                except FloatingPointError:
                    self.store.restore(snap)
                    out.aborted = True
                    log.warning("phase-2 training aborted on non-finite values")
                    return out
                total += res.loss
                count += res.count
            out.epoch_loss.append(total / max(1, count))
            if val is not None:
                vl = self.loss(*val)
                out.val_loss.append(vl)
                if vl < best:
                    best, best_snap, stale = vl, self.store.snapshot(), 0
                    out.best_epoch = epoch
                else:
                    stale += 1
                    if patience is not None and stale >= patience:
                        break
        if best_snap is not None:
            self.store.restore(best_snap)
        return out

    # -- persistence
    def save(self, path, extra: dict | None = None) -> None:
        meta = {"kind": "phase2", "n_locations": self.L, "config": asdict(self.config)}
        meta.update(extra or {})
        save_checkpoint(self.store, path, meta)

    @classmethod
    def load(cls, path) -> "Phase2Model":
        store, meta = load_checkpoint(path)
        model = cls(int(meta["n_locations"]), Phase2Config(**meta["config"]))
        for k in model.store.params:
            model.store.params[k] = store.params[k]
            model.store.grads[k] = np.zeros_like(store.params[k])
            model.store.m[k] = store.m[k]
            model.store.v[k] = store.v[k]
        model.store.t = store.t
        return model


def pad_samples(samples: Sequence[TrainingSample], n_locations: int):
    """Dense ``[B, T, L]`` inputs, ``[B, T]`` targets and lengths."""
    if not samples:
        raise LengthMismatch("no samples to pad")
    lengths = np.array([len(s.truth) for s in samples], dtype=np.int64)
    T = int(lengths.max())
    x = np.zeros((len(samples), T, n_locations))
    targets = np.zeros((len(samples), T), dtype=np.int64)
    for b, s in enumerate(samples):
        x[b, :lengths[b]] = s.dense(n_locations)
        targets[b, :lengths[b]] = s.truth
    return x, targets, lengths


def token_accuracy(model: Phase2Model, samples: Sequence[TrainingSample]) -> float:
    hit = tot = 0
    for s in samples:
        est = model.infer(s.dense(model.L))
        hit += int(np.sum(est == s.truth))
        tot += len(s.truth)
    return hit / tot if tot else 0.0
