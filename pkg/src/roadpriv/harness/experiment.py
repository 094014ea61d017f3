"""Factorial experiment: mechanism x defense x attack x epsilon x seed.

Shared inputs (graph, trajectories, matrices, trained models) are built
once and never mutated by a cell. Every cell draws its randomness from
``derive_seed(master, cell_key, trajectory)``, so results do not depend on
the order or process in which cells run. Finished cells are persisted one
file each; a rerun skips them and rebuilds the same results CSV.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import multiprocessing
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import bayes_attack, learn_transitions, viterbi
from ..mechanisms import (
    ObfuscationMatrix,
    PrivacyParams,
    UtilityModel,
    laplace_matrix,
    spatial_tiles,
    tiled_lp_matrix,
)
from ..roadnet import ReachabilityIndex, RoadGraph, haversine_km, load_graph
from ..transprotect import Node2VecConfig, ScorerConfig, TransformerScorer, TransProtect, train_node2vec
from ..vehitrack import (
    Phase2Config,
    Phase2Model,
    StaticMechanism,
    derive_seed,
    elimination_ratio,
    generate_training_samples,
    phase1_estimates,
    phase1_posteriors,
    speed_balls,
)
from .ingest import read_trajectories
from .synth import synth_scenario

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "mechanism", "defense", "attack", "epsilon", "K", "alpha", "seed",
    "eie_km", "utility_loss_s", "elimination_ratio", "elimination_ball", "n_traj", "n_slots", "fallback_slots",
)

# stream ids for derive_seed; fixed so adding grid points never shifts others
_TRAIN, _VAL, _EVAL, _SPLIT, _CELL, _PHASE2, _SCORER = range(1, 8)


def key_int(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


@dataclass(frozen=True)
class Cell:
    mechanism: str
    epsilon: float
    defense: bool
    K: int | None
    alpha: float | None
    seed: int

    @property
    def key(self) -> str:
        d = f"tp|{self.K}|{self.alpha!r}" if self.defense else "none"
        return f"{self.mechanism}|{self.epsilon!r}|{d}|{self.seed}"

    @property
    def file_name(self) -> str:
        return hashlib.sha1(self.key.encode("utf-8")).hexdigest()[:16] + ".json"


def expand_cells(cfg: dict) -> list:
    cells = []
    for mech in cfg["mechanisms"]:
        for eps in cfg["epsilons"]:
            for mode in cfg["defense"]["modes"]:
                grid = [(int(k), float(a)) for k in cfg["defense"]["K"] for a in cfg["defense"]["alpha"]] if mode else [(None, None)]
                for K, alpha in grid:
                    for seed in cfg["seeds"]:
                        cells.append(Cell(mech, float(eps), bool(mode), K, alpha, int(seed)))
    return cells


# ---------------------------------------------------------------- inputs

@dataclass
class Scenario:
    graph: RoadGraph
    train: list
    val: list
    evals: dict                 # seed -> trajectories
    utility: UtilityModel
    reach: ReachabilityIndex


def build_scenario(cfg: dict) -> Scenario:
    sc, master = cfg["scenario"], int(cfg["master_seed"])
    if sc["kind"] == "synthetic":
        def synth(n, seed):
            return synth_scenario(
                sc["grid_w"], sc["grid_h"], sc["cell_km"], n, sc["length"], seed,
                sc["speed_kmh"], sc["arterial_every"], sc["arterial_kmh"], sc["momentum"], sc["gap_s"],
            )
        g, train = synth(cfg["n_train"], derive_seed(master, _TRAIN))
        _, val = synth(cfg["n_val"], derive_seed(master, _VAL)) if cfg["n_val"] else (g, [])
        evals = {s: synth(cfg["n_eval"], derive_seed(master, _EVAL, s))[1] for s in cfg["seeds"]}
    else:
        g = load_graph(sc["nodes"], sc["edges"])
        pool = [t for t in read_trajectories(sc["trajectories"]) if len(t) > 0]
        for t in pool:
            t.check_nodes(g)
        order = np.random.default_rng(derive_seed(master, _SPLIT)).permutation(len(pool))
        n_tr, n_va = min(cfg["n_train"], len(pool)), cfg["n_val"]
        train = [pool[i] for i in order[:n_tr]]
        val = [pool[i] for i in order[n_tr:n_tr + n_va]]
        rest = [pool[i] for i in order[n_tr + n_va:]] or train
        evals = {}
        for s in cfg["seeds"]:
            pick = np.random.default_rng(derive_seed(master, _EVAL, s)).permutation(len(rest))[:cfg["n_eval"]]
            evals[s] = [rest[i] for i in sorted(pick)]
    targets = cfg["utility"]["targets"]
    utility = UtilityModel.from_graph(g, targets=targets)
    return Scenario(g, train, val, evals, utility, ReachabilityIndex(g, cfg["phase1"]["s_limit_kmh"]))


def build_matrix(cfg: dict, sc: Scenario, mech: str, eps: float) -> ObfuscationMatrix:
    gamma = math.inf if cfg["gamma"] is None else float(cfg["gamma"])
    params = PrivacyParams(float(eps), gamma)
    support = np.arange(sc.graph.n_nodes)
    if mech == "laplace":
        return laplace_matrix(support, sc.graph, params)
    tiles = spatial_tiles(sc.graph, cfg["lp"]["tile_km"])
    return tiled_lp_matrix(tiles, sc.graph, params, sc.utility, solver=cfg["lp"]["solver"])


def phase2_config(cfg: dict, seed: int) -> Phase2Config:
    p = cfg["phase2"]
    return Phase2Config(
        hidden=p["hidden"], layers=p["layers"], skip=p["skip"], input_scale=p["input_scale"],
        forget_bias=p["forget_bias"], epochs=p["epochs"], batch_size=p["batch_size"], lr=p["lr"], seed=seed,
    )


def train_attacker(cfg: dict, sc: Scenario, Z: ObfuscationMatrix, tag: str):
    """Phase-2 model trained on the attacker's own simulated corpus."""
    master = int(cfg["master_seed"])
    ph1 = cfg["phase1"]
    s = derive_seed(master, _PHASE2, key_int(tag))
    rep = generate_training_samples(
        sc.train, Z, sc.graph, cfg["samples_per_traj"], s,
        xi=ph1["xi"], s_limit=ph1["s_limit_kmh"], reach=sc.reach,
    )
    vrep = generate_training_samples(
        sc.val, Z, sc.graph, 1, derive_seed(s, 1), xi=ph1["xi"], s_limit=ph1["s_limit_kmh"], reach=sc.reach,
    ) if sc.val else None
    model = Phase2Model(sc.graph.n_nodes, phase2_config(cfg, int(derive_seed(s, 2) % 2**32)))
    trainlog = model.train(
        rep.samples, val_samples=vrep.samples if vrep and vrep.samples else None,
        patience=cfg["phase2"]["patience"],
    )
    info = {"samples": len(rep.samples), "dropped": rep.dropped, "epochs": len(trainlog.epoch_loss),
            "best_epoch": trainlog.best_epoch, "val_loss": trainlog.val_loss, "aborted": trainlog.aborted}
    return model, info


def train_scorer(cfg: dict, sc: Scenario) -> TransformerScorer:
    tp = cfg["transprotect"]
    s = int(derive_seed(int(cfg["master_seed"]), _SCORER) % 2**32)
    n2v = train_node2vec(sc.graph, Node2VecConfig(
        dim=tp["dim"], p=tp["p"], q=tp["q"], walks_per_node=tp["walks_per_node"], walk_length=tp["walk_length"],
        window=tp["window"], negatives=tp["negatives"], epochs=tp["n2v_epochs"], seed=s,
    ))
    scorer = TransformerScorer(sc.graph, n2v.table, ScorerConfig(
        heads=tp["heads"], layers=tp["layers"], gcn_layers=tp["gcn_layers"], epochs=tp["epochs"], lr=tp["lr"], seed=s,
    ))
    scorer.train(sc.train)
    return scorer


@dataclass
class Context:
    """Everything a cell reads; built once per run."""

    cfg: dict
    scenario: Scenario
    matrices: dict = field(default_factory=dict)       # (mech, eps) -> Z
    attackers: dict = field(default_factory=dict)      # (mech, eps) -> Phase2Model
    transitions: object = None
    scorer: TransformerScorer | None = None
    defenses: dict = field(default_factory=dict)       # (mech, eps, K, alpha) -> TransProtect
    info: dict = field(default_factory=dict)


# shared with forked workers, set only while a pool is open
_WORKER_CTX: Context | None = None


def _train_job(job: tuple):
    """Train one model named by ``job`` against the shared context."""
    ctx = _WORKER_CTX
    t0 = time.perf_counter()
    if job[0] == "scorer":
        model, info = train_scorer(ctx.cfg, ctx.scenario), {}
    else:
        mech, eps = job[1]
        model, info = train_attacker(ctx.cfg, ctx.scenario, ctx.matrices[(mech, eps)], f"{mech}|{eps!r}")
    return job, model, {**info, "seconds": time.perf_counter() - t0}


def _pool(workers: int) -> ProcessPoolExecutor:
    # workers read the context from a module global, which needs fork
    return ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("fork"))


def prepare(cfg: dict, out_dir: Path, cells: list) -> Context:
    """Build matrices, then train every model not already saved under ``out_dir/models``.

    Each model has its own derived seed, so training them in parallel
    gives the same weights as training them in sequence.
    """
    global _WORKER_CTX
    sc = build_scenario(cfg)
    ctx = Context(cfg, sc)
    models = out_dir / "models"
    models.mkdir(parents=True, exist_ok=True)
    attacks = set(cfg["attacks"])
    jobs = []
    for mech, eps in sorted({(c.mechanism, c.epsilon) for c in cells}, key=lambda k: (cfg["mechanisms"].index(k[0]), k[1])):
        t0 = time.perf_counter()
        Z = build_matrix(cfg, sc, mech, eps)
        ctx.matrices[(mech, eps)] = Z
        ctx.info[f"matrix {mech} {eps!r}"] = {"seconds": time.perf_counter() - t0, "provenance": Z.provenance}
        if "vehitrack" in attacks:
            path = models / f"phase2_{mech}_{eps!r}.json"
            if path.exists():
                ctx.attackers[(mech, eps)] = Phase2Model.load(path)
            else:
                jobs.append(("phase2", (mech, eps)))
    if "hmm" in attacks:
        ctx.transitions = learn_transitions(sc.train, sc.graph)
    if any(c.defense for c in cells):
        path = models / "scorer.json"
        if path.exists():
            ctx.scorer = TransformerScorer.load(path, sc.graph)
        else:
            jobs.append(("scorer", None))

    workers = min(int(cfg["workers"]), len(jobs))
    _WORKER_CTX = ctx
    try:
        if workers > 1:
            with _pool(workers) as pool:
                done = list(pool.map(_train_job, jobs))
        else:
            done = [_train_job(j) for j in jobs]
    finally:
        _WORKER_CTX = None
    for job, model, info in done:
        if job[0] == "scorer":
            model.save(models / "scorer.json")
            ctx.scorer = model
            ctx.info["scorer"] = info
        else:
            mech, eps = job[1]
            tag = f"{mech}|{eps!r}"
            model.save(models / f"phase2_{mech}_{eps!r}.json", {"tag": tag, "train": {k: v for k, v in info.items() if k != "seconds"}})
            ctx.attackers[(mech, eps)] = model
            ctx.info[f"phase2 {tag}"] = info
    return ctx


def defense_for(ctx: Context, cell: Cell) -> TransProtect:
    k = (cell.mechanism, cell.epsilon, cell.K, cell.alpha)
    tp = ctx.defenses.get(k)
    if tp is None:
        Z = ctx.matrices[(cell.mechanism, cell.epsilon)]
        # pin the region's lambda_max so restricted Laplace rows are the
        # unrestricted rows conditioned on the candidate set
        params = PrivacyParams(cell.epsilon, Z.params.gamma, Z.params.lambda_max)
        tp = TransProtect(ctx.scenario.graph, ctx.scorer, ctx.scenario.utility, cell.mechanism, params,
                          K=cell.K, alpha=cell.alpha, solver=ctx.cfg["lp"]["solver"])
        ctx.defenses[k] = tp
    return tp


# ----------------------------------------------------------------- cells

def run_cell(ctx: Context, cell: Cell) -> list:
    cfg, sc = ctx.cfg, ctx.scenario
    g = sc.graph
    master = int(cfg["master_seed"])
    ph1 = cfg["phase1"]
    ck = key_int(cell.key)
    mech = defense_for(ctx, cell) if cell.defense else StaticMechanism(ctx.matrices[(cell.mechanism, cell.epsilon)])
    attacks = list(cfg["attacks"])
    errors = {a: [] for a in attacks}
    ul, elim, elim_ball, slots, fallbacks = [], [], [], 0, 0
    trajs = sc.evals[cell.seed]
    for i, traj in enumerate(trajs):
        rng = np.random.default_rng(derive_seed(master, _CELL, ck, i))
        obs = mech.observe(traj, rng)
        ul.extend(float(Z.row(x) @ sc.utility.delta_row(int(x))[Z.support]) for x, Z in zip(traj.nodes, obs.matrices))
        slots += len(traj)
        if not attacks:
            continue
        posts = phase1_posteriors(obs, g, None, ph1["xi"], ph1["s_limit_kmh"], sc.reach)
        fallbacks += sum(f is not None for f in posts.fallbacks())
        elim.append(elimination_ratio(posts, [Z.support for Z in obs.matrices]))
        elim_ball.append(elimination_ratio(posts, speed_balls(obs, sc.reach)))
        for a in attacks:
            if a == "bayes":
                est = [bayes_attack(Z, int(y)).location for y, Z in zip(obs.reports, obs.matrices)]
            elif a == "hmm":
                est = viterbi(ctx.transitions, obs.reports, obs.matrices).path
            elif a == "vehitrack-i":
                est = phase1_estimates(posts)
            else:
                est = ctx.attackers[(cell.mechanism, cell.epsilon)].infer_posteriors(posts)
            est = np.asarray(est, dtype=np.int64)
            errors[a].extend(haversine_km(g.lat[est], g.lon[est], g.lat[traj.nodes], g.lon[traj.nodes]).tolist())
    base = {
        "mechanism": cell.mechanism,
        "defense": "transprotect" if cell.defense else "none",
        "epsilon": cell.epsilon,
        "K": cell.K if cell.defense else "",
        "alpha": cell.alpha if cell.defense else "",
        "seed": cell.seed,
        "utility_loss_s": float(np.mean(ul)) if ul else 0.0,
        "n_traj": len(trajs),
        "n_slots": slots,
    }
    if not attacks:
        return [{**base, "attack": "", "eie_km": "", "elimination_ratio": "", "elimination_ball": "",
                 "fallback_slots": ""}]
    er = float(np.mean(elim)) if elim else 0.0
    eb = float(np.mean(elim_ball)) if elim_ball else 0.0
    return [{**base, "attack": a, "eie_km": float(np.mean(errors[a])) if errors[a] else 0.0,
             "elimination_ratio": er, "elimination_ball": eb, "fallback_slots": fallbacks} for a in attacks]



def _worker(cell: Cell):
    return _timed_cell(_WORKER_CTX, cell)


def _timed_cell(ctx: Context, cell: Cell):
    t0 = time.perf_counter()
    try:
        rows = run_cell(ctx, cell)
        return cell, rows, None, time.perf_counter() - t0
    except Exception as exc:  # recorded per cell; the run goes on
        log.exception("cell %s failed", cell.key)
        return cell, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0


# -------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(rows: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])


def read_results(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunResult:
    rows: list
    failures: list
    results_path: Path
    summary_path: Path


def run_experiment(cfg: dict, out_dir=None) -> RunResult:
    """Run every missing cell, then rebuild ``results.csv`` and ``summary.json``."""
    out = Path(out_dir or cfg["output_dir"])
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    cells = expand_cells(cfg)
    todo = [c for c in cells if not (cells_dir / c.file_name).exists()]
    t_start = time.perf_counter()
    ctx = prepare(cfg, out, todo) if todo else None
    failures, timings = [], {}

    def persist(cell, rows, err, secs):
        timings[cell.key] = secs
        if err is not None:
            failures.append({"cell": cell.key, "error": err})
            return
        tmp = cells_dir / (cell.file_name + ".tmp")
        tmp.write_text(json.dumps({"cell": cell.key, "rows": rows}), encoding="utf-8")
        tmp.replace(cells_dir / cell.file_name)

    workers = int(cfg["workers"])
    if todo and workers > 1:
        global _WORKER_CTX
        _WORKER_CTX = ctx
        with _pool(workers) as pool:
            for res in pool.map(_worker, todo):
                persist(*res)
        _WORKER_CTX = None
    else:
        for cell in todo:
            persist(*_timed_cell(ctx, cell))

    rows = []
    for c in cells:
        p = cells_dir / c.file_name
        if p.exists():
            rows.extend(json.loads(p.read_text(encoding="utf-8"))["rows"])
    results_path = out / "results.csv"
    write_results(rows, results_path)
    summary = {
        "config_sha1": hashlib.sha1(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        "cells": len(cells),
        "completed": len(cells) - len(failures),
        "ran_now": len(todo),
        "failures": failures,
        "cell_seconds": timings,
        "total_seconds": time.perf_counter() - t_start,
        "prepare": ctx.info if ctx else {},
        "config": cfg,
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, default=_json_default), encoding="utf-8")
    return RunResult(rows, failures, results_path, summary_path)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
