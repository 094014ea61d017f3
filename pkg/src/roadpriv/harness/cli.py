"""Command-line entry point: ``roadpriv <command> ...``.

Node ids in trajectory, matrix and model files are the dense ids of the
graph files they were built with; ``build-graph`` writes such a graph.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..baselines import bayes_attack, learn_transitions, viterbi
from ..errors import RoadPrivError
from ..mechanisms import (
    PrivacyParams,
    UtilityModel,
    geo_ind_audit,
    laplace_matrix,
    lp_matrix,
    read_matrix,
    spatial_tiles,
    tiled_lp_matrix,
    write_audit,
    write_matrix,
)
from ..roadnet import GeoPoint, crop_graph, load_graph, write_graph
from ..transprotect import (
    Node2VecConfig,
    ScorerConfig,
    TransformerScorer,
    TransProtect,
    train_node2vec,
    write_candidate_log,
)
from ..vehitrack import (
    Phase2Config,
    Phase2Model,
    StaticMechanism,
    derive_seed,
    generate_training_samples,
    inference_result,
    phase1_estimates,
    phase1_posteriors,
    write_dataset,
)
from .config import ATTACKS, load_config
from .experiment import run_experiment
from .ingest import ingest_trajectories, read_trajectories, write_trajectories
from .report import report
from .synth import synth_scenario


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, default=str))


def _graph(args):
    return load_graph(args.nodes, args.edges)


def _gamma(x):
    return math.inf if x is None else x


# --------------------------------------------------------------- commands

def cmd_build_graph(args) -> int:
    g = _graph(args)
    remap = None
    if args.radius_km is not None:
        if args.center_lat is None or args.center_lon is None:
            raise SystemExit("--radius-km needs --center-lat and --center-lon")
        g, remap = crop_graph(g, GeoPoint(args.center_lat, args.center_lon), args.radius_km)
    ext = g.external_ids
    dense = replace(g, external_ids=None)
    out = Path(args.out_dir)
    write_graph(dense, out / "nodes.csv", out / "edges.csv")
    with open(out / "id_map.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "node_id"])
        for k in range(g.n_nodes):
            w.writerow([int(ext[k]) if ext is not None else k, k])
    _emit({"nodes": g.n_nodes, "edges": int(len(g.indices)), "cropped": remap is not None, "out_dir": str(out)})
    return 0


def cmd_synth(args) -> int:
    g, trajs = synth_scenario(args.grid_w, args.grid_h, args.cell_km, args.n_traj, args.length, args.seed)
    out = Path(args.out_dir)
    write_graph(g, out / "nodes.csv", out / "edges.csv")
    write_trajectories(trajs, out / "trajectories.jsonl")
    _emit({"nodes": g.n_nodes, "edges": int(len(g.indices)), "trajectories": len(trajs), "out_dir": str(out)})
    return 0


def cmd_ingest(args) -> int:
    rep = ingest_trajectories(args.csv, _graph(args), args.target_gap)
    write_trajectories(rep.trajectories, args.out)
    _emit({"trajectories": len(rep.trajectories), "fixes": rep.fixes, "malformed": rep.malformed,
           "duplicates": rep.duplicates, "errors": rep.errors[:20]})
    return 0


def cmd_mechanism(args) -> int:
    g = _graph(args)
    params = PrivacyParams(args.epsilon, _gamma(args.gamma), args.lambda_max)
    support = np.arange(g.n_nodes) if args.support is None else np.array(
        sorted({int(s) for s in args.support.split(",")}), dtype=np.int64)
    if args.kind == "laplace":
        Z = laplace_matrix(support, g, params)
    else:
        U = UtilityModel.from_graph(g)
        if args.kind == "lp":
            Z = lp_matrix(support, g, params, U, solver=args.solver)
        else:
            Z = tiled_lp_matrix(spatial_tiles(g, args.tile_km, support), g, params, U, solver=args.solver)
    write_matrix(Z, args.out)
    _emit({"provenance": Z.provenance, "size": Z.size, "objective": Z.objective, "out": args.out})
    return 0


def cmd_audit(args) -> int:
    g = _graph(args)
    Z = read_matrix(args.matrix)
    eps = Z.params.epsilon if args.epsilon is None else args.epsilon
    gamma = Z.params.gamma if args.gamma is None else args.gamma
    rep = geo_ind_audit(Z, g, eps, gamma, args.tol)
    if args.out:
        write_audit(rep, args.out)
    doc = rep.to_json()
    doc.pop("violations")
    _emit(doc)
    return 0 if not rep.violations else 1


def cmd_attack(args) -> int:
    g = _graph(args)
    Z = read_matrix(args.matrix)
    trajs = read_trajectories(args.trajectories)
    attacks = args.attacks.split(",")
    bad = set(attacks) - set(ATTACKS)
    if bad:
        raise SystemExit(f"unknown attacks {sorted(bad)}")
    if "hmm" in attacks and args.train_trajectories is None:
        raise SystemExit("hmm needs --train-trajectories")
    if "vehitrack" in attacks and args.model is None:
        raise SystemExit("vehitrack needs --model")
    T = learn_transitions(read_trajectories(args.train_trajectories), g) if "hmm" in attacks else None
    model = Phase2Model.load(args.model) if "vehitrack" in attacks else None
    mech = StaticMechanism(Z)
    errs = {a: [] for a in attacks}
    lines = []
    for i, t in enumerate(trajs):
        obs = mech.observe(t, np.random.default_rng(derive_seed(args.seed, i)))
        post = phase1_posteriors(obs, g)
        rec = {"traj": t.id, "truth": t.nodes.tolist(), "obfuscated": obs.reports.tolist()}
        for a in attacks:
            if a == "bayes":
                est = [bayes_attack(Z, int(y)).location for y in obs.reports]
            elif a == "hmm":
                est = viterbi(T, obs.reports, obs.matrices).path
            elif a == "vehitrack-i":
                est = phase1_estimates(post)
            else:
                est = model.infer_posteriors(post)
            res = inference_result(est, t.nodes, g)
            errs[a].extend(res.errors_km.tolist())
            rec[a] = res.estimates.tolist()
        lines.append(rec)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for rec in lines:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    _emit({"eie_km": {a: float(np.mean(v)) if v else 0.0 for a, v in errs.items()}, "trajectories": len(trajs)})
    return 0


def cmd_defend_train(args) -> int:
    g = _graph(args)
    trajs = read_trajectories(args.trajectories)
    n2v = train_node2vec(g, Node2VecConfig(epochs=args.n2v_epochs, seed=args.seed))
    scorer = TransformerScorer(g, n2v.table, ScorerConfig(epochs=args.epochs, lr=args.lr, seed=args.seed))
    losses = scorer.train(trajs)
    scorer.save(args.out)
    _emit({"epochs": len(losses), "final_loss": losses[-1] if losses else None, "out": args.out})
    return 0


def cmd_defend_apply(args) -> int:
    g = _graph(args)
    scorer = TransformerScorer.load(args.scorer, g)
    U = UtilityModel.from_graph(g)
    lam = args.lambda_max
    if args.kind == "laplace" and lam is None:
        lam = laplace_matrix(np.arange(g.n_nodes), g, PrivacyParams(args.epsilon)).params.lambda_max
    tp = TransProtect(g, scorer, U, args.kind, PrivacyParams(args.epsilon, _gamma(args.gamma), lam),
                      K=args.K, alpha=args.alpha, solver=args.solver)
    trajs = read_trajectories(args.trajectories)
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, t in enumerate(trajs):
            obs = tp.observe(t, np.random.default_rng(derive_seed(args.seed, i)))
            fh.write(json.dumps({"traj": t.id, "times": t.times.tolist(), "obfuscated": obs.reports.tolist()},
                                separators=(",", ":")) + "\n")
    if args.log:
        write_candidate_log(tp.log, args.log)
    _emit({"trajectories": len(trajs), "candidate_sets": len(tp.log), "out": args.out})
    return 0


def cmd_train_phase2(args) -> int:
    g = _graph(args)
    Z = read_matrix(args.matrix)
    trajs = read_trajectories(args.trajectories)
    rep = generate_training_samples(trajs, Z, g, args.samples_per_traj, args.seed)
    if args.dataset:
        write_dataset(rep.samples, args.dataset)
    val = None
    if args.val_trajectories:
        val = generate_training_samples(read_trajectories(args.val_trajectories), Z, g, 1,
                                        derive_seed(args.seed, 1)).samples
    model = Phase2Model(g.n_nodes, Phase2Config(hidden=args.hidden, layers=args.layers, epochs=args.epochs,
                                                lr=args.lr, seed=args.seed))
    tl = model.train(rep.samples, val_samples=val, patience=args.patience)
    model.save(args.out, {"samples": len(rep.samples), "dropped": rep.dropped})
    _emit({"samples": len(rep.samples), "dropped": rep.dropped, "epochs": len(tl.epoch_loss),
           "best_epoch": tl.best_epoch, "final_loss": tl.epoch_loss[-1] if tl.epoch_loss else None,
           "aborted": tl.aborted, "out": args.out})
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    res = run_experiment(cfg, args.out_dir)
    _emit({"rows": len(res.rows), "failures": res.failures, "results": str(res.results_path),
           "summary": str(res.summary_path)})
    return 0 if not res.failures else 1


def cmd_report(args) -> int:
    agg, txt = report(args.results, args.out_dir)
    print(txt.read_text(encoding="utf-8"), end="")
    return 0


# ----------------------------------------------------------------- parser

def _graph_args(p) -> None:
    p.add_argument("--nodes", required=True, help="nodes CSV: node_id,lat,lon")
    p.add_argument("--edges", required=True, help="edges CSV: from,to,weight_seconds[,bucket]")


def _privacy_args(p) -> None:
    p.add_argument("--epsilon", type=float, required=True, help="privacy budget in 1/km")
    p.add_argument("--gamma", type=float, default=None, help="neighbor radius in km (default: unbounded)")
    p.add_argument("--lambda-max", type=float, default=None, help="Laplace scale in km (default: support diameter)")
    p.add_argument("--solver", default="highs", choices=("highs", "simplex"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roadpriv", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="validate, optionally crop, and write a dense-id graph")
    _graph_args(p)
    p.add_argument("--center-lat", type=float)
    p.add_argument("--center-lon", type=float)
    p.add_argument("--radius-km", type=float)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("synth", help="synthetic grid network and trajectories")
    p.add_argument("--grid-w", type=int, default=20)
    p.add_argument("--grid-h", type=int, default=20)
    p.add_argument("--cell-km", type=float, default=0.1)
    p.add_argument("--n-traj", type=int, default=100)
    p.add_argument("--length", type=int, default=30)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="raw GPS CSV to node trajectories")
    _graph_args(p)
    p.add_argument("--csv", required=True, help="vehicle_id,timestamp,lat,lon")
    p.add_argument("--target-gap", type=float, default=20.0, help="seconds between kept fixes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("mechanism", help="synthesize an obfuscation matrix")
    _graph_args(p)
    p.add_argument("--kind", choices=("laplace", "lp", "lp-tiled"), required=True)
    _privacy_args(p)
    p.add_argument("--support", help="comma-separated node ids (default: all)")
    p.add_argument("--tile-km", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mechanism)

    p = sub.add_parser("audit", help="Geo-Ind audit of a matrix")
    _graph_args(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--epsilon", type=float, help="default: from the matrix sidecar")
    p.add_argument("--gamma", type=float)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("attack", help="obfuscate trajectories and run inference attacks")
    _graph_args(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--attacks", default="bayes,vehitrack-i")
    p.add_argument("--train-trajectories", help="corpus for HMM transitions")
    p.add_argument("--model", help="Phase-2 checkpoint")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="train or apply the candidate-set defense")
    dsub = p.add_subparsers(dest="action", required=True)
    q = dsub.add_parser("train")
    _graph_args(q)
    q.add_argument("--trajectories", required=True)
    q.add_argument("--epochs", type=int, default=30)
    q.add_argument("--n2v-epochs", type=int, default=1)
    q.add_argument("--lr", type=float, default=3e-3)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_defend_train)
    q = dsub.add_parser("apply")
    _graph_args(q)
    q.add_argument("--scorer", required=True)
    q.add_argument("--kind", choices=("laplace", "lp"), required=True)
    _privacy_args(q)
    q.add_argument("--K", type=int, default=10)
    q.add_argument("--alpha", type=float, default=1e4)
    q.add_argument("--trajectories", required=True)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--log", help="candidate-set JSON-lines log")
    q.set_defaults(func=cmd_defend_apply)

    p = sub.add_parser("train-phase2", help="simulate samples and train the BiLSTM attacker")
    _graph_args(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--val-trajectories")
    p.add_argument("--samples-per-traj", type=int, default=20)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dataset", help="also write the samples as JSON lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_phase2)

    p = sub.add_parser("run", help="full factorial experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", help="overrides output_dir in the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate a results CSV over seeds")
    p.add_argument("--results", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except RoadPrivError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
