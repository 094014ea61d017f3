"""Experiment configuration: one versioned JSON document, strict keys."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from ..errors import ConfigError

CONFIG_VERSION = 1

MECHANISMS = ("laplace", "lp")
ATTACKS = ("bayes", "hmm", "vehitrack-i", "vehitrack")

DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "scenario": {
        "kind": "synthetic",
        "grid_w": 20,
        "grid_h": 20,
        "cell_km": 0.1,
        "speed_kmh": 25.0,
        "arterial_every": 5,
        "arterial_kmh": 50.0,
        "length": 30,
        "momentum": 0.7,
        "gap_s": 20.0,
        "nodes": None,
        "edges": None,
        "trajectories": None,
    },
    "n_eval": 100,
    "n_train": 1000,
    "n_val": 30,
    "samples_per_traj": 4,
    "mechanisms": ["laplace", "lp"],
    "epsilons": [5.0, 7.5, 10.0],
    "gamma": None,
    "lp": {"tile_km": 0.5, "solver": "highs"},
    "utility": {"targets": None},
    "attacks": list(ATTACKS),
    "defense": {"modes": [False, True], "K": [10], "alpha": [1e4]},
    "phase1": {"xi": 1e-4, "s_limit_kmh": 120.0},
    "phase2": {
        "hidden": 32,
        "layers": 5,
        "epochs": 6,
        "patience": 2,
        "batch_size": 16,
        "lr": 0.001,
        "input_scale": "size",
        "forget_bias": 1.0,
        "skip": True,
    },
    "transprotect": {
        "dim": 128,
        "walks_per_node": 10,
        "walk_length": 20,
        "window": 5,
        "negatives": 5,
        "p": 1.0,
        "q": 1.0,
        "n2v_epochs": 1,
        "heads": 4,
        "layers": 2,
        "gcn_layers": 2,
        "epochs": 8,
        "lr": 0.003,
    },
    "master_seed": 0,
    "seeds": [0, 1, 2],
    "workers": 1,
    "output_dir": "results",
}


def _merge(base: dict, over: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{k} must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def make_config(overrides: dict | None = None) -> dict:
    """Defaults merged with ``overrides``; validated."""
    cfg = _merge(DEFAULTS, overrides or {}, "")
    validate(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: config version must be {CONFIG_VERSION}, got {raw.get('version')!r}")
    cfg = make_config(raw)
    base = Path(path).parent
    sc = cfg["scenario"]
    for key in ("nodes", "edges", "trajectories"):
        if sc[key] is not None:
            p = Path(sc[key])
            sc[key] = str(p if p.is_absolute() else base / p)
            if not Path(sc[key]).exists():
                raise ConfigError(f"scenario.{key}: {sc[key]} does not exist")
    return cfg


def validate(cfg: dict) -> None:
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}")
    sc = cfg["scenario"]
    if sc["kind"] not in ("synthetic", "files"):
        raise ConfigError("scenario.kind must be 'synthetic' or 'files'")
    if sc["kind"] == "files" and not (sc["nodes"] and sc["edges"] and sc["trajectories"]):
        raise ConfigError("file scenarios need nodes, edges and trajectories")
    for key in ("mechanisms", "epsilons", "seeds"):
        if not cfg[key]:
            raise ConfigError(f"{key} must be nonempty")
    bad = set(cfg["mechanisms"]) - set(MECHANISMS)
    if bad:
        raise ConfigError(f"unknown mechanisms {sorted(bad)}")
    bad = set(cfg["attacks"]) - set(ATTACKS)
    if bad:
        raise ConfigError(f"unknown attacks {sorted(bad)}")
    if any(not (float(e) > 0) for e in cfg["epsilons"]):
        raise ConfigError("epsilons must be positive")
    d = cfg["defense"]
    if not d["modes"] or any(m not in (False, True) for m in d["modes"]):
        raise ConfigError("defense.modes must be a nonempty list of booleans")
    if True in d["modes"] and (not d["K"] or not d["alpha"]):
        raise ConfigError("defense grids K and alpha must be nonempty")
    if any(int(k) < 1 for k in d["K"]):
        raise ConfigError("defense.K values must be at least 1")
    if len(set(cfg["seeds"])) != len(cfg["seeds"]):
        raise ConfigError("seeds must be distinct")
    for key in ("n_eval", "n_train", "samples_per_traj", "workers"):
        if int(cfg[key]) < 1:
            raise ConfigError(f"{key} must be at least 1")
