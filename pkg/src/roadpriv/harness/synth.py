"""Seeded synthetic road grid and vehicle trajectories."""
from __future__ import annotations

import math

import numpy as np

from ..roadnet import RoadGraph, grid_graph
from ..units import DEFAULT_SAMPLE_INTERVAL_S
from ..vehitrack import Trajectory


def momentum_walk(
    graph: RoadGraph,
    start: int,
    n_reports: int,
    rng: np.random.Generator,
    momentum: float = 0.7,
    gap_s: float = DEFAULT_SAMPLE_INTERVAL_S,
    traj_id: str = "",
) -> Trajectory:
    """Random drive that prefers going straight and never U-turns unless stuck.

    The vehicle reports at the first node it reaches at least ``gap_s``
    seconds after its previous report, so every consecutive pair is
    reachable within the recorded gap.
    """
    cur, prev = int(start), -1
    t = 0.0
    times, nodes = [0.0], [cur]
    last = 0.0
    while len(nodes) < n_reports:
        nxt = _step(graph, cur, prev, rng, momentum)
        if nxt < 0:
            break
        # whole-second clock: stored gaps never undercut the true travel time
        t += math.ceil(_edge_time(graph, cur, nxt) - 1e-9)
        prev, cur = cur, nxt
        if t - last >= gap_s - 1e-9:
            times.append(t)
            nodes.append(cur)
            last = t
    return Trajectory(traj_id, np.asarray(times), np.asarray(nodes))


def _edge_time(g: RoadGraph, u: int, v: int) -> float:
    lo, hi = g.indptr[u], g.indptr[u + 1]
    k = lo + int(np.searchsorted(g.indices[lo:hi], v))
    return float(g.weights[0, k])


def _step(g: RoadGraph, cur: int, prev: int, rng: np.random.Generator, momentum: float) -> int:
    nbrs = [v for v in g.neighbors(cur) if v != cur]
    if not nbrs:
        return -1
    options = [v for v in nbrs if v != prev] or nbrs
    if prev < 0 or len(options) == 1:
        return int(options[int(rng.integers(len(options)))])
    # heading = displacement of the last move; straight = best aligned option
    hx, hy = g.lon[cur] - g.lon[prev], g.lat[cur] - g.lat[prev]
    align = [(g.lon[v] - g.lon[cur]) * hx + (g.lat[v] - g.lat[cur]) * hy for v in options]
    straight = int(np.argmax(align))
    w = np.full(len(options), (1.0 - momentum) / max(1, len(options) - 1))
    w[straight] = momentum if align[straight] > 0 else w[straight]
    if w.sum() <= 0:                 # full momentum with no straight option: turn at random
        w[:] = 1.0
    w /= w.sum()
    return int(options[int(rng.choice(len(options), p=w))])


def synth_scenario(
    grid_w: int,
    grid_h: int,
    cell_km: float = 0.1,
    n_traj: int = 100,
    length: int = 30,
    seed: int = 0,
    speed_kmh: float = 25.0,
    arterial_every: int = 5,
    arterial_kmh: float = 50.0,
    momentum: float = 0.7,
    gap_s: float = DEFAULT_SAMPLE_INTERVAL_S,
) -> tuple[RoadGraph, list]:
    """Grid road network plus ``n_traj`` momentum walks of ``length`` reports."""
    if grid_w < 1 or grid_h < 1:
        raise ValueError("grid dimensions must be at least 1")
    g = grid_graph(grid_h, grid_w, cell_km, speed_kmh=speed_kmh,
                   arterial_every=arterial_every, arterial_kmh=arterial_kmh)
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n_traj):
        start = int(rng.integers(g.n_nodes))
        if g.n_nodes == 1:
            times = np.arange(length) * gap_s
            trajs.append(Trajectory(f"t{i}", times, np.zeros(length, dtype=np.int64)))
            continue
        trajs.append(momentum_walk(g, start, length, rng, momentum, gap_s, f"t{i}"))
    return g, trajs
