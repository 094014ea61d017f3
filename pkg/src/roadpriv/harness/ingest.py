"""Raw GPS fixes to node trajectories, plus the trajectory JSON-lines format."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import EmptyAfterFilter, MalformedRow
from ..roadnet import GeoPoint, RoadGraph, snap_to_node
from ..units import DEFAULT_SAMPLE_INTERVAL_S
from ..vehitrack import Trajectory

SPLIT_FACTOR = 5.0


@dataclass
class IngestReport:
    trajectories: list
    malformed: int = 0
    duplicates: int = 0
    fixes: int = 0
    errors: list = field(default_factory=list)


def parse_timestamp(text: str) -> float:
    """Seconds since the epoch from a number or an ISO 8601 string."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    t = text.replace("T", " ")
    # "+01" style offsets need minutes for fromisoformat
    if len(t) >= 3 and t[-3] in "+-" and t[-2:].isdigit():
        t += ":00"
    try:
        return datetime.fromisoformat(t).timestamp()
    except ValueError:
        raise MalformedRow(f"bad timestamp {text!r}") from None


def _parse_row(row: dict) -> tuple[str, float, GeoPoint]:
    try:
        vid = row["vehicle_id"].strip()
        t = parse_timestamp(row["timestamp"])
        p = GeoPoint(float(row["lat"]), float(row["lon"]))
    except (KeyError, AttributeError, ValueError) as exc:
        raise MalformedRow(str(exc)) from None
    if not vid or not math.isfinite(t):
        raise MalformedRow("empty vehicle id or timestamp")
    return vid, t, p


def ingest_trajectories(path, graph: RoadGraph, target_gap_s: float = DEFAULT_SAMPLE_INTERVAL_S) -> IngestReport:
    """Per vehicle: sort by time, drop repeated timestamps, snap, thin to
    about ``target_gap_s`` and split where the kept gap exceeds five times it."""
    rows: dict[str, list] = {}
    report = IngestReport([])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for k, row in enumerate(reader):
            try:
                vid, t, p = _parse_row(row)
            except MalformedRow as exc:
                report.malformed += 1
                report.errors.append(f"row {k + 2}: {exc}")
                continue
            rows.setdefault(vid, []).append((t, p))
    for vid in sorted(rows):
        fixes = sorted(rows[vid], key=lambda r: r[0])
        kept = []
        for t, p in fixes:
            if kept and t == kept[-1][0]:
                report.duplicates += 1
                continue
            kept.append((t, p))
        report.fixes += len(kept)
        times = np.array([t for t, _ in kept])
        nodes = np.array([snap_to_node(graph, p) for _, p in kept], dtype=np.int64)
        pieces = _resample(times, nodes, target_gap_s)
        for j, (ts, ns) in enumerate(pieces):
            report.trajectories.append(Trajectory(f"{vid}-{j}", ts, ns))
    if not report.trajectories:
        raise EmptyAfterFilter(f"{path}: no usable fixes")
    return report


def _resample(times: np.ndarray, nodes: np.ndarray, gap: float):
    """Keep the first fix at least ``gap`` after the previous kept one."""
    pieces = []
    cur_t, cur_n = [times[0]], [nodes[0]]
    for t, n in zip(times[1:], nodes[1:]):
        dt = t - cur_t[-1]
        if dt > SPLIT_FACTOR * gap:
            pieces.append((cur_t, cur_n))
            cur_t, cur_n = [t], [n]
        elif dt >= gap:
            cur_t.append(t)
            cur_n.append(n)
    pieces.append((cur_t, cur_n))
    return [(np.asarray(ts, dtype=float), np.asarray(ns, dtype=np.int64)) for ts, ns in pieces]


def write_trajectories(trajs: Sequence[Trajectory], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            fh.write(json.dumps(t.to_json(), separators=(",", ":")) + "\n")


def read_trajectories(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_json(json.loads(line)) for line in fh if line.strip()]
