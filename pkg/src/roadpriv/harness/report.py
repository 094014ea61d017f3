"""Aggregate results over seeds and express defense effects as percentages."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import EmptyCorpus

GROUP_KEYS = ("mechanism", "defense", "attack", "epsilon", "K", "alpha")
METRICS = ("eie_km", "utility_loss_s", "elimination_ratio", "elimination_ball")


@dataclass
class Aggregate:
    key: tuple
    n: int
    mean: dict
    std: dict
    delta: dict            # metric -> "+a%" versus the undefended row, or ""


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


def pct_delta(value: float, base: float) -> str:
    """Relative change formatted like ``+50.0%``."""
    if base == 0 or not math.isfinite(base):
        return ""
    return f"{(value - base) / base * 100.0:+.1f}%"


def _num(x):
    return None if x in ("", None) else float(x)


def aggregate(rows: list) -> list:
    if not rows:
        raise EmptyCorpus("nothing to report")
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(str(r[k]) for k in GROUP_KEYS), []).append(r)
    out = []
    for key, rs in groups.items():
        mean, std = {}, {}
        for m in METRICS:
            vals = [_num(r.get(m)) for r in rs if _num(r.get(m)) is not None]
            if vals:
                mean[m], std[m] = mean_std(vals)
        out.append(Aggregate(key, len(rs), mean, std, {}))
    base = {(a.key[0], a.key[2], a.key[3]): a for a in out if a.key[1] == "none"}
    for a in out:
        b = base.get((a.key[0], a.key[2], a.key[3]))
        for m in METRICS:
            a.delta[m] = pct_delta(a.mean[m], b.mean[m]) if b is not None and a is not b and m in a.mean and m in b.mean else ""
    return out


def _f(x, digits=4) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def write_aggregate_csv(aggs: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = list(GROUP_KEYS) + ["n_seeds"]
        for m in METRICS:
            head += [f"{m}_mean", f"{m}_std", f"{m}_delta"]
        w.writerow(head)
        for a in aggs:
            row = list(a.key) + [a.n]
            for m in METRICS:
                row += [repr(a.mean[m]) if m in a.mean else "", repr(a.std[m]) if m in a.std else "", a.delta[m]]
            w.writerow(row)


def summary_text(aggs: list) -> str:
    lines = ["| mechanism | defense | attack | eps | K | alpha | EIE km | utility loss s | elimination | ball elimination |",
             "|---|---|---|---|---|---|---|---|---|---|"]
    for a in aggs:
        cells = []
        for m in METRICS:
            if m not in a.mean:
                cells.append("")
                continue
            d = f" ({a.delta[m]})" if a.delta[m] else ""
            cells.append(f"{_f(a.mean[m])} ± {_f(a.std[m])}{d}")
        lines.append("| " + " | ".join(list(a.key) + cells) + " |")
    return "\n".join(lines) + "\n"


def report(results_csv, out_dir) -> tuple[Path, Path]:
    """Write ``aggregate.csv`` and ``summary.md`` next to each other."""
    with open(results_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    aggs = aggregate(rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agg_path, txt_path = out / "aggregate.csv", out / "summary.md"
    write_aggregate_csv(aggs, agg_path)
    txt_path.write_text(summary_text(aggs), encoding="utf-8")
    return agg_path, txt_path
