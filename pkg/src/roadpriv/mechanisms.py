"""Geo-obfuscation mechanisms, Geo-Ind auditing and travel-cost utility loss."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import (
    DimensionMismatch,
    EmptySupport,
    FormatError,
    InfiniteCost,
    InvalidEpsilon,
    NotStochastic,
    SupportTooLarge,
    UnknownRow,
)
from .lp import LPSolver, get_solver
from .roadnet import RoadGraph, haversine_km
from .units import EARTH_RADIUS_KM

STOCHASTIC_TOL = 1e-9
DEFAULT_LP_CAP = 60
MATRIX_FORMAT_VERSION = 1
DELTA_BLOCK = 1 << 21          # elements per block in delta_cost_matrix


@dataclass(frozen=True)
class PrivacyParams:
    """``epsilon`` in 1/km, ``gamma`` and ``lambda_max`` in km."""

    epsilon: float
    gamma: float = math.inf
    lambda_max: float | None = None

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise InvalidEpsilon(f"epsilon must be positive and finite, got {self.epsilon}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.lambda_max is not None and not self.lambda_max > 0:
            raise ValueError(f"lambda_max must be positive, got {self.lambda_max}")

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "gamma": None if math.isinf(self.gamma) else self.gamma,
            "lambda_max": self.lambda_max,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PrivacyParams":
        gamma = d.get("gamma")
        return cls(float(d["epsilon"]), math.inf if gamma is None else float(gamma), d.get("lambda_max"))


@dataclass(frozen=True, eq=False)
class ObfuscationMatrix:
    """Row-stochastic matrix over ``support`` (rows real, columns reported)."""

    support: np.ndarray
    probs: np.ndarray
    params: PrivacyParams
    provenance: str
    objective: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        L = len(self.support)
        if self.probs.shape != (L, L):
            raise DimensionMismatch(f"probs shape {self.probs.shape} vs support size {L}")
        if np.any(self.probs < 0) or np.any(self.probs > 1 + STOCHASTIC_TOL):
            raise NotStochastic("entries must lie in [0, 1]")
        if L and np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > STOCHASTIC_TOL:
            raise NotStochastic("rows must sum to 1")

    @property
    def size(self) -> int:
        return len(self.support)

    def index_of(self, loc: int) -> int:
        hits = np.flatnonzero(self.support == loc)
        if len(hits) == 0:
            raise UnknownRow(loc)
        return int(hits[0])

    def row(self, loc: int) -> np.ndarray:
        return self.probs[self.index_of(loc)]

    @cached_property
    def _pos(self) -> np.ndarray:
        size = int(self.support.max()) + 1 if self.size else 0
        pos = np.full(size, -1, dtype=np.int64)
        pos[self.support] = np.arange(self.size)
        return pos

    def positions(self, locs) -> np.ndarray:
        """Row/column index of each location id, ``-1`` when outside the support."""
        locs = np.asarray(locs, dtype=np.int64)
        pos = self._pos
        out = np.full(locs.shape, -1, dtype=np.int64)
        ok = (locs >= 0) & (locs < len(pos))
        out[ok] = pos[locs[ok]]
        return out

    def likelihood(self, y: int, locs) -> np.ndarray:
        """``z[x, y]`` for each real location ``x`` in ``locs``; zero off-support."""
        locs = np.asarray(locs, dtype=np.int64)
        col = self.positions([y])[0]
        out = np.zeros(locs.shape)
        if col < 0:
            return out
        rows = self.positions(locs)
        ok = rows >= 0
        out[ok] = self.probs[rows[ok], col]
        return out


@dataclass(frozen=True, eq=False)
class UtilityModel:
    """Target distribution ``q`` and travel costs ``cost[x, l]`` in seconds.

    ``cost`` has one row per graph location and one column per entry of
    ``targets``.
    """

    targets: np.ndarray
    q: np.ndarray
    cost: np.ndarray
    _rows: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.q.shape != (len(self.targets),) or self.cost.shape[1] != len(self.targets):
            raise DimensionMismatch("q, targets and cost columns must align")
        if np.any(self.q < 0) or abs(self.q.sum() - 1.0) > STOCHASTIC_TOL:
            raise NotStochastic("q must be a probability vector")

    def delta_row(self, x: int) -> np.ndarray:
        """``dc(x, v)`` for every graph location ``v``, computed once per ``x``."""
        row = self._rows.get(x)
        if row is None:
            row = self._rows[x] = delta_cost_matrix(self, [x], np.arange(self.cost.shape[0]))[0]
        return row

    @classmethod
    def from_graph(cls, g: RoadGraph, q: np.ndarray | None = None, bucket=0, targets=None) -> "UtilityModel":
        from .roadnet import travel_cost_matrix

        targets = np.arange(g.n_nodes) if targets is None else np.asarray(targets, dtype=np.int64)
        q = np.full(len(targets), 1.0 / len(targets)) if q is None else np.asarray(q, dtype=float)
        # column l of cost holds c_{x,l}: travel time from every x to target l
        rows = travel_cost_matrix(g, bucket)
        return cls(targets, q, np.ascontiguousarray(rows[:, targets]))


@dataclass
class GeoIndAuditReport:
    checked_triples: int
    violations: list
    violation_ratio: float
    epsilon: float
    gamma: float
    tol: float
    max_slack: float

    def to_json(self) -> dict:
        return {
            "checked_triples": self.checked_triples,
            "n_violations": len(self.violations),
            "violation_ratio": self.violation_ratio,
            "max_slack": self.max_slack,
            "epsilon": self.epsilon,
            "gamma": None if math.isinf(self.gamma) else self.gamma,
            "tol": self.tol,
            "violations": [list(v) for v in self.violations],
        }


# ------------------------------------------------------------ geometry

def support_distances(geometry, support: Sequence[int]) -> np.ndarray:
    """Pairwise km distances over ``support``.

    ``geometry`` is a RoadGraph, or an already computed square matrix whose
    rows follow ``support``.
    """
    support = np.asarray(support, dtype=np.int64)
    if isinstance(geometry, RoadGraph):
        lat, lon = geometry.lat[support], geometry.lon[support]
        d = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
        np.fill_diagonal(d, 0.0)
        return d
    d = np.asarray(geometry, dtype=float)
    if d.shape != (len(support), len(support)):
        raise DimensionMismatch(f"distance matrix {d.shape} vs support size {len(support)}")
    return d


def resolve_lambda_max(params: PrivacyParams, dist: np.ndarray) -> float:
    diam = float(dist.max()) if dist.size else 0.0
    if params.lambda_max is None:
        return diam if diam > 0 else 1.0
    if params.lambda_max < diam - 1e-12:
        raise ValueError(f"lambda_max {params.lambda_max} below support diameter {diam}")
    return params.lambda_max


# ------------------------------------------------------------ mechanisms

def laplace_kernel(dist: np.ndarray, epsilon: float, lambda_max: float) -> np.ndarray:
    """Unnormalized weights ``exp(-epsilon * d_ik / lambda_max)``; the diagonal is 1."""
    return np.exp(-epsilon * np.asarray(dist, dtype=float) / lambda_max)


def laplace_matrix(support, geometry, params: PrivacyParams) -> ObfuscationMatrix:
    """Rows ``z_ik`` proportional to ``exp(-epsilon * d_ik / lambda_max)``."""
    support = np.asarray(support, dtype=np.int64)
    if len(support) == 0:
        raise EmptySupport("laplace_matrix needs at least one location")
    d = support_distances(geometry, support)
    lam = resolve_lambda_max(params, d)
    z = laplace_kernel(d, params.epsilon, lam)
    z /= z.sum(axis=1, keepdims=True)
    p = PrivacyParams(params.epsilon, params.gamma, lam)
    return ObfuscationMatrix(support, z, p, "laplace")


def geo_ind_constraints(dist: np.ndarray, epsilon: float, gamma: float):
    """Ordered pairs ``(i, j)`` with ``i != j`` and ``d_ij <= gamma``, plus
    their multipliers ``exp(epsilon * d_ij)``."""
    L = dist.shape[0]
    I, J = np.nonzero((dist <= gamma) & ~np.eye(L, dtype=bool))
    return I, J, np.exp(epsilon * dist[I, J])


def lp_matrix(
    support,
    geometry,
    params: PrivacyParams,
    utility: UtilityModel,
    prior: np.ndarray | None = None,
    solver: str | LPSolver = "highs",
    cap: int = DEFAULT_LP_CAP,
    tol: float = 1e-9,
) -> ObfuscationMatrix:
    """Utility-optimal matrix under the Geo-Ind constraints.

    Minimizes ``sum_i p_i sum_k z_ik dc_ik`` over row-stochastic nonnegative
    ``Z`` with ``z_ik <= exp(eps d_ij) z_jk`` for every ordered pair within
    ``gamma``. The solver output is clipped, renormalized, and if needed
    blended with the uniform matrix (which satisfies every constraint
    strictly) until the audit passes at ``tol``.
    """
    support = np.asarray(support, dtype=np.int64)
    L = len(support)
    if L == 0:
        raise EmptySupport("lp_matrix needs at least one location")
    if L > cap:
        raise SupportTooLarge(f"support of {L} exceeds LP cap {cap}")
    d = support_distances(geometry, support)
    lam = resolve_lambda_max(params, d)
    dc = delta_cost_matrix(utility, support, support)
    p = _prior(prior, L)
    c = (p[:, None] * dc).ravel()

    I, J, mult = geo_ind_constraints(d, params.epsilon, params.gamma)
    P = len(I)
    k = np.arange(L)
    rows = np.repeat(np.arange(P * L), 2)
    cols = np.empty(2 * P * L, dtype=np.int64)
    vals = np.empty(2 * P * L)
    cols[0::2] = (I[:, None] * L + k[None, :]).ravel()
    cols[1::2] = (J[:, None] * L + k[None, :]).ravel()
    vals[0::2] = 1.0
    vals[1::2] = -np.repeat(mult, L)
    A_ub = sparse.csr_matrix((vals, (rows, cols)), shape=(P * L, L * L)) if P else None
    b_ub = np.zeros(P * L) if P else None
    A_eq = sparse.kron(sparse.eye(L), np.ones((1, L)), format="csr")
    b_eq = np.ones(L)

    res = get_solver(solver).solve(c, A_ub, b_ub, A_eq, b_eq)
    z = np.clip(res.x.reshape(L, L), 0.0, None)
    z /= z.sum(axis=1, keepdims=True)
    z, blend = _repair(z, I, J, mult, tol)
    out = ObfuscationMatrix(
        support, z, PrivacyParams(params.epsilon, params.gamma, lam), "lp",
        objective=float(np.sum(p[:, None] * z * dc)),
        meta={"solver": res.solver, "iterations": res.iterations, "uniform_blend": blend},
    )
    return out


def spatial_tiles(g: RoadGraph, tile_km: float, support=None) -> list:
    """Partition ``support`` (default: all nodes) into square lat/lon cells.

    Cells are ``tile_km`` wide and anchored at the south-west corner of the
    support; each tile is returned as a sorted id array, ordered by cell.
    """
    support = np.arange(g.n_nodes) if support is None else np.asarray(support, dtype=np.int64)
    if not tile_km > 0:
        raise ValueError("tile_km must be positive")
    lat, lon = g.lat[support], g.lon[support]
    lat0, lon0 = lat.min(), lon.min()
    km_lat = EARTH_RADIUS_KM * math.pi / 180.0
    km_lon = km_lat * math.cos(math.radians(lat0))
    # slack keeps nodes sitting on a cell edge in the upper cell despite round-off
    r = np.floor((lat - lat0) * km_lat / tile_km + 1e-6).astype(np.int64)
    c = np.floor((lon - lon0) * km_lon / tile_km + 1e-6).astype(np.int64)
    keys = r * (int(c.max()) + 1) + c
    return [np.sort(support[keys == k]) for k in np.unique(keys)]


def tiled_lp_matrix(
    tiles: Sequence,
    geometry: RoadGraph,
    params: PrivacyParams,
    utility: UtilityModel,
    solver: str | LPSolver = "highs",
    cap: int = DEFAULT_LP_CAP,
    tol: float = 1e-9,
) -> ObfuscationMatrix:
    """Block-diagonal matrix with one LP solution per tile.

    Each block satisfies the Geo-Ind constraints among its own locations;
    pairs split across tiles are not constrained (a report reveals its tile).
    """
    support = np.sort(np.concatenate([np.asarray(t, dtype=np.int64) for t in tiles]))
    if len(np.unique(support)) != len(support):
        raise ValueError("tiles overlap")
    pos = {int(s): a for a, s in enumerate(support.tolist())}
    z = np.zeros((len(support), len(support)))
    objective = 0.0
    blends = []
    for t in tiles:
        Zt = lp_matrix(t, geometry, params, utility, solver=solver, cap=cap, tol=tol)
        idx = np.array([pos[int(v)] for v in Zt.support])
        z[np.ix_(idx, idx)] = Zt.probs
        objective += Zt.objective * len(t) / len(support)
        blends.append(Zt.meta["uniform_blend"])
    return ObfuscationMatrix(
        support, z, PrivacyParams(params.epsilon, params.gamma), "lp-tiled",
        objective=objective,
        meta={"tiles": [np.asarray(t).tolist() for t in tiles], "max_uniform_blend": max(blends)},
    )


def _repair(z, I, J, mult, tol):
    """Blend toward uniform so every Geo-Ind slack is at most ``tol / 10``."""
    if len(I) == 0:
        return z, 0.0
    L = z.shape[0]
    slack = z[I] - mult[:, None] * z[J]
    worst = slack.max()
    if worst <= tol / 10:
        return z, 0.0
    # uniform slack for pair (i, j) is (1 - mult) / L < 0
    margin = (mult[:, None] - 1.0) / L
    t_needed = (slack - tol / 10) / (slack - tol / 10 + margin)
    t = float(min(1.0, t_needed[slack > tol / 10].max() * (1 + 1e-6)))
    return (1.0 - t) * z + t / L, t


def uniform_matrix(support, params: PrivacyParams) -> ObfuscationMatrix:
    support = np.asarray(support, dtype=np.int64)
    L = len(support)
    if L == 0:
        raise EmptySupport("uniform matrix needs at least one location")
    return ObfuscationMatrix(support, np.full((L, L), 1.0 / L), params, "uniform")


# --------------------------------------------------------------- audit

def geo_ind_audit(Z: ObfuscationMatrix, geometry, epsilon: float, gamma: float, tol: float = 1e-9) -> GeoIndAuditReport:
    """Check every ordered neighbor pair and column against the Geo-Ind bound."""
    d = support_distances(geometry, Z.support)
    I, J, mult = geo_ind_constraints(d, epsilon, gamma)
    z = Z.probs
    L = z.shape[0]
    slack = z[I] - mult[:, None] * z[J]
    bad_p, bad_k = np.nonzero(slack > tol)
    violations = [
        (int(Z.support[I[a]]), int(Z.support[J[a]]), int(Z.support[k]), float(slack[a, k]))
        for a, k in zip(bad_p.tolist(), bad_k.tolist())
    ]
    checked = len(I) * L
    return GeoIndAuditReport(
        checked_triples=checked,
        violations=violations,
        violation_ratio=len(violations) / checked if checked else 0.0,
        epsilon=epsilon,
        gamma=gamma,
        tol=tol,
        max_slack=float(slack.max()) if slack.size else -math.inf,
    )


# ------------------------------------------------------------- utility

def delta_cost(x: int, v: int, utility: UtilityModel) -> float:
    """Expected absolute travel-cost error ``sum_l q_l |c_xl - c_vl|``."""
    return float(delta_cost_matrix(utility, [x], [v])[0, 0])


def delta_cost_matrix(utility: UtilityModel, rows, cols) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    active = np.flatnonzero(utility.q > 0)
    cr = utility.cost[np.ix_(rows, active)]
    cc = utility.cost[np.ix_(cols, active)]
    if not (np.all(np.isfinite(cr)) and np.all(np.isfinite(cc))):
        raise InfiniteCost("a location cannot reach a target with positive q")
    q = utility.q[active]
    out = np.empty((len(rows), len(cols)))
    # rows in blocks so the [rows, cols, targets] difference stays small
    step = max(1, DELTA_BLOCK // max(1, len(cols) * len(active)))
    for r0 in range(0, len(rows), step):
        out[r0:r0 + step] = np.abs(cr[r0:r0 + step, None, :] - cc[None, :, :]) @ q
    return out


def matrix_utility_loss(Z: ObfuscationMatrix, utility: UtilityModel, prior: np.ndarray | None = None) -> float:
    p = _prior(prior, Z.size)
    dc = delta_cost_matrix(utility, Z.support, Z.support)
    return float(np.sum(p[:, None] * Z.probs * dc))


def _prior(prior, L) -> np.ndarray:
    if prior is None:
        return np.full(L, 1.0 / L)
    p = np.asarray(prior, dtype=float)
    if p.shape != (L,):
        raise DimensionMismatch(f"prior of shape {p.shape} for support size {L}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > STOCHASTIC_TOL:
        raise NotStochastic("prior must sum to 1")
    return p


# ------------------------------------------------------------- sampling

def sample_obfuscated(Z: ObfuscationMatrix, i: int, rng: np.random.Generator) -> int:
    """Draw a column index from row ``i`` (a row index, not a location id)."""
    if not 0 <= i < Z.size:
        raise UnknownRow(i)
    cdf = np.cumsum(Z.probs[i])
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(k, Z.size - 1)


def obfuscate(Z: ObfuscationMatrix, loc: int, rng: np.random.Generator) -> int:
    """Report location id for real location ``loc``."""
    return int(Z.support[sample_obfuscated(Z, Z.index_of(loc), rng)])


# --------------------------------------------------------- serialization

def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def write_matrix(Z: ObfuscationMatrix, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row_loc", "col_loc", "prob"])
        sup = Z.support.tolist()
        for a, r in enumerate(sup):
            row = Z.probs[a]
            for b in np.flatnonzero(row).tolist():
                w.writerow([r, sup[b], repr(float(row[b]))])
    side = {
        "format_version": MATRIX_FORMAT_VERSION,
        "provenance": Z.provenance,
        "params": Z.params.to_json(),
        "support": Z.support.tolist(),
        "objective": Z.objective,
        "meta": Z.meta,
    }
    if extra:
        side.update(extra)
    sidecar_path(path).write_text(json.dumps(side, indent=2), encoding="utf-8")


def read_matrix(path) -> ObfuscationMatrix:
    path = Path(path)
    try:
        side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"missing sidecar {sidecar_path(path)}") from None
    if side.get("format_version") != MATRIX_FORMAT_VERSION:
        raise FormatError(f"unsupported matrix format {side.get('format_version')!r}")
    support = np.asarray(side["support"], dtype=np.int64)
    pos = {int(s): a for a, s in enumerate(support.tolist())}
    probs = np.zeros((len(support), len(support)))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["row_loc", "col_loc", "prob"]:
            raise FormatError(f"{path}: header must be row_loc,col_loc,prob")
        for r in reader:
            try:
                probs[pos[int(r["row_loc"])], pos[int(r["col_loc"])]] = float(r["prob"])
            except KeyError as exc:
                raise FormatError(f"{path}: location {exc} not in sidecar support") from None
    return ObfuscationMatrix(
        support, probs, PrivacyParams.from_json(side["params"]), side["provenance"],
        side.get("objective"), side.get("meta", {}),
    )


def write_audit(report: GeoIndAuditReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
