"""Network configuration, validation, node indexing and routing.

Stations are labelled ``0..N-1``.  The state vector is laid out with the
``N`` station coordinates first, followed by one coordinate per
(road, class) pair ordered lexicographically by ``(origin, destination,
class)`` with classes ``1`` (first ride) and ``2`` (deflected ride).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = ("exponential", "gamma", "deterministic", "lognormal")
ROW_TOL = 1e-12


@dataclass(frozen=True)
class DistributionSpec:
    """A positive law described by its mean and coefficient of variation."""

    family: str
    mean: float
    cv: float

    @classmethod
    def exponential(cls, mean):
        return cls("exponential", float(mean), 1.0)

    @classmethod
    def deterministic(cls, mean):
        return cls("deterministic", float(mean), 0.0)

    @classmethod
    def gamma(cls, mean, cv):
        return cls("gamma", float(mean), float(cv))

    @classmethod
    def lognormal(cls, mean, cv):
        return cls("lognormal", float(mean), float(cv))

    @property
    def rate(self):
        return 1.0 / self.mean

    def problems(self):
        out = []
        if self.family not in FAMILIES:
            out.append(f"unknown family {self.family!r}")
            return out
        if not (self.mean > 0 and math.isfinite(self.mean)):
            out.append(f"mean must be positive, got {self.mean}")
        if not (self.cv >= 0 and math.isfinite(self.cv)):
            out.append(f"cv must be nonnegative, got {self.cv}")
        if (self.family == "deterministic") != (self.cv == 0):
            out.append("cv = 0 if and only if family is deterministic")
        if self.family == "exponential" and self.cv != 1.0:
            out.append(f"exponential requires cv = 1, got {self.cv}")
        return out

    def sample(self, rng, size):
        """Draw ``size`` values using ``rng`` (a numpy Generator)."""
        m, cv = self.mean, self.cv
        if self.family == "exponential":
            return rng.exponential(m, size)
        if self.family == "deterministic":
            return np.full(size, m)
        if self.family == "gamma":
            shape = 1.0 / (cv * cv)
            return rng.gamma(shape, m * cv * cv, size)
        if self.family == "lognormal":
            s2 = math.log1p(cv * cv)
            return rng.lognormal(math.log(m) - 0.5 * s2, math.sqrt(s2), size)
        raise ValueError(f"unknown family {self.family!r}")

    def to_dict(self):
        return {"family": self.family, "mean": self.mean, "cv": self.cv}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["family"]), float(d["mean"]), float(d["cv"]))


@dataclass(frozen=True)
class StationSpec:
    capacity: int
    initial_bikes: int
    arrival: DistributionSpec


@dataclass(frozen=True, eq=False)
class NetworkConfig:
    """Stations, demand, routing and travel-time laws of one network.

    ``travel_first[i][j]`` and ``travel_deflect[i][j]`` give the class-1 and
    class-2 ride-time laws on road ``i -> j``; diagonal entries are ignored.
    """

    N: int
    stations: tuple
    first_routing: np.ndarray
    deflect_routing: np.ndarray
    travel_first: tuple
    travel_deflect: tuple

    @property
    def capacities(self):
        return np.array([s.capacity for s in self.stations], dtype=np.int64)

    @property
    def initial_bikes(self):
        return np.array([s.initial_bikes for s in self.stations], dtype=np.int64)

    @property
    def total_bikes(self):
        return int(sum(s.initial_bikes for s in self.stations))

    def travel(self, j, i, d):
        return (self.travel_first if d == 1 else self.travel_deflect)[j][i]

    def to_dict(self):
        def dists(mat):
            return [[None if i == j else mat[i][j].to_dict() for j in range(self.N)]
                    for i in range(self.N)]

        return {
            "N": self.N,
            "stations": [
                {"capacity": s.capacity, "initial_bikes": s.initial_bikes,
                 "arrival": s.arrival.to_dict()} for s in self.stations
            ],
            "first_routing": np.asarray(self.first_routing).tolist(),
            "deflect_routing": np.asarray(self.deflect_routing).tolist(),
            "travel_first": dists(self.travel_first),
            "travel_deflect": dists(self.travel_deflect),
        }

    @classmethod
    def from_dict(cls, d):
        n = int(d["N"])

        def dists(rows):
            return tuple(
                tuple(None if (i == j or rows[i][j] is None)
                      else DistributionSpec.from_dict(rows[i][j]) for j in range(n))
                for i in range(n))

        stations = tuple(
            StationSpec(int(s["capacity"]), int(s["initial_bikes"]),
                        DistributionSpec.from_dict(s["arrival"]))
            for s in d["stations"])
        return cls(n, stations,
                   np.asarray(d["first_routing"], dtype=float),
                   np.asarray(d["deflect_routing"], dtype=float),
                   dists(d["travel_first"]), dists(d["travel_deflect"]))

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def replace_stations(self, stations):
        return NetworkConfig(self.N, tuple(stations), self.first_routing,
                             self.deflect_routing, self.travel_first, self.travel_deflect)


def load_config(path):
    """Read a JSON network description; raises ``ValueError`` on malformed input."""
    text = Path(path).read_text()
    try:
        return NetworkConfig.from_dict(json.loads(text))
    except (KeyError, TypeError, IndexError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed config {path}: {exc}") from exc


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def symmetric_config(N=2, capacity=5, initial_bikes=3, arrival=None,
                     travel_first=None, travel_deflect=None):
    """Config with identical stations and uniform routing/deflection."""
    arrival = arrival or DistributionSpec.exponential(1.0)
    tf = travel_first or DistributionSpec.exponential(1.0)
    td = travel_deflect or DistributionSpec.exponential(1.0)
    p = np.full((N, N), 1.0 / (N - 1))
    np.fill_diagonal(p, 0.0)
    st = tuple(StationSpec(capacity, initial_bikes, arrival) for _ in range(N))
    first = tuple(tuple(None if i == j else tf for j in range(N)) for i in range(N))
    defl = tuple(tuple(None if i == j else td for j in range(N)) for i in range(N))
    return NetworkConfig(N, st, p, p.copy(), first, defl)


@dataclass(frozen=True)
class Violation:
    code: str
    where: tuple
    message: str

    def __str__(self):
        return f"{self.code} at {self.where}: {self.message}"


def validate_config(cfg):
    """Return every violated invariant; an empty list means ``cfg`` is valid."""
    out = []
    N = cfg.N
    if not isinstance(N, (int, np.integer)) or N < 2:
        return [Violation("N", (), f"need at least 2 stations, got {N}")]
    if len(cfg.stations) != N:
        return [Violation("stations", (), f"expected {N} stations, got {len(cfg.stations)}")]
    for i, s in enumerate(cfg.stations):
        if s.capacity < 1:
            out.append(Violation("capacity", (i,), f"K={s.capacity} < 1"))
        if not 1 <= s.initial_bikes <= s.capacity:
            out.append(Violation("initial_bikes", (i,),
                                 f"need 1 <= C <= K, got C={s.initial_bikes}, K={s.capacity}"))
        for msg in s.arrival.problems():
            out.append(Violation("arrival", (i,), msg))
    total = sum(s.initial_bikes for s in cfg.stations)
    for j, s in enumerate(cfg.stations):
        if total <= s.capacity:
            out.append(Violation("fleet", (j,),
                                 f"sum C = {total} <= K_{j} = {s.capacity}"))
    for name, mat in (("first_routing", cfg.first_routing),
                      ("deflect_routing", cfg.deflect_routing)):
        m = np.asarray(mat, dtype=float)
        if m.shape != (N, N):
            out.append(Violation(name, (), f"shape {m.shape} != {(N, N)}"))
            continue
        for i in range(N):
            if m[i, i] != 0.0:
                out.append(Violation(name, (i, i), f"diagonal entry {m[i, i]} != 0"))
            bad = np.flatnonzero((m[i] < 0) | (m[i] > 1) | ~np.isfinite(m[i]))
            for j in bad:
                out.append(Violation(name, (i, int(j)), f"entry {m[i, j]} not in [0, 1]"))
            rs = m[i].sum()
            if abs(rs - 1.0) > ROW_TOL:
                out.append(Violation(name, (i,), f"row {i} sums to {rs:.15g}"))
    for name, mat in (("travel_first", cfg.travel_first),
                      ("travel_deflect", cfg.travel_deflect)):
        if len(mat) != N or any(len(row) != N for row in mat):
            out.append(Violation(name, (), "travel matrix must be N x N"))
            continue
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                d = mat[i][j]
                if d is None:
                    out.append(Violation(name, (i, j), "missing distribution"))
                    continue
                for msg in d.problems():
                    out.append(Violation(name, (i, j), msg))
    return out


def check_config(cfg):
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config:\n" + "\n".join(str(p) for p in problems))


@dataclass(frozen=True, eq=False)
class IndexMap:
    """Coordinate layout of the per-class state vector.

    ``kind[k]`` is 0 for a station and 1 or 2 for a road coordinate of that
    class; ``origin``/``dest`` give the road endpoints (station coordinates
    have ``origin == dest``).
    """

    N: int
    station_index: np.ndarray
    road_class_index: dict
    kind: np.ndarray
    origin: np.ndarray
    dest: np.ndarray

    @property
    def dim(self):
        return len(self.kind)

    @property
    def roads(self):
        return np.arange(self.N, self.dim)

    def road(self, j, i, d):
        return self.road_class_index[(j, i, d)]

    def label(self, k):
        if self.kind[k] == 0:
            return f"S{self.origin[k]}"
        return f"R{self.origin[k]}>{self.dest[k]}c{self.kind[k]}"

    def labels(self):
        return [self.label(k) for k in range(self.dim)]


def build_index(cfg):
    check_config(cfg)
    return index_for(cfg.N)


def index_for(N):
    kind, origin, dest = list(np.zeros(N, int)), list(range(N)), list(range(N))
    rci = {}
    for j in range(N):
        for i in range(N):
            if i == j:
                continue
            for d in (1, 2):
                rci[(j, i, d)] = len(kind)
                kind.append(d)
                origin.append(j)
                dest.append(i)
    return IndexMap(N, np.arange(N), rci, np.array(kind), np.array(origin), np.array(dest))


def routing_matrix(cfg, idx):
    """Node-to-node transition matrix of the unblocked dynamics.

    Station ``i`` sends to its class-1 road ``i -> j`` with ``p[i, j]``; every
    road coordinate sends to its destination station with probability 1.
    The blocking-triggered deflection transitions live in
    :func:`deflection_channel`.
    """
    P = np.zeros((idx.dim, idx.dim))
    p = np.asarray(cfg.first_routing, dtype=float)
    for (j, i, d), k in idx.road_class_index.items():
        P[k, i] = 1.0
        if d == 1:
            P[j, k] = p[j, i]
    return P


def deflection_channel(cfg, idx):
    """``D[r, r']``: probability that a bike blocked at the end of road ``r``
    continues on class-2 road ``r'``."""
    D = np.zeros((idx.dim, idx.dim))
    a = np.asarray(cfg.deflect_routing, dtype=float)
    for (j, i, d), k in idx.road_class_index.items():
        for l in range(cfg.N):
            if l != i:
                D[k, idx.road(i, l, 2)] = a[i, l]
    return D


def aggregate_classes(x, idx):
    """Collapse per-class road coordinates into an N*N vector: stations on
    the first N entries, then road ``j -> i`` (lexicographic) summed over
    classes."""
    x = np.asarray(x)
    n_roads = idx.N * (idx.N - 1)
    out = np.zeros(x.shape[:-1] + (idx.N + n_roads,), dtype=x.dtype)
    out[..., :idx.N] = x[..., :idx.N]
    out[..., idx.N:] = x[..., idx.N::2] + x[..., idx.N + 1::2]
    return out


@dataclass(frozen=True, eq=False)
class NominalRates:
    """Long-run service rates used for centering: station rental rates and
    per (road, class) completion rates in index order."""

    b_station: np.ndarray
    b_road: np.ndarray = field(repr=False)

    def full(self):
        return np.concatenate([self.b_station, self.b_road])


def nominal_rates(cfg, idx=None, class2=None):
    """Rates read off the configured means: ``1/mean`` for every stream.

    ``class2`` optionally overrides the class-2 road rates (scalar or array).
    """
    idx = idx or index_for(cfg.N)
    b_station = np.array([1.0 / s.arrival.mean for s in cfg.stations])
    b_road = np.array([1.0 / cfg.travel(idx.origin[k], idx.dest[k], idx.kind[k]).mean
                       for k in idx.roads])
    if class2 is not None:
        mask = idx.kind[idx.N:] == 2
        b_road[mask] = np.broadcast_to(np.asarray(class2, float), b_road.shape)[mask]
    return NominalRates(b_station, b_road)


def coordinate_cv(cfg, idx):
    """CV of the renewal stream attached to every coordinate."""
    out = np.empty(idx.dim)
    for k in range(idx.dim):
        if idx.kind[k] == 0:
            out[k] = cfg.stations[k].arrival.cv
        else:
            out[k] = cfg.travel(idx.origin[k], idx.dest[k], idx.kind[k]).cv
    return out


def box_upper(cfg, idx):
    """Box caps: ``K_i`` for stations, total fleet for road coordinates."""
    up = np.full(idx.dim, float(cfg.total_bikes))
    up[:cfg.N] = cfg.capacities
    return up
