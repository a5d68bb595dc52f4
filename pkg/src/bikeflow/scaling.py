"""Heavy-traffic families of networks and fluid/diffusion rescaling.

The ``n``-th member of a family has ``ceil(sqrt(n) C)`` bikes and
``ceil(sqrt(n) K)`` docks per station.  Travel laws never change; each
station's arrival rate is set to the total nominal road rate into it minus
``theta_j / sqrt(n)``, so the station drift at level ``n`` is exactly
``theta_j / sqrt(n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import des
from .model import DistributionSpec, NominalRates, StationSpec, check_config, index_for


@dataclass(eq=False)
class ScalingFamily:
    """Rule producing the networks of a heavy-traffic sequence.

    :param base: level-1 network.
    :param target_drift: limiting station drifts ``theta`` (length ``N``).
    :param class2_rate: nominal class-2 road rate used for centering the
        station rates.  Defaults to 0, the value forced in the limit where
        blocking vanishes on the fluid scale.
    """

    base: object
    target_drift: np.ndarray = None
    class2_rate: float = 0.0
    rate_rule: str = field(default="station arrival rate = nominal inflow - theta/sqrt(n)")
    capacity_rule: str = field(default="C^n = ceil(sqrt(n) C), K^n = ceil(sqrt(n) K)")

    def __post_init__(self):
        check_config(self.base)
        if self.target_drift is None:
            self.target_drift = np.zeros(self.base.N)
        self.target_drift = np.asarray(self.target_drift, float).reshape(self.base.N)

    @property
    def idx(self):
        return index_for(self.base.N)

    def nominal_road_rates(self):
        """Nominal per (road, class) rates in index order."""
        idx = self.idx
        out = np.empty(idx.dim - idx.N)
        for m, k in enumerate(idx.roads):
            if idx.kind[k] == 2:
                out[m] = self.class2_rate
            else:
                out[m] = 1.0 / self.base.travel(idx.origin[k], idx.dest[k], 1).mean
        return out

    def nominal_inflow(self):
        idx = self.idx
        inflow = np.zeros(idx.N)
        np.add.at(inflow, idx.dest[idx.N:], self.nominal_road_rates())
        return inflow

    def to_dict(self):
        return {"target_drift": self.target_drift.tolist(), "class2_rate": self.class2_rate,
                "rate_rule": self.rate_rule, "capacity_rule": self.capacity_rule}


def _ceil_scaled(x, n):
    # guard against sqrt(n)*x landing a hair above an integer
    v = math.sqrt(n) * x
    r = round(v)
    return int(r) if abs(v - r) < 1e-9 else int(math.ceil(v))


def station_rates(fam, n):
    """Arrival rates of the stations at level ``n``."""
    return fam.nominal_inflow() - fam.target_drift / math.sqrt(n)


def scale_config(fam, n):
    """The ``n``-th network of the family."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    n = int(n)
    base = fam.base
    lam = station_rates(fam, n)
    if np.any(lam <= 0):
        raise ValueError(f"perturbed arrival rate not positive at n={n}: {lam}")
    stations = []
    for j, s in enumerate(base.stations):
        law = s.arrival
        if n == 1 and fam.target_drift[j] == 0 and math.isclose(law.rate, lam[j], rel_tol=1e-15):
            arrival = law
        else:
            arrival = DistributionSpec(law.family, 1.0 / lam[j], law.cv)
        stations.append(StationSpec(_ceil_scaled(s.capacity, n), _ceil_scaled(s.initial_bikes, n),
                                    arrival))
    cfg = base.replace_stations(stations)
    check_config(cfg)
    return cfg


def level_rates(fam, n):
    """Actual service capacities of the ``n``-th network: arrival rates at
    stations and ``1/mean`` on every road and class."""
    cfg = scale_config(fam, n)
    idx = fam.idx
    b_road = np.array([1.0 / cfg.travel(idx.origin[k], idx.dest[k], idx.kind[k]).mean
                       for k in idx.roads])
    return NominalRates(station_rates(fam, n), b_road)


def family_rates(fam, n):
    """Rates whose drift satisfies ``sqrt(n) theta^n = theta`` at stations:
    level-``n`` station rates with the nominal road rates."""
    return NominalRates(station_rates(fam, n), fam.nominal_road_rates())


def scaled_srbm_params(fam, n, gamma="primitives"):
    """Reflected diffusion matched to level ``n`` on the diffusion scale.

    Drift is ``sqrt(n)`` times the drift at the level's actual rates, the box
    and start point are divided by ``sqrt(n)``.  One unit of time of the
    result corresponds to ``n`` units of the network.
    """
    from .srbm import srbm_params

    cfg = scale_config(fam, n)
    p = srbm_params(cfg, level_rates(fam, n), fam.idx, gamma=gamma, scale=math.sqrt(n))
    p.theta = p.theta * math.sqrt(n)
    return p


@dataclass(eq=False)
class ScaledPath:
    """Rescaled copies of a trajectory's paths on the time grid ``t``."""

    n: int
    kind: str
    t: np.ndarray
    paths: dict

    def __getitem__(self, key):
        return self.paths[key]


def _check_horizon(tr, n, T):
    if T is not None and tr.horizon < n * T * (1 - 1e-12):
        raise ValueError(f"horizon {tr.horizon} shorter than n*T = {n * T}")


def fluid_scale(tr, n, T=None):
    """``(1/n) process(n t)`` for queues, busy, idle, full times and counters."""
    _check_horizon(tr, n, T)
    paths = {k: getattr(tr, k) / n for k in ("Q", "B", "Y0", "BF", "YK", "S")}
    return ScaledPath(n, "fluid", tr.times / n, paths)


def diffusion_scale(tr, n, rates, T=None):
    """``(1/sqrt(n)) process(n t)`` for queues and pushing processes, plus
    the centered netput ``X`` computed with ``rates``."""
    _check_horizon(tr, n, T)
    r = math.sqrt(n)
    paths = {"Q": tr.Q / r, "Y0": tr.Y0 / r, "YK": tr.YK / r,
             "X": des.centered_netput(tr, rates) / r}
    return ScaledPath(n, "diffusion", tr.times / n, paths)


def _rep_seed(seed, n, rep):
    # distinct, reproducible seed per (n, rep)
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(n), int(rep)))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _map(fn, jobs, threads):
    if threads and threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _fluid_job(args):
    fam, n, T, seed = args
    tr = des.simulate(scale_config(fam, n), n * T, seed)
    # idle and blocking totals are nondecreasing, so their sup is the end value
    return tr.Y0[-1] / n, tr.YK[-1] / n


@dataclass(eq=False)
class FluidTable:
    """Median sup-deviations per level.

    ``busy_dev[m]`` holds, per coordinate, the median over replications of
    ``sup_{t<=T} |B(nt)/n - t|`` at ``ns[m]``; ``blocked[m]`` the median of
    ``sup_{t<=T} YK(nt)/n`` per station.
    """

    ns: list
    T: float
    reps: int
    seed: int
    labels: list
    busy_dev: np.ndarray
    blocked: np.ndarray
    raw_busy: list = None
    raw_blocked: list = None

    def decreasing_pairs(self, values):
        """Per column: number of consecutive ``ns`` pairs with a strict decrease."""
        v = np.asarray(values)
        return np.sum(np.diff(v, axis=0) < 0, axis=0)

    def rows(self):
        out = []
        for m, n in enumerate(self.ns):
            for k, lab in enumerate(self.labels):
                out.append((n, lab, "busy_dev", self.busy_dev[m, k], self.reps, self.seed))
            for j in range(self.blocked.shape[1]):
                out.append((n, self.labels[j], "blocked", self.blocked[m, j], self.reps, self.seed))
        return out


def fluid_limit_diagnostic(fam, ns, T, reps, seed, threads=None):
    """Sup-deviations of fluid-scaled busy and blocking processes from their
    fluid limits (``t`` and ``0``), as medians over ``reps`` runs per ``n``."""
    ns = [int(n) for n in ns]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("ns must be strictly increasing")
    busy, blocked, rb, rk = [], [], [], []
    for n in ns:
        res = _map(_fluid_job, [(fam, n, T, _rep_seed(seed, n, r)) for r in range(reps)], threads)
        y0 = np.array([a for a, _ in res])
        yk = np.array([b for _, b in res])
        rb.append(y0)
        rk.append(yk)
        busy.append(np.median(y0, axis=0))
        blocked.append(np.median(yk, axis=0))
    return FluidTable(ns, T, reps, seed, fam.idx.labels(), np.array(busy), np.array(blocked), rb, rk)


def _martingale_job(args):
    fam, n, grid, s, seed = args
    cfg = scale_config(fam, n)
    rates = level_rates(fam, n)
    horizon = n * (max(grid) + s)
    tr = des.simulate(cfg, horizon, seed)
    t = np.concatenate([grid, grid + s]) * n
    X = des.centered_netput(tr, rates, cfg, times=t) / math.sqrt(n)
    m = len(grid)
    return X[m:] - X[:m]


@dataclass(eq=False)
class MartingaleResult:
    """Studentized mean increments ``z[t, k]`` of the scaled netput minus
    ``theta s``."""

    n: int
    s: float
    grid: np.ndarray
    theta: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    z: np.ndarray
    increments: np.ndarray = None

    def with_offset(self, offset):
        """Result of the same runs when the centering drift is off by ``offset``."""
        off = np.broadcast_to(np.asarray(offset, float), self.theta.shape)
        mean = self.mean - off * self.s
        return MartingaleResult(self.n, self.s, self.grid, self.theta + off, mean, self.se,
                                _zscores(mean, self.se), self.increments)

    def fraction_exceeding(self, level=3.0):
        return float(np.mean(np.abs(self.z) > level))


def _zscores(mean, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, mean / np.where(se > 0, se, 1.0),
                     np.where(mean == 0, 0.0, np.sign(mean) * np.inf))
    return z


def martingale_diagnostic(fam, n, T, s, reps, seed, grid=None, theta_offset=0.0, threads=None):
    """Test that increments of the diffusion-scaled centered netput over
    ``[t, t + s]`` have mean ``theta s`` for ``t`` on a grid in ``[0, T]``."""
    grid = np.asarray(grid if grid is not None else np.linspace(0.0, T, 3), float)
    cfg = scale_config(fam, n)
    from .srbm import drift_vector

    theta = math.sqrt(n) * drift_vector(cfg, level_rates(fam, n), fam.idx)
    jobs = [(fam, n, grid, s, _rep_seed(seed, n, r)) for r in range(reps)]
    inc = np.array(_map(_martingale_job, jobs, threads))
    # X already carries theta*t; the centered increment should have mean zero
    d = inc - theta * s
    mean = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / math.sqrt(reps)
    res = MartingaleResult(n, s, grid, theta, mean, se, _zscores(mean, se), inc)
    if np.any(np.asarray(theta_offset) != 0):
        return res.with_offset(theta_offset)
    return res


def sample_primitives(cfg, n, t, reps, seed, rates=None):
    """Diffusion-scaled primitive processes at time ``t``, simulated directly.

    Returns a dict with ``"service"`` (reps x dim) holding
    ``(S(n t) - b n t)/sqrt(n)`` for every renewal stream, and ``"routing"``
    (list over stations of reps x N arrays) holding
    ``(R(floor(n t)) - p n t)/sqrt(n)`` for the class-1 routing counts.
    """
    from .model import nominal_rates

    idx = index_for(cfg.N)
    rates = rates or nominal_rates(cfg, idx)
    b = rates.full()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    horizon = n * t
    service = np.empty((reps, idx.dim))
    for k in range(idx.dim):
        law = cfg.stations[k].arrival if k < cfg.N else \
            cfg.travel(idx.origin[k], idx.dest[k], idx.kind[k])
        mean_count = horizon / law.mean
        m = int(mean_count + 8 * math.sqrt(mean_count * max(law.cv, 0.1) ** 2) + 20)
        for r in range(reps):
            arrivals = np.cumsum(law.sample(rng, m))
            if arrivals[-1] <= horizon:
                raise RuntimeError("renewal draw buffer too short")
            service[r, k] = np.searchsorted(arrivals, horizon, side="right")
    service = (service - b * horizon) / math.sqrt(n)
    p = np.asarray(cfg.first_routing, float)
    count = int(math.floor(horizon))
    routing = [(rng.multinomial(count, p[l], size=reps) - p[l] * horizon) / math.sqrt(n)
               for l in range(cfg.N)]
    return {"service": service, "routing": routing}
