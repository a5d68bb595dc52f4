"""Discrete-event simulation of the closed bike network.

Every station is a server whose "service" is a rental: riders arrive by a
renewal process and take a bike when one is docked (otherwise the rider is
lost).  Every (road, class) pair is a single-server FCFS queue whose service
times are drawn i.i.d. from the road's travel law, so that its completion
count is a renewal process run in busy time.  A completing bike docks at the
destination unless it is full, in which case it is deflected onto a class-2
road chosen by the deflection probabilities.

The loop only records an event log; all paths, counters and time integrals
are rebuilt from it with vectorized cumulative sums.
"""

from __future__ import annotations

import csv
import heapq
import math
from bisect import bisect_right
from collections import deque
from functools import cached_property

import numpy as np

from .model import check_config, index_for

RENT, LOST, RETURN, DEFLECT = 0, 1, 2, 3
KIND_NAMES = ("RENT", "LOST", "RETURN", "DEFLECT")

# stream purposes, fixed order for seed derivation
ARRIVAL, ROUTE, DEFLECT_ROUTE, TRAVEL = 0, 1, 2, 3

# event priorities at equal times
_PRIO_TRAVEL, _PRIO_ARRIVAL = 0, 1

BLOCK = 4096
DEFAULT_HOP_CAP = 10**6


def stream(seed, purpose, coord):
    """Independent generator for one (purpose, coordinate) pair."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(coord)))
    return np.random.Generator(np.random.Philox(ss))


class _Draws:
    """Buffered draws from one law on one stream."""

    __slots__ = ("gen", "law", "buf", "pos")

    def __init__(self, gen, law):
        self.gen, self.law = gen, law
        self.buf, self.pos = [], 0

    def next(self):
        if self.pos == len(self.buf):
            if self.law is None:
                self.buf = self.gen.random(BLOCK).tolist()
            else:
                self.buf = self.law.sample(self.gen, BLOCK).tolist()
            self.pos = 0
        v = self.buf[self.pos]
        self.pos += 1
        return v


class HopCapExceeded(RuntimeError):
    pass


def simulate(cfg, horizon, seed, road_discipline="fcfs", hop_cap=DEFAULT_HOP_CAP,
             station_keys=None):
    """Simulate ``cfg`` over ``[0, horizon]``.

    :param road_discipline: ``"fcfs"`` (single server per road/class, the
        default) or ``"infinite"`` (every bike travels independently).
    :param hop_cap: maximum deflections of a single bike before aborting.
    :param station_keys: optional relabelling of stations for stream
        derivation; station ``j`` then draws from the streams that station
        ``station_keys[j]`` would use by default (roads follow their
        endpoints).
    :returns: :class:`Trajectory`
    """
    horizon = float(horizon)
    if not horizon > 0 or not math.isfinite(horizon):
        raise ValueError(f"horizon must be positive and finite, got {horizon}")
    if road_discipline not in ("fcfs", "infinite"):
        raise ValueError(f"unknown road discipline {road_discipline!r}")
    check_config(cfg)
    N = cfg.N
    idx = index_for(N)
    dim = idx.dim
    K = cfg.capacities.tolist()
    q = [0] * dim
    q[:N] = cfg.initial_bikes.tolist()
    infinite = road_discipline == "infinite"

    key = list(range(N)) if station_keys is None else [int(v) for v in station_keys]
    if sorted(key) != list(range(N)):
        raise ValueError("station_keys must be a permutation of the stations")

    def road_key(k):
        return idx.road(key[idx.origin[k]], key[idx.dest[k]], int(idx.kind[k]))

    arr = [_Draws(stream(seed, ARRIVAL, key[j]), cfg.stations[j].arrival) for j in range(N)]
    trav = [None] * dim
    for k in range(N, dim):
        trav[k] = _Draws(stream(seed, TRAVEL, road_key(k)),
                         cfg.travel(int(idx.origin[k]), int(idx.dest[k]), int(idx.kind[k])))
    route = [_Draws(stream(seed, ROUTE, key[j]), None) for j in range(N)]
    droute = [_Draws(stream(seed, DEFLECT_ROUTE, key[j]), None) for j in range(N)]

    p = np.asarray(cfg.first_routing, float)
    a = np.asarray(cfg.deflect_routing, float)

    def table(mat, d):
        # cumulative probabilities over destinations with positive mass
        out = []
        for j in range(N):
            dests = [i for i in range(N) if i != j and mat[j, i] > 0]
            cum = np.cumsum([mat[j, i] for i in dests]).tolist()
            cum[-1] = math.inf
            out.append((cum, [idx.road(j, i, d) for i in dests]))
        return out

    first_tab = table(p, 1)
    defl_tab = table(a, 2)
    dest_of = idx.dest.tolist()

    # per-road FIFO of hop counts (fcfs) or count only (infinite)
    queue = [deque() for _ in range(dim)]
    heap = []
    seq = 0
    for j in range(N):
        heapq.heappush(heap, (arr[j].next(), _PRIO_ARRIVAL, j, seq, 0))
        seq += 1

    ev_t, ev_kind, ev_node, ev_dst = [], [], [], []
    # loop-level integrals, kept only as an independent cross-check
    busy = [0.0] * dim
    busy_since = [0.0 if q[k] > 0 else -1.0 for k in range(dim)]
    full = [0.0] * N
    full_since = [0.0 if q[j] == K[j] else -1.0 for j in range(N)]

    def enter(now, k, hops):
        nonlocal seq
        if q[k] == 0:
            busy_since[k] = now
        q[k] += 1
        if infinite or len(queue[k]) == 0:
            heapq.heappush(heap, (now + trav[k].next(), _PRIO_TRAVEL, k, seq, hops))
            seq += 1
            if not infinite:
                queue[k].append(hops)
        else:
            queue[k].append(hops)

    def leave(now, k):
        q[k] -= 1
        if q[k] == 0:
            busy[k] += now - busy_since[k]
            busy_since[k] = -1.0

    while heap:
        now, prio, k, _, hops = heapq.heappop(heap)
        if now > horizon:
            break
        if prio == _PRIO_ARRIVAL:
            heapq.heappush(heap, (now + arr[k].next(), _PRIO_ARRIVAL, k, seq, 0))
            seq += 1
            if q[k] == 0:
                ev_t.append(now); ev_kind.append(LOST); ev_node.append(k); ev_dst.append(-1)
                continue
            if q[k] == K[k]:
                full[k] += now - full_since[k]
                full_since[k] = -1.0
            leave(now, k)
            cum, roads = first_tab[k]
            r = roads[bisect_right(cum, route[k].next())]
            ev_t.append(now); ev_kind.append(RENT); ev_node.append(k); ev_dst.append(r)
            enter(now, r, 0)
            continue
        # travel completion on road-class coordinate k
        if not infinite:
            queue[k].popleft()
        leave(now, k)
        st = dest_of[k]
        if q[st] < K[st]:
            if q[st] == 0:
                busy_since[st] = now
            q[st] += 1
            if q[st] == K[st]:
                full_since[st] = now
            ev_t.append(now); ev_kind.append(RETURN); ev_node.append(k); ev_dst.append(st)
        else:
            if hops + 1 > hop_cap:
                raise HopCapExceeded(f"bike exceeded {hop_cap} deflections at t={now}")
            cum, roads = defl_tab[st]
            r = roads[bisect_right(cum, droute[st].next())]
            ev_t.append(now); ev_kind.append(DEFLECT); ev_node.append(k); ev_dst.append(r)
            enter(now, r, hops + 1)
        if not infinite and queue[k]:
            heapq.heappush(heap, (now + trav[k].next(), _PRIO_TRAVEL, k, seq, queue[k][0]))
            seq += 1

    for k in range(dim):
        if busy_since[k] >= 0:
            busy[k] += horizon - busy_since[k]
    for j in range(N):
        if full_since[j] >= 0:
            full[j] += horizon - full_since[j]

    return Trajectory(
        cfg=cfg, horizon=horizon, seed=int(seed), road_discipline=road_discipline,
        ev_time=np.array(ev_t, float), ev_kind=np.array(ev_kind, np.int8),
        ev_node=np.array(ev_node, np.int64), ev_dst=np.array(ev_dst, np.int64),
        loop_busy=np.array(busy), loop_full=np.array(full),
    )


class Trajectory:
    """Event log of one run plus lazily rebuilt paths.

    Path arrays have one row per epoch: row 0 is time 0, row ``m`` is the
    state right after event ``m``, and the last row repeats the final state
    at ``horizon``.  Values are right-continuous and constant between rows.
    """

    def __init__(self, cfg, horizon, seed, road_discipline, ev_time, ev_kind,
                 ev_node, ev_dst, loop_busy, loop_full):
        self.cfg = cfg
        self.idx = index_for(cfg.N)
        self.horizon = horizon
        self.seed = seed
        self.road_discipline = road_discipline
        self.ev_time = ev_time
        self.ev_kind = ev_kind
        self.ev_node = ev_node
        self.ev_dst = ev_dst
        self.loop_busy = loop_busy
        self.loop_full = loop_full

    @property
    def N(self):
        return self.cfg.N

    @property
    def dim(self):
        return self.idx.dim

    @property
    def n_events(self):
        return len(self.ev_time)

    @cached_property
    def times(self):
        return np.concatenate([[0.0], self.ev_time, [self.horizon]])

    @cached_property
    def q0(self):
        q0 = np.zeros(self.dim, np.int64)
        q0[:self.N] = self.cfg.initial_bikes
        return q0

    def _cum(self, rows, cols, width, weights=None):
        # counts per (epoch row, column) accumulated over events
        E = self.n_events
        inc = np.zeros((E + 2, width), np.int64)
        if weights is None:
            np.add.at(inc, (rows + 1, cols), 1)
        else:
            np.add.at(inc, (rows + 1, cols), weights)
        return np.cumsum(inc, axis=0)

    @cached_property
    def Q(self):
        moves = np.flatnonzero(self.ev_kind != LOST)
        rows = np.concatenate([moves, moves])
        cols = np.concatenate([self.ev_node[moves], self.ev_dst[moves]])
        w = np.concatenate([-np.ones(len(moves), np.int64), np.ones(len(moves), np.int64)])
        return self.q0 + self._cum(rows, cols, self.dim, w)

    @cached_property
    def S(self):
        """Service completions per coordinate (rentals at stations)."""
        m = np.flatnonzero(self.ev_kind != LOST)
        return self._cum(m, self.ev_node[m], self.dim)

    @cached_property
    def lost(self):
        m = np.flatnonzero(self.ev_kind == LOST)
        return self._cum(m, self.ev_node[m], self.N)

    @cached_property
    def YK(self):
        """Blocked returns per station."""
        m = np.flatnonzero(self.ev_kind == DEFLECT)
        return self._cum(m, self.idx.dest[self.ev_node[m]], self.N)

    def _routing(self, kind):
        m = np.flatnonzero(self.ev_kind == kind)
        dst = self.ev_dst[m]
        flat = self.idx.origin[dst] * self.N + self.idx.dest[dst]
        return self._cum(m, flat, self.N * self.N).reshape(-1, self.N, self.N)

    @cached_property
    def R_first(self):
        """``R_first[:, j, i]``: class-1 routings from station j to i."""
        return self._routing(RENT)

    @cached_property
    def R_deflect(self):
        """``R_deflect[:, j, l]``: deflections at station j sent towards l."""
        return self._routing(DEFLECT)

    @cached_property
    def dt(self):
        return np.diff(self.times)

    def _integral(self, indicator):
        out = np.zeros(indicator.shape, float)
        np.cumsum(indicator[:-1] * self.dt[:, None], axis=0, out=out[1:])
        return out

    @cached_property
    def B(self):
        """Busy time ``int 1{Q > 0}`` per coordinate."""
        return self._integral(self.Q > 0)

    @cached_property
    def Y0(self):
        """Idle time ``t - B`` per coordinate."""
        return self._integral(self.Q == 0)

    @cached_property
    def BF(self):
        """Full time per station."""
        return self._integral(self.Q[:, :self.N] == self.cfg.capacities)

    def at(self, path, t):
        """Value of a recorded path at times ``t`` (right-continuous)."""
        t = np.asarray(t, float)
        if np.any(t > self.horizon) or np.any(t < 0):
            raise ValueError("requested time outside [0, horizon]")
        k = np.searchsorted(self.times[:-1], t, side="right") - 1
        return path[k]

    def integral_at(self, path, t, indicator):
        """Exact value of a time integral path at arbitrary times."""
        t = np.asarray(t, float)
        k = np.searchsorted(self.times[:-1], t, side="right") - 1
        return path[k] + indicator[k] * (t - self.times[k])[..., None]

    def busy_at(self, t):
        return self.integral_at(self.B, t, self.Q > 0)

    def full_at(self, t):
        return self.integral_at(self.BF, t, self.Q[:, :self.N] == self.cfg.capacities)


def flow_balance_check(tr):
    """Largest discrepancy between recorded queues and the counter-based
    balance equations, over all epochs and coordinates."""
    N, idx = tr.N, tr.idx
    S, YK = tr.S, tr.YK
    Qr = np.empty_like(tr.Q)
    Qr[:, :N] = tr.q0[:N] - S[:, :N] - YK
    for (j, i, d), k in idx.road_class_index.items():
        # road completions are all routed to the destination station
        Qr[:, i] += S[:, k]
        if d == 1:
            Qr[:, k] = tr.R_first[:, j, i] - S[:, k]
        else:
            Qr[:, k] = tr.R_deflect[:, j, i] - S[:, k]
    if len(Qr) == 0:
        return 0
    return int(np.max(np.abs(Qr - tr.Q)))


def centered_netput(tr, rates, cfg=None, times=None):
    """The centered process ``X`` built from counters, busy times and ``rates``.

    ``rates`` is a :class:`~bikeflow.model.NominalRates`.  Evaluated at every
    recorded epoch, or at ``times`` when given.
    """
    from .srbm import drift_vector

    cfg = cfg or tr.cfg
    N, idx = cfg.N, tr.idx
    b = rates.full()
    theta = drift_vector(cfg, rates, idx)
    p = np.asarray(cfg.first_routing, float)
    a = np.asarray(cfg.deflect_routing, float)
    if times is None:
        t, S, B = tr.times, tr.S.astype(float), tr.B
        Rf, Rd, YK = tr.R_first, tr.R_deflect, tr.YK
    else:
        t = np.asarray(times, float)
        S = tr.at(tr.S, t).astype(float)
        B = tr.busy_at(t)
        Rf, Rd, YK = tr.at(tr.R_first, t), tr.at(tr.R_deflect, t), tr.at(tr.YK, t)
    Stil = S - b * B  # centered service processes
    X = np.empty_like(S)
    X[:, :N] = tr.q0[:N] + theta[:N] * t[:, None] - Stil[:, :N]
    for (j, i, d), k in idx.road_class_index.items():
        X[:, i] += Stil[:, k]
        if d == 1:
            X[:, k] = (Rf[:, j, i] - p[j, i] * S[:, j]) + p[j, i] * Stil[:, j] \
                + theta[k] * t - Stil[:, k]
        else:
            X[:, k] = (Rd[:, j, i] - a[j, i] * YK[:, j]) + theta[k] * t - Stil[:, k]
    return X


def pathwise_decomposition_check(tr, cfg, rates):
    """Largest ``|Q - X - R0 Y0 - RK YK|`` over epochs and coordinates."""
    from .srbm import reflection_matrices

    X = centered_netput(tr, rates, cfg)
    R0, RK = reflection_matrices(cfg, rates, tr.idx)
    resid = tr.Q - X - tr.Y0 @ R0.T - tr.YK @ RK.T
    return float(np.max(np.abs(resid))) if resid.size else 0.0


def long_run_rates(tr):
    """Completions per unit busy time; NaN where a coordinate was never busy.

    :returns: ``(rates, counts, busy)`` arrays over coordinates.
    """
    counts = tr.S[-1].astype(float)
    busy = tr.B[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = np.where(busy > 0, counts / np.where(busy > 0, busy, 1.0), np.nan)
    return rates, counts, busy


def calibrated_rates(cfg, horizon, seed):
    """Operating point read off a calibration run: completions per unit busy
    time, falling back to the configured ``1/mean`` where a coordinate never
    worked.

    :returns: :class:`~bikeflow.model.NominalRates`
    """
    from .model import NominalRates, nominal_rates

    rates, _, _ = long_run_rates(simulate(cfg, horizon, seed))
    b = np.where(np.isnan(rates), nominal_rates(cfg).full(), rates)
    return NominalRates(b[:cfg.N], b[cfg.N:])


def complementarity_check(tr):
    """Violations of the pushing conditions, found from the event log alone.

    Returns a dict with counts of intervals where idle time grew while the
    coordinate was nonempty (or failed to grow over a nonempty interval while
    empty), of blocked returns at stations that were not full just before
    the event, and of decreases of the blocking count.
    """
    Q = tr.Q
    dY0 = np.diff(tr.Y0, axis=0)
    empty = Q[:-1] == 0
    grew = dY0 > 0
    idle_bad = int(np.sum(grew & ~empty) + np.sum(~grew & empty & (tr.dt[:, None] > 0)))
    m = np.flatnonzero(tr.ev_kind == DEFLECT)
    st = tr.idx.dest[tr.ev_node[m]]
    pre = Q[m, st]  # row m is the state before event m (rows are shifted by one)
    block_bad = int(np.sum(pre != tr.cfg.capacities[st]))
    dYK = np.diff(tr.YK, axis=0)
    yk_bad = int(np.sum(dYK < 0))
    return {"idle": idle_bad, "blocking": block_bad, "monotone": yk_bad}


def write_trajectory_csv(tr, path):
    """Write queue, deflection and completion changes in long format."""
    labels = tr.idx.labels()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "coordinate", "value", "kind"])
        for k in range(tr.dim):
            w.writerow(["%.17g" % 0.0, labels[k], int(tr.q0[k]), "Q"])
        Q, S, YK = tr.Q, tr.S, tr.YK
        for m in range(tr.n_events):
            t = "%.17g" % tr.ev_time[m]
            row = m + 1
            kind = tr.ev_kind[m]
            node = int(tr.ev_node[m])
            if kind == LOST:
                w.writerow([t, labels[node], int(tr.lost[row, node]), "LOST"])
                continue
            dst = int(tr.ev_dst[m])
            w.writerow([t, labels[node], int(Q[row, node]), "Q"])
            w.writerow([t, labels[dst], int(Q[row, dst]), "Q"])
            w.writerow([t, labels[node], int(S[row, node]), "S"])
            if kind == DEFLECT:
                st = int(tr.idx.dest[node])
                w.writerow([t, labels[st], int(YK[row, st]), "YK"])
