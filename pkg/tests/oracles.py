"""Reference implementations used as test oracles.

They share no code with the package: a brute-force next-event scan for the
network, a grid search for S-matrices, and closed forms for reflected
Brownian motion in one dimension.
"""

import itertools
import math

import numpy as np


def brute_force_network(cfg, horizon, seed, n_batches=20):
    """Scan-for-minimum simulation of the bike network.

    Roads are single-server FCFS queues of bikes, stations lose riders when
    empty, and a bike finding its destination full takes a class-2 road.
    Returns per-batch rental counts per station and per-batch completion
    counts per (origin, dest, class), plus total busy time per road class.
    """
    rng = np.random.default_rng(seed)
    N = cfg.N
    K = [s.capacity for s in cfg.stations]
    bikes = [s.initial_bikes for s in cfg.stations]
    p = np.asarray(cfg.first_routing, float)
    a = np.asarray(cfg.deflect_routing, float)
    roads = [(j, i, d) for j in range(N) for i in range(N) if i != j for d in (1, 2)]
    on_road = {r: 0 for r in roads}
    done_at = {r: math.inf for r in roads}
    busy = {r: 0.0 for r in roads}

    def draw(law):
        return float(law.sample(rng, 1)[0])

    next_arrival = [draw(s.arrival) for s in cfg.stations]
    width = horizon / n_batches
    rentals = np.zeros((n_batches, N))
    completions = {r: np.zeros(n_batches) for r in roads}
    now = 0.0

    def send(r):
        on_road[r] += 1
        if on_road[r] == 1:
            done_at[r] = now + draw(cfg.travel(*r))

    while True:
        t_arr = min(next_arrival)
        r_min = min(roads, key=lambda r: done_at[r])
        t_road = done_at[r_min]
        t = min(t_arr, t_road)
        if t > horizon:
            break
        for r in roads:
            if on_road[r] > 0:
                busy[r] += t - now
        now = t
        batch = min(int(now / width), n_batches - 1)
        if t_road <= t_arr:
            r = r_min
            on_road[r] -= 1
            done_at[r] = now + draw(cfg.travel(*r)) if on_road[r] else math.inf
            completions[r][batch] += 1
            dest = r[1]
            if bikes[dest] < K[dest]:
                bikes[dest] += 1
            else:
                nxt = rng.choice(N, p=a[dest])
                send((dest, int(nxt), 2))
        else:
            j = int(np.argmin(next_arrival))
            next_arrival[j] = now + draw(cfg.stations[j].arrival)
            if bikes[j] > 0:
                bikes[j] -= 1
                rentals[batch, j] += 1
                nxt = rng.choice(N, p=p[j])
                send((j, int(nxt), 1))
    return rentals, completions, busy


def batch_rate(counts, width):
    """Throughput and its batch-means standard error."""
    r = counts / width
    return r.mean(axis=0), r.std(axis=0, ddof=1) / math.sqrt(len(r))


def s_matrix_by_grid(A, steps=60):
    """Search the simplex ``sum x = 1, x >= 0`` on a lattice for ``A x > 0``.

    Positive homogeneity lets the simplex stand in for the orthant.  Also
    returns the best margin found, so callers can skip near-ties.
    """
    A = np.asarray(A, float)
    n = A.shape[1]
    best = -math.inf
    for c in itertools.product(range(steps + 1), repeat=n - 1):
        s = sum(c)
        if s > steps:
            continue
        x = np.array(c + (steps - s,), float) / steps
        best = max(best, float(np.min(A @ x)))
    return best > 0, best


def rbm_cdf(x, theta=-1.0, variance=1.0):
    """Stationary law of 1-D reflected Brownian motion on ``[0, inf)``."""
    rate = -2.0 * theta / variance
    return 1.0 - np.exp(-rate * np.asarray(x, float))


def rbm_moment(k, theta=-1.0, variance=1.0):
    rate = -2.0 * theta / variance
    return math.factorial(k) / rate**k
