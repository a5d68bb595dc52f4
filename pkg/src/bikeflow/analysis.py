"""Stationary estimates, performance measures and distributional checks.

Works on both simulated network trajectories (piecewise-constant integer
paths, averaged by time) and reflected-diffusion paths (equally spaced
samples).  The adjoint-relationship residual uses the running sums kept by
:func:`bikeflow.srbm.simulate_srbm`.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from math import comb

import numpy as np
from scipy import stats

from .des import Trajectory
from .srbm import SrbmPath

BIN_FRACTION = 0.02


@dataclass(eq=False)
class StationaryEstimate:
    """Time-weighted occupancy statistics over ``(burn_in, end]``.

    ``hist_edges[k]`` and ``hist_probs[k]`` describe the marginal of
    coordinate ``k``; for integer paths the bins are the states themselves.
    """

    mean: np.ndarray
    var: np.ndarray
    hist_edges: list
    hist_probs: list
    burn_in: float
    total_time: float
    integer: bool
    box_lower: np.ndarray = None
    box_upper: np.ndarray = None

    @property
    def dim(self):
        return len(self.mean)


def _weighted(values, weights, burn_in, lower, upper, integer, bins):
    tot = weights.sum()
    if tot <= 0:
        raise ValueError("no time left after burn-in")
    w = weights / tot
    mean = w @ values
    var = w @ (values - mean) ** 2
    edges, probs = [], []
    for k in range(values.shape[1]):
        col = values[:, k]
        if integer:
            hi = int(upper[k]) if np.isfinite(upper[k]) else int(col.max())
            e = np.arange(0, hi + 2) - 0.5
            p = np.bincount(col.astype(np.int64), weights=w, minlength=hi + 1)[:hi + 1]
        else:
            hi = upper[k] if np.isfinite(upper[k]) else max(col.max(), lower[k] + 1e-12)
            e = np.linspace(lower[k], hi, bins + 1)
            p, _ = np.histogram(np.clip(col, lower[k], hi), bins=e, weights=w)
        edges.append(e)
        probs.append(p / p.sum() if p.sum() > 0 else p)
    return mean, var, edges, probs, tot


def estimate_stationary(path, burn_in=0.0, bins=None):
    """Occupancy statistics of ``path`` after ``burn_in``.

    ``path`` is a :class:`~bikeflow.des.Trajectory`, a
    :class:`~bikeflow.srbm.SrbmPath`, or a ``(times, values, end)`` tuple
    describing a right-continuous piecewise-constant path on ``[times[0], end]``.
    Continuous marginals use bins of width ``2%`` of the box length
    (``bins`` overrides the count).
    """
    if isinstance(path, Trajectory):
        times, values, end = path.times[:-1], path.Q, path.horizon
        values = values[:-1]
        lower = np.zeros(path.dim)
        from .model import box_upper

        upper = box_upper(path.cfg, path.idx)
        integer = True
    elif isinstance(path, SrbmPath):
        spacing = path.times[1] - path.times[0] if len(path.times) > 1 else path.T
        times, values, end = path.times - spacing, path.z, path.times[-1]
        lower, upper = path.params.lower, path.params.upper
        integer = False
    else:
        times, values, end = path
        times, values = np.asarray(times, float), np.asarray(values, float)
        if values.ndim == 1:
            values = values[:, None]
        lower = np.minimum(values.min(0), 0.0)
        upper = np.full(values.shape[1], np.inf)
        integer = np.issubdtype(values.dtype, np.integer) or np.all(values == np.round(values))
        integer = bool(integer) and values.min() >= 0
    if burn_in >= end:
        raise ValueError(f"burn_in {burn_in} >= path end {end}")
    nxt = np.append(times[1:], end)
    weights = np.clip(nxt, burn_in, None) - np.clip(times, burn_in, None)
    nb = bins or int(round(1 / BIN_FRACTION))
    mean, var, edges, probs, tot = _weighted(values, weights, burn_in, lower, upper, integer, nb)
    return StationaryEstimate(mean, var, edges, probs, burn_in, tot, integer, lower, upper)


def merge_estimates(a, b):
    """Time-weighted combination of two estimates with identical bins."""
    wa, wb = a.total_time, b.total_time
    w = wa + wb
    mean = (wa * a.mean + wb * b.mean) / w
    second = (wa * (a.var + a.mean**2) + wb * (b.var + b.mean**2)) / w
    probs = [(wa * pa + wb * pb) / w for pa, pb in zip(a.hist_probs, b.hist_probs)]
    return StationaryEstimate(mean, second - mean**2, a.hist_edges, probs, a.burn_in, w,
                              a.integer, a.box_lower, a.box_upper)


@dataclass(eq=False)
class BoundaryMeasureEstimate:
    """Pushing per unit time on every face (``labels`` name the faces)."""

    labels: list
    rate: np.ndarray
    total_time: float


def boundary_measure(path, burn_in=0.0):
    """Per-face pushing rates.

    For a network trajectory the lower face of every coordinate accrues idle
    time and the upper face of a station accrues blocked returns.  For a
    diffusion path the recorded cumulative pushes are used.
    """
    if isinstance(path, Trajectory):
        t = np.array([burn_in, path.horizon])
        k = np.searchsorted(path.times[:-1], t, side="right") - 1
        idle = path.integral_at(path.Y0, t, path.Q == 0)
        yk = path.YK[k]
        span = path.horizon - burn_in
        rate = np.concatenate([(idle[1] - idle[0]) / span, (yk[1] - yk[0]) / span])
        labels = ["lo:" + s for s in path.idx.labels()] + \
            ["up:" + s for s in path.idx.labels()[:path.N]]
        return BoundaryMeasureEstimate(labels, rate, span)
    if isinstance(path, SrbmPath):
        keep = path.times > burn_in
        if not np.any(keep):
            raise ValueError("no samples after burn-in")
        first = np.flatnonzero(keep)[0]
        y0 = path.pushes[first - 1] if first > 0 else np.zeros(path.pushes.shape[1])
        span = path.times[-1] - (path.times[first - 1] if first > 0 else 0.0)
        return BoundaryMeasureEstimate(list(path.face_labels), (path.pushes[-1] - y0) / span, span)
    raise TypeError(f"unsupported path type {type(path).__name__}")


@dataclass(eq=False)
class PerformanceReport:
    """Steady-state measures.  Probabilities of continuous marginals are
    boundary-bin masses with bin width ``bin_fraction`` of the box."""

    labels: list
    empty_prob: np.ndarray
    full_prob: np.ndarray
    road_empty_prob: np.ndarray
    road_full_prob: np.ndarray
    mean_queue: np.ndarray
    deflection_rate: np.ndarray
    bin_fraction: float = None
    bar_residuals: list = field(default_factory=list)

    def to_dict(self):
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(_float17(self.to_dict()), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path):
        N = len(self.empty_prob)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["measure", "coordinate", "value"])
            for name in ("empty_prob", "full_prob", "deflection_rate"):
                for j in range(N):
                    w.writerow([name, self.labels[j], "%.17g" % getattr(self, name)[j]])
            for name in ("road_empty_prob", "road_full_prob"):
                for m, v in enumerate(getattr(self, name)):
                    w.writerow([name, self.labels[N + m], "%.17g" % v])
            for k, v in enumerate(self.mean_queue):
                w.writerow(["mean_queue", self.labels[k], "%.17g" % v])


def _float17(obj):
    # round-trip exact floats through repr-free formatting
    if isinstance(obj, float):
        return float("%.17g" % obj)
    if isinstance(obj, dict):
        return {k: _float17(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_float17(v) for v in obj]
    return obj


def performance_measures(est, boundary, idx, n_stations=None):
    """Empty/full probabilities, mean queues and deflection rates.

    ``boundary`` supplies the deflection rate (upper-face pushing of the
    stations); pass ``None`` to report zeros.
    """
    N = n_stations or idx.N
    empty = np.array([p[0] for p in est.hist_probs])
    full = np.array([p[-1] for p in est.hist_probs])
    if est.integer:
        # the last integer bin is the cap itself only when the cap is finite
        full = np.array([p[-1] if np.isfinite(u) and len(p) == int(u) + 1 else 0.0
                         for p, u in zip(est.hist_probs, est.box_upper)])
    defl = np.zeros(N)
    if boundary is not None:
        ups = [m for m, lab in enumerate(boundary.labels) if lab.startswith("up:")]
        lab_to_rate = {boundary.labels[m][3:]: boundary.rate[m] for m in ups}
        names = idx.labels()[:N]
        defl = np.array([lab_to_rate.get(s, 0.0) for s in names])
    return PerformanceReport(
        labels=idx.labels(), empty_prob=empty[:N], full_prob=full[:N],
        road_empty_prob=empty[N:], road_full_prob=full[N:], mean_queue=est.mean.copy(),
        deflection_rate=defl, bin_fraction=None if est.integer else 1.0 / (len(est.hist_probs[0])),
    )


# --------------------------------------------------------------------------
# polynomial test functions and the adjoint-relationship residual

class Polynomial:
    """Polynomial of total degree at most 3 in ``dim`` variables.

    ``terms`` maps exponent tuples to coefficients, written in the shifted
    variable ``x - center``.
    """

    MAX_DEGREE = 3

    def __init__(self, terms, dim, center=None):
        self.dim = int(dim)
        self.center = np.zeros(self.dim) if center is None else np.asarray(center, float)
        self.terms = {}
        for e, c in terms.items():
            e = tuple(int(v) for v in e)
            if len(e) != self.dim or min(e, default=0) < 0:
                raise ValueError(f"bad exponent {e} for dim {self.dim}")
            if sum(e) > self.MAX_DEGREE:
                raise ValueError(f"degree {sum(e)} exceeds {self.MAX_DEGREE}")
            if c != 0:
                self.terms[e] = self.terms.get(e, 0.0) + float(c)

    @classmethod
    def monomial(cls, exponents, center=None):
        return cls({tuple(exponents): 1.0}, len(exponents), center)

    @classmethod
    def constant(cls, c, dim):
        return cls({(0,) * dim: c}, dim)

    @property
    def degree(self):
        return max((sum(e) for e in self.terms), default=0)

    @property
    def name(self):
        """Readable form such as ``x0*x2^2`` (centered variables)."""
        parts = []
        for e, c in sorted(self.terms.items()):
            mono = "*".join(f"x{a}" + (f"^{v}" if v > 1 else "") for a, v in enumerate(e) if v)
            coef = "" if c == 1 and mono else "%g" % c
            parts.append("*".join(p for p in (coef, mono) if p))
        return " + ".join(parts) or "0"

    def expanded(self):
        """Coefficients in the raw variable ``x`` (center folded in)."""
        out = {}
        for e, c in self.terms.items():
            ranges = [range(v + 1) for v in e]
            for sub in itertools.product(*ranges):
                coef = c
                for v, s, x0 in zip(e, sub, self.center):
                    coef *= comb(v, s) * (-x0) ** (v - s)
                if coef != 0:
                    out[sub] = out.get(sub, 0.0) + coef
        return out

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, float)) - self.center
        out = np.zeros(len(x))
        for e, c in self.terms.items():
            out += c * np.prod(x ** np.array(e), axis=1)
        return out


def _deriv(raw, a):
    out = {}
    for e, c in raw.items():
        if e[a] > 0:
            e2 = list(e)
            e2[a] -= 1
            out[tuple(e2)] = out.get(tuple(e2), 0.0) + c * e[a]
    return out


def _expect(raw, s0, s1, s2):
    # sum of coefficients times accumulated monomials of degree <= 2
    tot = 0.0
    for e, c in raw.items():
        nz = [a for a, v in enumerate(e) for _ in range(v)]
        if len(nz) == 0:
            tot += c * s0
        elif len(nz) == 1:
            tot += c * s1[nz[0]]
        elif len(nz) == 2:
            tot += c * s2[nz[0], nz[1]]
        else:
            raise ValueError("derivative degree above 2 needs higher moments")
    return tot


@dataclass
class BarResult:
    residual: float
    scale: float
    interior: float
    diffusion_part: float
    drift_part: float
    boundary: float
    per_face: list

    @property
    def relative(self):
        return abs(self.residual) / self.scale if self.scale > 0 else 0.0


def bar_residual(path, f, params=None):
    """Residual of the basic adjoint relationship for test function ``f``.

    Interior term: time average of ``(1/2) Gamma : Hess f + theta . grad f``.
    Boundary term: pushing on each face per unit time times
    ``v . grad f`` at the push midpoint, ``v`` the face's reflection vector.
    Both are read from the running sums of ``path``.  ``scale`` is the largest
    magnitude among the diffusion part, the drift part and the individual
    face terms, so that cancellation inside either sum does not hide the
    size of what is being balanced.
    """
    if not isinstance(f, Polynomial):
        raise TypeError("f must be a Polynomial of degree <= 3")
    params = params or path.params
    if f.dim != params.dim:
        raise ValueError("dimension mismatch")
    T = path.m0
    if T <= 0:
        raise ValueError("no averaging time in path")
    raw = f.expanded()
    grads = [_deriv(raw, a) for a in range(f.dim)]
    diff = 0.0
    for a in range(f.dim):
        for b in range(f.dim):
            if params.gamma[a, b] != 0:
                h = _deriv(grads[a], b)
                diff += 0.5 * params.gamma[a, b] * _expect(h, path.m0, path.m1, path.m2)
    drift = sum(params.theta[a] * _expect(grads[a], path.m0, path.m1, path.m2)
                for a in range(f.dim))
    faces = []
    for m in range(len(path.fy0)):
        v = path.face_vec[m]
        val = sum(v[a] * _expect(grads[a], path.fy0[m], path.fy1[m], path.fy2[m])
                  for a in range(f.dim) if v[a] != 0)
        faces.append(val / T)
    diff /= T
    drift /= T
    bnd = float(sum(faces))
    res = diff + drift + bnd
    scale = max([abs(diff), abs(drift)] + [abs(v) for v in faces])
    return BarResult(res, scale, diff + drift, diff, drift, bnd, faces)


def quadratic_family(dim, center):
    """All monomials of total degree 1 and 2 centered at ``center``."""
    out = []
    for deg in (1, 2):
        for combo in itertools.combinations_with_replacement(range(dim), deg):
            e = [0] * dim
            for a in combo:
                e[a] += 1
            out.append(Polynomial.monomial(e, center))
    return out


# --------------------------------------------------------------------------
# distribution comparison

def ks_compare(samples_a, samples_b):
    """Two-sample Kolmogorov-Smirnov statistic per coordinate."""
    a = np.asarray(samples_a, float)
    b = np.asarray(samples_b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError("coordinate count mismatch")
    return np.array([stats.ks_2samp(a[:, k], b[:, k]).statistic for k in range(a.shape[1])])


def _des_final_job(args):
    from . import des, scaling

    fam, n, T, seed = args
    tr = des.simulate(scaling.scale_config(fam, n), n * T, seed)
    return tr.Q[-1] / math.sqrt(n)


def srbm_marginals(params, T, dt, n_paths, seed):
    """States at time ``T`` of ``n_paths`` independent diffusion paths."""
    from .srbm import simulate_srbm

    steps = int(round(T / dt))
    out = np.empty((n_paths, params.dim))
    for r in range(n_paths):
        ss = np.random.SeedSequence(int(seed), spawn_key=(r,))
        out[r] = simulate_srbm(params, T, dt, int(ss.generate_state(1)[0]),
                               record_every=steps).z[-1]
    return out


@dataclass(eq=False)
class DiffusionTable:
    ns: list
    T: float
    labels: list
    ks: np.ndarray
    des_mean: np.ndarray
    srbm_mean: np.ndarray

    @property
    def median(self):
        return np.median(self.ks, axis=1)

    def rows(self):
        return [(n, lab, "ks", self.ks[m, k]) for m, n in enumerate(self.ns)
                for k, lab in enumerate(self.labels)]


def diffusion_limit_diagnostic(fam, ns, T, reps, seed, srbm_paths=4000, dt=1e-3, threads=None):
    """KS distances between network states ``Q(nT)/sqrt(n)`` over ``reps``
    runs and diffusion states at ``T`` for each ``n``."""
    from . import scaling

    ks, dm, sm = [], [], []
    for n in ns:
        jobs = [(fam, n, T, scaling._rep_seed(seed, n, r)) for r in range(reps)]
        dq = np.array(scaling._map(_des_final_job, jobs, threads))
        params = scaling.scaled_srbm_params(fam, n)
        sz = srbm_marginals(params, T, dt, srbm_paths, seed + 1_000_003 * n)
        ks.append(ks_compare(dq, sz))
        dm.append(dq.mean(0))
        sm.append(sz.mean(0))
    return DiffusionTable(list(ns), T, fam.idx.labels(), np.array(ks), np.array(dm), np.array(sm))
