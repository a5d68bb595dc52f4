"""Reflected Brownian motion data for the bike network and a box simulator.

The state is the per-class vector laid out by :func:`bikeflow.model.index_for`.
Lower faces ``{x_k = 0}`` reflect along the columns of ``R0``; the upper
face of a station ``{x_j = K_j}`` reflects along column ``j`` of ``RK``.
Upper road faces carry no reflection and are never pushed on.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import linprog

from .model import index_for

S_TOL = 1e-9
PSD_TOL = 1e-10


# --------------------------------------------------------------------------
# assembly

def _split(cfg, rates, idx):
    b = rates.full()
    p = np.asarray(cfg.first_routing, float)
    a = np.asarray(cfg.deflect_routing, float)
    return b, p, a


def drift_vector(cfg, rates, idx=None):
    """Drift of the centered netput.

    Station ``j``: total road completion rate into ``j`` minus ``b_j``.
    Class-1 road ``j -> i``: ``p[j, i] b_j - b``.  Class-2 road: ``-b``.
    """
    idx = idx or index_for(cfg.N)
    b, p, _ = _split(cfg, rates, idx)
    N = cfg.N
    th = np.zeros(idx.dim)
    th[:N] = -b[:N]
    for (j, i, d), k in idx.road_class_index.items():
        th[i] += b[k]
        th[k] = p[j, i] * b[j] - b[k] if d == 1 else -b[k]
    return th


def reflection_matrices(cfg, rates, idx=None):
    """``(R0, RK)`` such that ``Q = X + R0 Y0 + RK YK``.

    Column ``k`` of ``R0`` is the effect of one unit of idle time at
    coordinate ``k``; column ``j`` of ``RK`` is the effect of one blocked
    return at station ``j``.  Every column sums to zero (bikes are conserved).
    """
    idx = idx or index_for(cfg.N)
    b, p, a = _split(cfg, rates, idx)
    N, dim = cfg.N, idx.dim
    R0 = np.zeros((dim, dim))
    RK = np.zeros((dim, N))
    for j in range(N):
        R0[j, j] = b[j]
        RK[j, j] = -1.0
    for (j, i, d), k in idx.road_class_index.items():
        R0[k, k] = b[k]
        # an idle road into i withholds its completions from station i
        R0[i, k] = -b[k]
        if d == 1:
            R0[k, j] = -p[j, i] * b[j]
        else:
            RK[k, j] = a[j, i]
    return R0, RK


def primitive_covariances(cfg, rates, idx=None):
    """Covariance rates of the primitive processes, per unit time or count.

    :returns: dict with

      * ``"service"``: diagonal ``b c^2`` over all coordinates;
      * ``"routing"``: list over stations ``l`` of the multinomial matrix
        ``p(delta - p)`` over destinations;
      * ``"deflect_routing"``: the same for the deflection probabilities;
      * ``"road_routing"``: zero matrices (a road always feeds its
        destination station).
    """
    from .model import coordinate_cv

    idx = idx or index_for(cfg.N)
    b, p, a = _split(cfg, rates, idx)
    cv = coordinate_cv(cfg, idx)
    out = {"service": np.diag(b * cv**2)}
    out["routing"] = [np.diag(p[l]) - np.outer(p[l], p[l]) for l in range(cfg.N)]
    out["deflect_routing"] = [np.diag(a[l]) - np.outer(a[l], a[l]) for l in range(cfg.N)]
    out["road_routing"] = [np.zeros((1, 1)) for _ in idx.roads]
    return out


def covariance_matrix(cfg, rates, idx=None):
    """Covariance written entrywise in the closed form of the model's
    diffusion limit.

    Station diagonal: inflow service variability plus ``b c_a^2``; station
    to own class-1 roads: ``p b c_a^2``; class-1 road diagonal: multinomial
    term plus ``p b c_a^2`` plus its own service term; class-2 diagonal:
    deflection multinomial term plus service term.  See
    :func:`covariance_from_primitives` for the version composed from the
    primitive processes, which is the one used for simulation.
    """
    from .model import coordinate_cv

    idx = idx or index_for(cfg.N)
    b, p, a = _split(cfg, rates, idx)
    cv = coordinate_cv(cfg, idx)
    N = cfg.N
    G = np.zeros((idx.dim, idx.dim))
    for j in range(N):
        G[j, j] = b[j] * cv[j] ** 2
    for (j, i, d), k in idx.road_class_index.items():
        G[i, i] += b[k] * cv[k] ** 2
        if d == 1:
            cross = p[j, i] * b[j] * cv[j] ** 2
            G[j, k] = G[k, j] = cross
            G[k, k] = b[j] * p[j, i] * (1 - p[j, i]) + cross + b[k] * cv[k] ** 2
        else:
            G[k, k] = b[j] * a[j, i] * (1 - a[j, i]) + b[k] * cv[k] ** 2
    return G


def covariance_from_primitives(cfg, rates, idx=None):
    """Covariance of the Brownian limit of the centered netput, obtained by
    pushing the independent primitive covariances through the linear map
    from primitives to netput.

    The deflection routing noise is driven by the blocking count, which is
    negligible on the diffusion scale, and therefore does not appear.
    """
    idx = idx or index_for(cfg.N)
    b, p, _ = _split(cfg, rates, idx)
    prim = primitive_covariances(cfg, rates, idx)
    N, dim = cfg.N, idx.dim
    first = [k for (j, i, d), k in idx.road_class_index.items() if d == 1]
    n_w = dim + len(first)
    # primitives: services of every coordinate, then routing of each class-1 road
    M = np.zeros((dim, n_w))
    for j in range(N):
        M[j, j] = -1.0
    for (j, i, d), k in idx.road_class_index.items():
        M[i, k] += 1.0
        M[k, k] = -1.0
        if d == 1:
            M[k, j] = p[j, i]
    W = np.zeros((n_w, n_w))
    W[:dim, :dim] = prim["service"]
    col = {k: dim + m for m, k in enumerate(first)}
    for k in first:
        M[k, col[k]] = 1.0
        for k2 in first:
            j, j2 = idx.origin[k], idx.origin[k2]
            if j == j2:
                W[col[k], col[k2]] = b[j] * prim["routing"][j][idx.dest[k], idx.dest[k2]]
    G = M @ W @ M.T
    return 0.5 * (G + G.T)


class CovarianceError(ValueError):
    """Covariance matrix is asymmetric or not positive semidefinite."""


def check_covariance(G, tol=PSD_TOL):
    """Raise ``CovarianceError`` unless ``G`` is symmetric and PSD within ``tol``."""
    G = np.asarray(G, float)
    if G.shape[0] != G.shape[1]:
        raise ValueError("covariance must be square")
    if np.max(np.abs(G - G.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(G), initial=0.0)):
        raise CovarianceError("covariance is not symmetric")
    if G.size and np.linalg.eigvalsh(G).min() < -tol:
        raise CovarianceError(f"covariance not PSD: min eigenvalue {np.linalg.eigvalsh(G).min():.3g}")


def psd_sqrt(G, tol=PSD_TOL):
    """Factor ``L`` with ``L L^T = G`` via a clamped eigendecomposition."""
    check_covariance(G, tol)
    w, V = np.linalg.eigh(G)
    w = np.where(w < 0, 0.0, w)
    return V * np.sqrt(w)


@dataclass(eq=False)
class SrbmParams:
    """Data of a reflected Brownian motion in a box ``[lower, upper]``.

    ``R0`` has one column per coordinate (its lower face); ``RK`` has one
    column per station (its upper face).  Stations are the first
    ``RK.shape[1]`` coordinates.
    """

    theta: np.ndarray
    gamma: np.ndarray
    R0: np.ndarray
    RK: np.ndarray
    upper: np.ndarray
    x0: np.ndarray = None
    labels: list = None
    lower: np.ndarray = field(default=None)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, float)
        self.gamma = np.atleast_2d(np.asarray(self.gamma, float))
        self.R0 = np.atleast_2d(np.asarray(self.R0, float))
        self.RK = np.asarray(self.RK, float).reshape(self.dim, -1)
        self.upper = np.asarray(self.upper, float)
        self.lower = np.zeros(self.dim) if self.lower is None else np.asarray(self.lower, float)
        self.x0 = self.lower.copy() if self.x0 is None else np.asarray(self.x0, float)
        if self.labels is None:
            self.labels = [f"x{k}" for k in range(self.dim)]

    @property
    def dim(self):
        return len(self.theta)

    @property
    def n_stations(self):
        return self.RK.shape[1]

    @property
    def normals(self):
        return np.vstack([np.eye(self.dim), -np.eye(self.dim)])

    def faces(self):
        """Faces that can push: ``(coord, sign, bound, vector)`` tuples.

        Lower faces need a positive diagonal entry in ``R0``; upper faces
        exist for stations with a finite cap.
        """
        out = []
        for k in range(self.dim):
            if self.R0[k, k] > 0:
                out.append((k, 1.0, self.lower[k], self.R0[:, k]))
        for j in range(self.n_stations):
            if np.isfinite(self.upper[j]) and self.RK[j, j] < 0:
                out.append((j, -1.0, self.upper[j], self.RK[:, j]))
        return out

    def face_labels(self):
        return [("lo:" if s > 0 else "up:") + self.labels[c] for c, s, _, _ in self.faces()]

    def to_dict(self):
        return {
            "theta": self.theta.tolist(), "gamma": self.gamma.tolist(),
            "R0": self.R0.tolist(), "RK": self.RK.tolist(),
            "upper": [float(u) for u in self.upper], "lower": self.lower.tolist(),
            "x0": self.x0.tolist(), "labels": list(self.labels),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(theta=d["theta"], gamma=d["gamma"], R0=d["R0"], RK=d["RK"],
                   upper=d["upper"], x0=d.get("x0"), labels=d.get("labels"),
                   lower=d.get("lower"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"malformed params {path}: {exc}") from exc


def srbm_params(cfg, rates, idx=None, gamma="primitives", scale=1.0, x0=None):
    """Assemble :class:`SrbmParams` for ``cfg`` at the operating point ``rates``.

    :param gamma: ``"primitives"`` (default, conserves the bike total) or
        ``"closed_form"`` for :func:`covariance_matrix`.
    :param scale: divides the box caps and ``x0`` (use ``sqrt(n)`` for a
        member of a heavy-traffic family).
    """
    idx = idx or index_for(cfg.N)
    G = covariance_from_primitives(cfg, rates, idx) if gamma == "primitives" \
        else covariance_matrix(cfg, rates, idx)
    R0, RK = reflection_matrices(cfg, rates, idx)
    from .model import box_upper

    up = box_upper(cfg, idx) / scale
    if x0 is None:
        x0 = np.zeros(idx.dim)
        x0[:cfg.N] = cfg.initial_bikes / scale
    return SrbmParams(drift_vector(cfg, rates, idx), G, R0, RK, up, x0=x0, labels=idx.labels())


# --------------------------------------------------------------------------
# S-matrices and vertex geometry

def is_s_matrix(A, tol=S_TOL):
    """True iff some ``x >= 0`` has ``A x > 0`` componentwise.

    Solved as the LP ``max s`` subject to ``A x >= s``, ``0 <= x <= 1``.
    """
    A = np.atleast_2d(np.asarray(A, float))
    m = A.shape[0]
    if m == 0:
        return True
    scale = np.max(np.abs(A))
    if scale == 0:
        return False
    A = A / scale
    c = np.zeros(A.shape[1] + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-A, np.ones((m, 1))])
    bounds = [(0.0, 1.0)] * A.shape[1] + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(m), bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    return -res.fun > tol


@dataclass
class GeometryReport:
    mode: str
    checked: int
    failures: list
    sampled: bool = False

    @property
    def passed(self):
        return not self.failures

    def summary(self):
        if self.passed:
            return f"all maximal face sets pass ({self.checked} checked, mode={self.mode})"
        return f"{len(self.failures)} of {self.checked} maximal face sets fail (mode={self.mode})"


def vertex_matrix(params, lower_set, upper_set):
    """``(N R)`` restricted to the given lower/upper faces.

    Upper faces of non-station coordinates get a zero reflection column.
    """
    faces = [(k, 1.0) for k in lower_set] + [(k, -1.0) for k in upper_set]
    cols = []
    for k, s in faces:
        if s > 0:
            cols.append(params.R0[:, k])
        elif k < params.n_stations:
            cols.append(params.RK[:, k])
        else:
            cols.append(np.zeros(params.dim))
    V = np.array(cols).T
    rows = np.array([s * V[k] for k, s in faces])
    return rows


def _box_vertices(params):
    # stations free, roads on their lower face; all-stations-full excluded
    ns, dim = params.n_stations, params.dim
    roads = list(range(ns, dim))
    for bits in itertools.product((0, 1), repeat=ns):
        if ns and all(bits):
            continue
        lo = [j for j in range(ns) if not bits[j]] + roads
        up = [j for j in range(ns) if bits[j]]
        yield lo, up


def _conserved_vertices(params, total, rng=None, n_samples=None):
    # vertices of box ∩ {sum x = total}: all but one coordinate on a bound
    dim = params.dim
    lo_b, up_b = params.lower, np.minimum(params.upper, total)
    seen = set()

    def candidates():
        if n_samples is None:
            for free in range(dim):
                for bits in itertools.product((0, 1), repeat=dim - 1):
                    yield free, bits
        else:
            # random upper sets that fit under the total, remainder on a random free coordinate
            for _ in range(n_samples):
                room = total - lo_b.sum()
                at_up = np.zeros(dim, bool)
                for k in rng.permutation(dim):
                    span = up_b[k] - lo_b[k]
                    if span <= room and rng.random() < 0.5:
                        at_up[k] = True
                        room -= span
                rest = np.flatnonzero(~at_up)
                if len(rest) == 0:
                    continue
                free = int(rng.choice(rest))
                yield free, tuple(int(at_up[k]) for k in range(dim) if k != free)

    for free, bits in candidates():
        others = [k for k in range(dim) if k != free]
        x = np.empty(dim)
        for k, bit in zip(others, bits):
            x[k] = up_b[k] if bit else lo_b[k]
        x[free] = total - x[others].sum()
        if x[free] < lo_b[free] - 1e-12 or x[free] > up_b[free] + 1e-12:
            continue
        # a road holding its cap has no reflection direction; such vertices
        # are excluded exactly as in the full-box enumeration
        if np.any(x[params.n_stations:] >= params.upper[params.n_stations:] - 1e-12):
            continue
        lo = tuple(k for k in range(dim) if abs(x[k] - lo_b[k]) <= 1e-12)
        up = tuple(k for k in range(params.n_stations)
                   if abs(x[k] - params.upper[k]) <= 1e-12)
        if (lo, up) in seen:
            continue
        seen.add((lo, up))
        yield list(lo), list(up)


def verify_reflection_geometry(params, mode="conserved", total=None,
                               max_dim=20, n_samples=None, seed=0):
    """Check the S-matrix condition at every vertex of the state space.

    :param mode: ``"conserved"`` (default) enumerates vertices of the box
        intersected with the hyperplane ``sum x = total`` on which the
        network actually lives.  ``"box"`` enumerates vertices of the full
        box with every road on its lower face and not all stations full.
    :param total: conserved total; defaults to ``sum(params.x0)``.
    :param n_samples: sample this many candidate vertices instead of
        enumerating (required when ``dim > max_dim``).
    :returns: :class:`GeometryReport`
    """
    if params.dim > max_dim and n_samples is None:
        raise ValueError(f"dim {params.dim} > {max_dim}: pass n_samples to sample vertices")
    if mode == "box":
        verts = _box_vertices(params)
    elif mode == "conserved":
        total = float(np.sum(params.x0)) if total is None else float(total)
        rng = np.random.default_rng(seed)
        verts = _conserved_vertices(params, total, rng, n_samples)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    failures, checked = [], 0
    for lo, up in verts:
        checked += 1
        A = vertex_matrix(params, lo, up)
        if not is_s_matrix(A):
            failures.append({"lower": lo, "upper": up})
    return GeometryReport(mode, checked, failures, sampled=n_samples is not None)


# --------------------------------------------------------------------------
# simulation

@njit(cache=True)
def _kernel(z, theta, L, dt, xi, fc, fs, fb, V, lower, upper, accumulate_from,
            step0, record_every, rec_z, rec_y, rec_pos, ycum,
            m0, m1, m2, fy0, fy1, fy2, tol, max_sweeps, yk, gk, w, zc):
    dim = z.shape[0]
    nf = fc.shape[0]
    sq = np.sqrt(dt)
    pos = rec_pos
    for s in range(xi.shape[0]):
        step = step0 + s
        acc = step >= accumulate_from
        if acc:
            m0[0] += dt
            for a in range(dim):
                m1[a] += z[a] * dt
                for c in range(dim):
                    m2[a, c] += z[a] * z[c] * dt
        for a in range(dim):
            v = z[a] + theta[a] * dt
            for c in range(dim):
                v += sq * L[a, c] * xi[s, c]
            w[a] = v
        need = False
        for f in range(nf):
            if fs[f] * (w[fc[f]] - fb[f]) < 0.0:
                need = True
                break
        if not need:
            for a in range(dim):
                z[a] = w[a]
        else:
            for a in range(dim):
                zc[a] = w[a]
            for f in range(nf):
                yk[f] = 0.0
            ok = False
            for sweep in range(max_sweeps):
                change = 0.0
                for f in range(nf):
                    g = fs[f] * (zc[fc[f]] - fb[f])
                    mff = fs[f] * V[fc[f], f]
                    new = yk[f] - g / mff
                    if new < 0.0:
                        new = 0.0
                    d = new - yk[f]
                    if d != 0.0:
                        for a in range(dim):
                            zc[a] += V[a, f] * d
                        yk[f] = new
                        if abs(d) > change:
                            change = abs(d)
                worst = 0.0
                for f in range(nf):
                    g = fs[f] * (zc[fc[f]] - fb[f])
                    if -g > worst:
                        worst = -g
                    if yk[f] > 0.0 and abs(g) > worst:
                        worst = abs(g)
                if change <= tol and worst <= tol:
                    ok = True
                    break
            if not ok:
                return -(step + 1), pos
            for a in range(dim):
                v = zc[a]
                if v < lower[a]:
                    v = lower[a]
                if v > upper[a]:
                    v = upper[a]
                z[a] = v
            for f in range(nf):
                y = yk[f]
                if y > 0.0:
                    ycum[f] += y
                    if acc:
                        fy0[f] += y
                        for a in range(dim):
                            mid = 0.5 * (w[a] + z[a])
                            fy1[f, a] += y * mid
                            for c in range(dim):
                                fy2[f, a, c] += y * mid * 0.5 * (w[c] + z[c])
        if (step + 1) % record_every == 0 and pos < rec_z.shape[0]:
            for a in range(dim):
                rec_z[pos, a] = z[a]
            for f in range(nf):
                rec_y[pos, f] = ycum[f]
            pos += 1
    return 0, pos


class LcpNotConverged(RuntimeError):
    pass


@dataclass(eq=False)
class SrbmPath:
    """Recorded samples plus running sums gathered after ``burn_in``.

    ``m0, m1, m2`` are time integrals of ``1, z, z z^T``; for each face
    ``fy0, fy1, fy2`` are push-weighted sums of ``1, z, z z^T`` taken at the
    midpoint of every push segment.
    """

    params: SrbmParams
    dt: float
    T: float
    burn_in: float
    times: np.ndarray
    z: np.ndarray
    pushes: np.ndarray
    face_labels: list
    face_coord: np.ndarray
    face_sign: np.ndarray
    face_vec: np.ndarray
    m0: float
    m1: np.ndarray
    m2: np.ndarray
    fy0: np.ndarray
    fy1: np.ndarray
    fy2: np.ndarray

    @property
    def averaging_time(self):
        return self.m0

    def samples(self, burn_in=None):
        b = self.burn_in if burn_in is None else burn_in
        return self.z[self.times > b]


def simulate_srbm(params, T, dt, seed, x0=None, burn_in=0.0, record_every=None,
                  n_records=None, tol=1e-10, max_sweeps=10_000, chunk=1 << 16):
    """Projected Euler scheme for the reflected diffusion.

    Each step adds ``theta dt + L sqrt(dt) xi`` and then solves the
    complementarity problem for nonnegative face pushes by projected
    Gauss-Seidel.

    :param record_every: steps between recorded samples (default: about
        ``n_records`` samples, 10000 if unset).
    :returns: :class:`SrbmPath`
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    if burn_in >= T:
        raise ValueError("burn_in must be smaller than T")
    L = psd_sqrt(params.gamma)
    dim = params.dim
    n_steps = int(round(T / dt))
    if record_every is None:
        record_every = max(1, n_steps // (n_records or 10_000))
    n_rec = n_steps // record_every
    faces = params.faces()
    nf = len(faces)
    fc = np.array([f[0] for f in faces], np.int64)
    fs = np.array([f[1] for f in faces], float)
    fb = np.array([f[2] for f in faces], float)
    V = np.array([f[3] for f in faces], float).T.reshape(dim, nf).copy()
    z = np.array(params.x0 if x0 is None else x0, float).copy()
    if np.any(z < params.lower - 1e-12) or np.any(z > params.upper + 1e-12):
        raise ValueError("x0 outside the box")
    rec_z = np.zeros((n_rec, dim))
    rec_y = np.zeros((n_rec, nf))
    ycum = np.zeros(nf)
    m0 = np.zeros(1)
    m1 = np.zeros(dim)
    m2 = np.zeros((dim, dim))
    fy0 = np.zeros(nf)
    fy1 = np.zeros((nf, dim))
    fy2 = np.zeros((nf, dim, dim))
    work = (np.zeros(nf), np.zeros(nf), np.zeros(dim), np.zeros(dim))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    acc_from = int(round(burn_in / dt))
    pos = 0
    step = 0
    theta = params.theta.astype(float)
    while step < n_steps:
        m = min(chunk, n_steps - step)
        xi = rng.standard_normal((m, dim))
        code, pos = _kernel(z, theta, L, float(dt), xi, fc, fs, fb, V, params.lower,
                            params.upper, acc_from, step, record_every, rec_z, rec_y,
                            pos, ycum, m0, m1, m2, fy0, fy1, fy2, tol, max_sweeps, *work)
        if code < 0:
            raise LcpNotConverged(
                f"reflection solve did not converge at step {-code}, state {z.tolist()}")
        step += m
    times = dt * record_every * np.arange(1, n_rec + 1)
    return SrbmPath(params=params, dt=float(dt), T=float(T), burn_in=float(burn_in),
                    times=times, z=rec_z, pushes=rec_y, face_labels=params.face_labels(),
                    face_coord=fc, face_sign=fs, face_vec=V.T.copy(), m0=float(m0[0]),
                    m1=m1, m2=m2, fy0=fy0, fy1=fy1, fy2=fy2)


def write_path_csv(path, out):
    """Export recorded samples in the long (time, coordinate, value, kind) form."""
    import csv

    labels = path.params.labels
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "coordinate", "value", "kind"])
        for r in range(len(path.times)):
            t = "%.17g" % path.times[r]
            for k in range(path.params.dim):
                w.writerow([t, labels[k], "%.17g" % path.z[r, k], "Z"])
            for f, lab in enumerate(path.face_labels):
                w.writerow([t, lab, "%.17g" % path.pushes[r, f], "Y"])
