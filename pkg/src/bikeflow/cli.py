"""Command-line entry point: ``bikeflow <subcommand> ...``.

Exit codes: 0 success, 2 precondition or validation failure, 3 unreadable or
malformed input, 4 numerical failure.  Every run that writes files also
writes ``manifest.json``; ``bikeflow replay manifest.json`` re-runs it and
compares output digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
LONG_HEADER = ["n", "coordinate", "statistic", "value", "reps", "seed_base"]


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x):
    return "%.17g" % x


def _load_cfg(path):
    from .model import load_config

    try:
        return load_config(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc


def _valid_cfg(path):
    from .model import validate_config

    cfg = _load_cfg(path)
    problems = validate_config(cfg)
    if problems:
        raise CliError(EXIT_INVALID, "\n".join(str(p) for p in problems))
    return cfg


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("BIKEFLOW_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise CliError(EXIT_INVALID, f"BIKEFLOW_SEED is not an integer: {env!r}") from exc


def _out_dir(args):
    d = Path(args.out_dir) if args.out_dir else Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _replay_argv(argv):
    # drop flags that must not change outputs
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--out-dir", "--threads"):
            skip = True
            continue
        if a.startswith("--out-dir=") or a.startswith("--threads="):
            continue
        out.append(a)
    return out


def _manifest(out, args, seed, outputs, config_hash, extra=None):
    m = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "command": _replay_argv(args.argv),
        "seed": seed,
        "config_hash": config_hash,
        "outputs": [{"path": p.name, "sha256": _sha256(p)} for p in outputs],
    }
    if extra:
        m.update(extra)
    _write_json(out / "manifest.json", m)
    return m


def _positive(name, value):
    if not value > 0:
        raise CliError(EXIT_INVALID, f"{name} must be positive, got {value}")


# --------------------------------------------------------------------------
# subcommands

def cmd_validate(args):
    from .model import validate_config

    cfg = _load_cfg(args.config)
    problems = validate_config(cfg)
    for p in problems:
        print(p)
    return EXIT_INVALID if problems else EXIT_OK


def cmd_simulate(args):
    from . import des

    _positive("--horizon", args.horizon)
    cfg = _valid_cfg(args.config)
    seed = _seed(args)
    tr = des.simulate(cfg, args.horizon, seed, road_discipline=args.discipline)
    out = _out_dir(args)
    traj = out / "trajectory.csv"
    des.write_trajectory_csv(tr, traj)
    m = _manifest(out, args, seed, [traj], cfg.digest(),
                  {"horizon": args.horizon, "event_count": tr.n_events,
                   "road_discipline": args.discipline})
    print(f"{tr.n_events} events written to {traj}")
    return EXIT_OK, m


def _theta(args, N):
    vals = [float(v) for v in args.theta.split(",")] if args.theta else [0.0]
    if len(vals) == 1:
        vals = vals * N
    if len(vals) != N:
        raise CliError(EXIT_INVALID, f"--theta needs 1 or {N} values")
    return np.array(vals)


def cmd_sweep(args):
    from . import analysis, scaling

    cfg = _valid_cfg(args.config)
    seed = _seed(args)
    try:
        ns = [int(v) for v in args.ns.split(",")]
    except ValueError as exc:
        raise CliError(EXIT_INVALID, f"bad --ns {args.ns!r}") from exc
    if any(n < 1 for n in ns):
        raise CliError(EXIT_INVALID, "--ns entries must be positive")
    _positive("--reps", args.reps)
    _positive("--T", args.T)
    fam = scaling.ScalingFamily(cfg, _theta(args, cfg.N), class2_rate=args.class2_rate)
    out = _out_dir(args)
    extra = None
    threads = args.threads
    if args.mode == "fluid":
        tab = scaling.fluid_limit_diagnostic(fam, ns, args.T, args.reps, seed, threads=threads)
        path = out / "fluid.csv"
        labels = fam.idx.labels()
        N = cfg.N
        header = (["n", "reps", "seed_base"] + [f"busy_dev:{x}" for x in labels]
                  + [f"blocked:{x}" for x in labels[:N]])
        rows = [[n, args.reps, seed] + [float(v) for v in tab.busy_dev[m]]
                + [float(v) for v in tab.blocked[m]] for m, n in enumerate(tab.ns)]
        _write_csv(path, header, rows)
        extra = out / "fluid_long.csv"
        _write_csv(extra, LONG_HEADER, tab.rows())
    elif args.mode == "martingale":
        rows = []
        grid = np.linspace(0.0, args.T, args.grid)
        for n in ns:
            res = scaling.martingale_diagnostic(fam, n, args.T, args.s, args.reps, seed,
                                                grid=grid, threads=threads)
            labels = fam.idx.labels()
            for a, t in enumerate(grid):
                for k, lab in enumerate(labels):
                    rows.append((n, float(t), lab, float(res.z[a, k]), float(res.mean[a, k]),
                                 float(res.se[a, k]), args.reps, seed))
        path = out / "martingale.csv"
        _write_csv(path, ["n", "t", "coordinate", "z", "mean", "se", "reps", "seed_base"], rows)
    else:
        n = max(ns)
        tab = analysis.diffusion_limit_diagnostic(fam, [n], args.T, args.reps, seed,
                                                  srbm_paths=args.srbm_paths, dt=args.dt,
                                                  threads=threads)
        path = out / "ks.csv"
        header = ["n", "reps", "seed_base"] + [f"ks:{x}" for x in tab.labels]
        _write_csv(path, header, [[n, args.reps, seed] + [float(v) for v in tab.ks[0]]])
        extra = out / "ks_long.csv"
        _write_csv(extra, LONG_HEADER, [r + (args.reps, seed) for r in tab.rows()])
    m = _manifest(out, args, seed, [path] + ([extra] if extra else []), cfg.digest(),
                  {"mode": args.mode, "family": fam.to_dict()})
    print(f"wrote {path}")
    return EXIT_OK, m


def _srbm_inputs(args):
    from . import srbm
    from .model import nominal_rates

    if args.params:
        try:
            params = srbm.SrbmParams.load(args.params)
        except FileNotFoundError as exc:
            raise CliError(EXIT_IO, f"cannot read {args.params}") from exc
        except (ValueError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_IO, f"malformed params {args.params}: {exc}") from exc
        digest = hashlib.sha256(Path(args.params).read_bytes()).hexdigest()
        return params, digest
    if not args.config:
        raise CliError(EXIT_INVALID, "give --params or --config")
    cfg = _valid_cfg(args.config)
    return srbm.srbm_params(cfg, nominal_rates(cfg)), cfg.digest()


def cmd_srbm(args):
    from . import srbm

    _positive("--dt", args.dt)
    _positive("--T", args.T)
    params, digest = _srbm_inputs(args)
    report = srbm.verify_reflection_geometry(
        params, mode=args.geometry,
        n_samples=args.vertex_samples if params.dim > 20 else None)
    print(f"geometry: {report.summary()}")
    seed = _seed(args)
    path = srbm.simulate_srbm(params, args.T, args.dt, seed, burn_in=args.burn_in,
                              n_records=args.records)
    out = _out_dir(args)
    pcsv = out / "srbm_path.csv"
    srbm.write_path_csv(path, pcsv)
    geo = out / "geometry.json"
    _write_json(geo, {"mode": report.mode, "checked": report.checked,
                      "failures": report.failures, "passed": report.passed,
                      "summary": report.summary()})
    pj = out / "params.json"
    params.save(pj)
    m = _manifest(out, args, seed, [pcsv, geo, pj], digest, {"T": args.T, "dt": args.dt})
    return EXIT_OK, m


def cmd_analyze(args):
    from . import analysis, des, srbm
    from .model import index_for

    seed = _seed(args)
    out = _out_dir(args)
    outputs = []
    if args.params or (args.config and args.srbm):
        _positive("--dt", args.dt)
        params, digest = _srbm_inputs(args)
        path = srbm.simulate_srbm(params, args.T, args.dt, seed, burn_in=args.burn_in)
        est = analysis.estimate_stationary(path, args.burn_in)
        bnd = analysis.boundary_measure(path, args.burn_in)
        ns = params.n_stations
        idx = index_for(ns) if params.dim == ns + 2 * ns * (ns - 1) else None
        rep = analysis.performance_measures(est, bnd, idx or _GenericIndex(params), ns)
        center = 0.5 * (params.lower + np.where(np.isfinite(params.upper), params.upper,
                                                 params.lower))
        rows = []
        for f in analysis.quadratic_family(params.dim, center):
            r = analysis.bar_residual(path, f)
            fid = f.name
            rows.append((fid, r.interior, r.boundary, r.residual, r.scale))
            rep.bar_residuals.append({"function": fid, "residual": r.residual, "scale": r.scale})
        bar = out / "bar.csv"
        _write_csv(bar, ["function", "interior", "boundary", "residual", "scale"], rows)
        outputs.append(bar)
    else:
        if not args.config:
            raise CliError(EXIT_INVALID, "give --config or --params")
        _positive("--horizon", args.horizon)
        cfg = _valid_cfg(args.config)
        digest = cfg.digest()
        if args.burn_in >= args.horizon:
            raise CliError(EXIT_INVALID, "--burn-in must be below --horizon")
        tr = des.simulate(cfg, args.horizon, seed)
        est = analysis.estimate_stationary(tr, args.burn_in)
        bnd = analysis.boundary_measure(tr, args.burn_in)
        rep = analysis.performance_measures(est, bnd, tr.idx)
    rj, rc = out / "report.json", out / "report.csv"
    rep.to_json(rj)
    rep.to_csv(rc)
    outputs = [rj, rc] + outputs
    m = _manifest(out, args, seed, outputs, digest)
    print(f"wrote {rj}")
    return EXIT_OK, m


class _GenericIndex:
    # labels-only stand-in for hand-built parameter files
    def __init__(self, params):
        self.N = params.n_stations
        self._labels = list(params.labels)

    def labels(self):
        return self._labels


def cmd_replay(args):
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = list(manifest["command"])
        expected = {o["path"]: o["sha256"] for o in manifest["outputs"]}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_IO, f"cannot read manifest {args.manifest}: {exc}") from exc
    base = Path(args.manifest).resolve().parent
    # inputs recorded relative to the original cwd; fall back to the manifest's folder
    argv = [a if a.startswith("-") or not a.endswith(".json") or Path(a).exists()
            or not (base / a).exists() else str(base / a) for a in argv]
    out = Path(args.out_dir) if args.out_dir else base / "replay"
    extra = ["--out-dir", str(out)]
    if args.threads:
        extra += ["--threads", str(args.threads)]
    code = main(argv + extra)
    if code != EXIT_OK:
        return code
    bad = [p for p, h in expected.items() if not (out / p).exists() or _sha256(out / p) != h]
    for p in bad:
        print(f"mismatch: {p}")
    if bad:
        return EXIT_NUMERIC
    print(f"replay identical: {len(expected)} outputs")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="bikeflow", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", nargs="?" if config == "opt" else None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--threads", type=int, default=os.cpu_count())

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config")

    p = sub.add_parser("simulate", help="run the network simulation")
    common(p)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--discipline", choices=("fcfs", "infinite"), default="fcfs")

    p = sub.add_parser("sweep", help="heavy-traffic diagnostics over scaling levels")
    common(p)
    p.add_argument("--theta", default=None, help="station drifts, comma separated")
    p.add_argument("--ns", default="1,16,256")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--mode", choices=("fluid", "martingale", "diffusion"), default="fluid")
    p.add_argument("--T", type=float, default=5.0)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--grid", type=int, default=11)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--srbm-paths", type=int, default=2000)
    p.add_argument("--class2-rate", type=float, default=0.0)

    for name, helptext in (("srbm", "simulate the reflected diffusion"),
                           ("analyze", "steady-state performance report")):
        p = sub.add_parser(name, help=helptext)
        common(p, config="opt")
        p.add_argument("--params", default=None)
        p.add_argument("--T", type=float, default=1000.0)
        p.add_argument("--dt", type=float, default=1e-2)
        p.add_argument("--burn-in", type=float, default=0.0)
        if name == "srbm":
            p.add_argument("--records", type=int, default=10000)
            p.add_argument("--geometry", choices=("conserved", "box"), default="conserved")
            p.add_argument("--vertex-samples", type=int, default=2000)
        else:
            p.add_argument("--horizon", type=float, default=1e4)
            p.add_argument("--srbm", action="store_true",
                           help="analyze the diffusion built from --config")

    p = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--threads", type=int, default=None)
    return ap


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "sweep": cmd_sweep,
            "srbm": cmd_srbm, "analyze": cmd_analyze, "replay": cmd_replay}


def main(argv=None):
    from .des import HopCapExceeded
    from .srbm import CovarianceError, LcpNotConverged

    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    args.argv = argv
    try:
        res = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (LcpNotConverged, CovarianceError, HopCapExceeded, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return res[0] if isinstance(res, tuple) else res


if __name__ == "__main__":
    sys.exit(main())
