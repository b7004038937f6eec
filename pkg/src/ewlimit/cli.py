"""Command-line front end.

Subcommands write CSV outputs and a ``manifest.json`` into ``--out``.  Exit
status is 0 on success, 1 when a check fails and 2 on configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import shutil
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, parse_config, parse_fraction
from .diagram import admissible_interval, check_fixed, parse_diagram
from .errors import ConfigError, DiagramSyntaxError, EWLimitError
from .fluctuation import Shape, TestFunction, pair_values
from .limit_model import LimitCovariance, RieszParams, limit_covariance
from .mc_analysis import (K_SE, convergence_report, covariance_matrix_estimate, fit_loglog, gaussianity_diagnostic,
                          replica_mean)
from .noise import CovarianceSpec, TorusGrid, build_sampler, sample_increments
from .rng import Stream
from .solver import Nonlinearity, SolverConfig, run_ensemble

__all__ = ["main", "run", "build_solver_config", "build_test_function"]

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2
MANIFEST = "manifest.json"


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# config -> objects


def build_solver_config(cfg: RunConfig) -> SolverConfig:
    d = cfg["grid.dimension"]
    grid = TorusGrid(d, cfg["grid.n"], float(cfg["grid.h"]))
    cov = CovarianceSpec(float(cfg["cov.kappa"]), d, cfg["cov.profile"], float(cfg["cov.amplitude"]))
    return SolverConfig(float(cfg["solver.beta"]), float(cfg["solver.dt"]),
                        Nonlinearity.parse(cfg["solver.sigma"]), cov, grid)


def build_test_function(cfg: RunConfig) -> TestFunction:
    d = cfg["grid.dimension"]
    center = tuple(float(c) for c in cfg["pairing.center"])
    if len(center) == 1:
        center = center * d
    if len(center) != d:
        raise ValueError(f"pairing.center has {len(center)} coordinates, dimension is {d}")
    return TestFunction(Shape(cfg["pairing.shape"]), center, float(cfg["pairing.scale"]),
                        float(cfg["pairing.plateau"]))


def _fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _chunks(n: int, size: int):
    return [(s, min(size, n - s)) for s in range(0, n, size)]


# ---------------------------------------------------------------------------
# subcommands producing outputs


@dataclass
class Outcome:
    outputs: list = field(default_factory=list)
    ok: bool = True
    clipped: float = 0.0
    inputs: dict = field(default_factory=dict)
    summary: list = field(default_factory=list)


def cmd_noise_selftest(cfg: RunConfig, out: Path, threads: int) -> Outcome:
    """Empirical noise covariance at lags 0 and one lattice step, plus time independence."""
    d = cfg["grid.dimension"]
    grid = TorusGrid(d, cfg["grid.n"], float(cfg["grid.h"]))
    cov = CovarianceSpec(float(cfg["cov.kappa"]), d, cfg["cov.profile"], float(cfg["cov.amplitude"]))
    dt = float(cfg["solver.dt"])
    sampler = build_sampler(grid, cov)
    stream = Stream(cfg["run.seed"]).child(101)
    n_rep = cfg["selftest.replicas"]
    e1 = (1,) + (0,) * (d - 1)

    def batch(args):
        start, size = args
        reps = range(start, start + size)
        w0 = sample_increments(sampler, dt, [stream.at(r, 0) for r in reps])
        w1 = sample_increments(sampler, dt, [stream.at(r, 1) for r in reps])
        axes = tuple(range(1, d + 1))
        shifted = np.roll(w0, -1, axis=1)
        return np.stack([(w0 * w0).mean(axis=axes), (w0 * shifted).mean(axis=axes),
                         (w0 * w1).mean(axis=axes)], axis=1)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        per_rep = np.concatenate(list(pool.map(batch, _chunks(n_rep, cfg["run.batch_size"]))))
    expected = [cov.radial(0.0) * dt, cov.radial(grid.h) * dt, 0.0]
    rows, ok = [], True
    for name, lag, col, exp in zip(("spatial", "spatial", "temporal"), ("0", str(e1), "0"), range(3), expected):
        est = replica_mean(per_rep[:, col])
        passed = est.contains(float(exp), K_SE)
        ok &= passed
        rows.append((name, lag, est.mean, est.stderr, float(exp), str(passed).lower()))
    clip_ok = sampler.clipped_mass_fraction <= 1e-3
    rows.append(("clipped_mass_fraction", "", sampler.clipped_mass_fraction, 0.0, 1e-3, str(clip_ok).lower()))
    ok &= clip_ok
    path = out / "noise_selftest.csv"
    _write_csv(path, ["quantity", "lag", "mc", "mc_se", "expected", "pass"], rows)
    summary = [f"{r[0]} lag {r[1] or '-'}: {r[2]:.6g} +- {r[3]:.2g} (expected {r[4]:.6g}) {'ok' if r[5] == 'true' else 'FAIL'}"
               for r in rows]
    return Outcome([path.name], ok, sampler.clipped_mass_fraction, summary=summary)


def cmd_simulate(cfg: RunConfig, out: Path, threads: int) -> Outcome:
    """Ensemble of pairings ``<u_eps(t_i) - 1, g>`` for each configured ``eps``."""
    config = build_solver_config(cfg)
    g = build_test_function(cfg)
    kappa = float(cfg["cov.kappa"])
    times = cfg["pairing.times"]
    n_rep = cfg["run.replicas"]
    base = Stream(cfg["run.seed"])
    rows = []
    for k, eps in enumerate(cfg["pairing.epsilons"]):
        e = float(eps)
        micro = [t / eps**2 for t in times]
        stream = base.child(k + 1)

        def observe(values, _t, e=e):
            return pair_values(values, config.grid, g, e, kappa)

        def batch(args, micro=micro, stream=stream, observe=observe):
            start, size = args
            return run_ensemble(config, float(max(micro)), [float(m) for m in micro], stream, size,
                                observe=observe, batch_size=size, first_replica=start)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(batch, _chunks(n_rep, cfg["run.batch_size"])))
        per_time = [np.concatenate([p[i] for p in parts]) for i in range(len(times))]
        for r in range(n_rep):
            for i, t in enumerate(times):
                rows.append((eps, r, i, t, g.label, float(per_time[i][r])))
    path = out / "samples.csv"
    _write_csv(path, ["epsilon", "replica", "i", "t", "g", "value"], rows)
    return Outcome([path.name], True, config.sampler.clipped_mass_fraction,
                   summary=[f"{n_rep} replicas x {len(cfg['pairing.epsilons'])} epsilons -> {path.name}"])


def cmd_limit_cov(cfg: RunConfig, out: Path, threads: int) -> Outcome:
    """Limit covariance of ``(<U(t_i), g>)_i``."""
    g = build_test_function(cfg)
    params = RieszParams(float(cfg["cov.kappa"]), cfg["grid.dimension"])
    cov = limit_covariance(float(cfg["solver.beta"]), float(cfg["limit.nu_eff"]),
                           [(float(t), g) for t in cfg["pairing.times"]], params, float(cfg["limit.rtol"]))
    path = out / "limit_cov.csv"
    cov.to_csv(path)
    return Outcome([path.name], True, 0.0, summary=[f"{len(cov)}x{len(cov)} covariance -> {path.name}"])


def _read_samples(path: Path) -> dict:
    data: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            eps = parse_fraction(row["epsilon"])
            data.setdefault(eps, {}).setdefault(int(row["replica"]), {})[int(row["i"])] = float(row["value"])
    out = {}
    for eps, reps in data.items():
        m = max(max(v) for v in reps.values()) + 1
        out[eps] = np.array([[reps[r][i] for i in range(m)] for r in sorted(reps)])
    return out


def _read_limit(path: Path) -> LimitCovariance:
    entries = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            entries[(int(row["i"]), int(row["j"]))] = float(row["sigma_ij"])
    n = max(i for i, _ in entries) + 1
    return LimitCovariance.from_matrix([[entries[(i, j)] for j in range(n)] for i in range(n)])


def cmd_analyze(cfg: RunConfig, out: Path, threads: int) -> Outcome:
    """Compare MC covariances with the limit and fit the discrepancy trend."""
    spath, lpath = Path(cfg["analyze.samples"]), Path(cfg["analyze.limit"])
    for p in (spath, lpath):
        if not p.is_file():
            raise ConfigError(f"input file {p} does not exist")
    samples = _read_samples(spath)
    limit = _read_limit(lpath)
    mc = {float(eps): covariance_matrix_estimate(x) for eps, x in samples.items()}
    report = convergence_report(mc, limit, float(cfg["analyze.slack"]))
    cpath = out / "covariance.csv"
    _write_csv(cpath, ["epsilon", "i", "j", "mc", "mc_se", "limit", "discrepancy"], report["rows"])
    fits = []
    for (i, j) in sorted(report["decreasing"]):
        pts = [(r[0], r[6]) for r in report["rows"] if (r[1], r[2]) == (i, j)]
        if len(pts) >= 3 and all(dv > 0 for _, dv in pts):
            f = fit_loglog([p[0] for p in pts], [p[1] for p in pts])
            fits.append((f"discrepancy_{i}_{j}", f.slope, f.slope_stderr, f.intercept, f.r_squared, f.n))
    fpath = out / "fits.csv"
    _write_csv(fpath, ["name", "slope", "slope_se", "intercept", "r2", "n"], fits)
    ok = all(report["decreasing"].values())
    summary = [f"entry {k}: discrepancy {'non-increasing' if v else 'INCREASING'}"
               for k, v in sorted(report["decreasing"].items())]
    for eps, x in sorted(samples.items(), reverse=True):
        for i, gd in enumerate(gaussianity_diagnostic(x)):
            summary.append(f"eps {eps} component {i}: skew {gd['skew']:+.3f}, excess kurtosis "
                           f"{gd['excess_kurtosis']:+.3f}, normaltest p {gd['normaltest_p']:.3g} (informational)")
    return Outcome([cpath.name, fpath.name], ok, 0.0,
                   {str(spath.resolve()): _sha256(spath), str(lpath.resolve()): _sha256(lpath)}, summary)


RUNNERS = {
    "noise-selftest": cmd_noise_selftest,
    "simulate": cmd_simulate,
    "limit-cov": cmd_limit_cov,
    "analyze": cmd_analyze,
}


def execute(subcommand: str, cfg: RunConfig, out: Path, threads: int = 1) -> tuple[int, dict]:
    """Run a subcommand into ``out`` and write its manifest."""
    out.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        outcome = RUNNERS[subcommand](cfg, out, max(1, int(threads)))
    manifest = {
        "subcommand": subcommand,
        "artifact_version": __version__,
        "config_hash": cfg.hash(),
        "config": cfg.serialize(),
        "master_seed": cfg["run.seed"],
        "threads": int(threads),
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": [{"path": p, "sha256": _sha256(out / p)} for p in outcome.outputs],
        "inputs": [{"path": p, "sha256": h} for p, h in outcome.inputs.items()],
        "clipped_mass_fraction": outcome.clipped,
        "warnings": sorted({f"{w.category.__name__}: {w.message}" for w in caught}),
        "ok": outcome.ok,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    manifest["summary"] = outcome.summary
    return (EXIT_OK if outcome.ok else EXIT_CHECK), manifest


def cmd_reproduce(manifest_path: Path, out: Path | None, threads: int) -> tuple[int, list[str]]:
    """Re-execute a manifest's run and compare output hashes."""
    try:
        m = json.loads(Path(manifest_path).read_text())
        subcommand, cfg = m["subcommand"], parse_config(m["config"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"unreadable manifest {manifest_path}: {exc}") from None
    if cfg.hash() != m["config_hash"]:
        raise ConfigError("manifest config does not match its hash")
    lines = []
    for item in m.get("inputs", []):
        p = Path(item["path"])
        if not p.is_file() or _sha256(p) != item["sha256"]:
            lines.append(f"input {p}: missing or changed")
            return EXIT_CHECK, lines
    tmp = None
    if out is None:
        tmp = Path(tempfile.mkdtemp(prefix="ewlimit-reproduce-"))
        out = tmp
    try:
        execute(subcommand, cfg, out, threads)
        ok = True
        for item in m["outputs"]:
            got = _sha256(out / item["path"]) if (out / item["path"]).is_file() else "missing"
            same = got == item["sha256"]
            ok &= same
            lines.append(f"{item['path']}: {'identical' if same else 'DIFFERS'}")
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    return (EXIT_OK if ok else EXIT_CHECK), lines


# ---------------------------------------------------------------------------
# diagram-check


def cmd_diagram_check(args) -> tuple[int, str]:
    text = sys.stdin.read() if args.diagram == "-" else Path(args.diagram).read_text()
    kappa = parse_fraction(args.kappa) if args.kappa is not None else None
    diagram = parse_diagram(text, kappa=kappa, dim=args.dim, name=Path(args.diagram).stem)
    if args.lam is not None:
        lam = parse_fraction(args.lam)
        v = check_fixed(diagram, lam)
        if args.json:
            body = {"status": v.status.value, "lambda": str(lam),
                    "degree": None if v.degree is None else str(v.degree),
                    "witness": _witness_json(diagram, v.witness, v.status.value)}
            return (EXIT_OK if v.integrable else EXIT_CHECK), json.dumps(body, sort_keys=True)
        return (EXIT_OK if v.integrable else EXIT_CHECK), v.describe(diagram)
    res = admissible_interval(diagram)
    if args.json:
        body = {"intervals": [{"lo": _q(i.lo), "hi": _q(i.hi)} for i in res.intervals],
                "interval": str(res), "lower_witness": _constraint_json(diagram, res.lower_witness),
                "upper_witness": _constraint_json(diagram, res.upper_witness)}
        return (EXIT_CHECK if res.empty else EXIT_OK), json.dumps(body, sort_keys=True)
    lines = [str(res)]
    for tag, w in (("lower", res.lower_witness), ("upper", res.upper_witness)):
        if w is not None:
            lines.append(f"{tag} endpoint set by {_constraint_text(diagram, w)}")
    return (EXIT_CHECK if res.empty else EXIT_OK), "\n".join(lines)


def _q(x):
    return None if x is None else str(x)


def _edges_text(diagram, subset):
    return "{" + ", ".join(f"{diagram.edges[i].tail}-{diagram.edges[i].head}" for i in subset) + "}"


def _constraint_text(diagram, w) -> str:
    kind, obj = w
    if kind == "subgraph":
        return f"subgraph {_edges_text(diagram, obj)}"
    return "partition " + " | ".join("{" + ", ".join(b) + "}" for b in obj)


def _constraint_json(diagram, w):
    if w is None:
        return None
    kind, obj = w
    if kind == "subgraph":
        return {"kind": kind, "edges": [[diagram.edges[i].tail, diagram.edges[i].head] for i in obj]}
    return {"kind": kind, "blocks": [list(b) for b in obj]}


def _witness_json(diagram, witness, status):
    if witness is None:
        return None
    return _constraint_json(diagram, ("subgraph" if status == "FailsSmallScale" else "partition", witness))


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ewlimit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("config", help="key = value configuration file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
        sp.add_argument("--kappa", help="override cov.kappa, e.g. 5/2")
        sp.add_argument("--dim", type=int, help="override grid.dimension")
        sp.add_argument("--json", action="store_true", help="print the manifest as JSON")

    for name in RUNNERS:
        common(sub.add_parser(name, help=RUNNERS[name].__doc__.splitlines()[0]))
    rp = sub.add_parser("reproduce", help="re-run a manifest and verify output hashes")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--out", default=None, help="keep re-run outputs here (default: temporary)")
    rp.add_argument("--threads", type=int, default=1)
    rp.add_argument("--json", action="store_true")
    dp = sub.add_parser("diagram-check", help="power counting for a diagram file ('-' for stdin)")
    dp.add_argument("diagram")
    dp.add_argument("--kappa", help="value substituted for K, e.g. 5/2")
    dp.add_argument("--dim", type=int, default=3)
    dp.add_argument("--interval", action="store_true", help="print the admissible interval (default)")
    dp.add_argument("--lambda", dest="lam", help="check at a fixed exact value instead")
    dp.add_argument("--json", action="store_true")
    return p


def run(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.subcommand == "diagram-check":
            code, text = cmd_diagram_check(args)
            print(text)
            return code
        if args.subcommand == "reproduce":
            code, lines = cmd_reproduce(Path(args.manifest), None if args.out is None else Path(args.out),
                                        args.threads)
            print(json.dumps({"ok": code == EXIT_OK, "files": lines}) if args.json else "\n".join(lines))
            return code
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            overrides["run__seed"] = args.seed
        if args.kappa is not None:
            overrides["cov__kappa"] = parse_fraction(args.kappa)
        if args.dim is not None:
            overrides["grid__dimension"] = args.dim
        cfg = cfg.with_overrides(**overrides)
        _validate(args.subcommand, cfg)
        code, manifest = execute(args.subcommand, cfg, Path(args.out), args.threads)
        if args.json:
            print(json.dumps(manifest, indent=2, sort_keys=True))
        else:
            print("\n".join(manifest["summary"]))
            print(f"{'ok' if code == EXIT_OK else 'CHECK FAILED'}: outputs in {args.out}")
        return code
    except (ConfigError, DiagramSyntaxError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EWLimitError as exc:
        print(f"check failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK


def _validate(subcommand: str, cfg: RunConfig) -> None:
    """Build every object a run needs so bad values surface as config errors."""
    try:
        if subcommand in ("simulate", "noise-selftest"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                config = build_solver_config(cfg)
            config.sampler  # noqa: B018  (raises on a too small grid)
        if subcommand in ("simulate", "limit-cov"):
            build_test_function(cfg)
            RieszParams(float(cfg["cov.kappa"]), cfg["grid.dimension"])
        if subcommand == "simulate":
            for eps in cfg["pairing.epsilons"]:
                for t in cfg["pairing.times"]:
                    steps = t / eps**2 / cfg["solver.dt"]
                    if steps.denominator != 1 or steps <= 0:
                        raise ValueError(f"t/eps^2 = {t / eps ** 2} is not a positive multiple of dt")
        for key in ("run.replicas", "run.batch_size", "selftest.replicas"):
            if cfg[key] < 1:
                raise ValueError(f"{key} must be positive")
    except EWLimitError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
