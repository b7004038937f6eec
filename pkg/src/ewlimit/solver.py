"""Exponential-Euler solver for the Itô stochastic heat equation on a torus.

One step is ``u <- S_dt u + beta * sigma(u) * dW``: the exact discrete heat
semigroup ``S_dt`` (spectral multiplier ``exp(-|k|^2 dt / 2)``) followed by
the noise increment weighted by ``sigma`` at the pre-step state.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

from .errors import GridMismatch, NonFinite, StabilityWarning, StationarityNotReached
from .mc_analysis import EstimatorResult, replica_mean
from .noise import CovarianceSpec, NoiseSlice, SpectralSampler, TorusGrid, build_sampler
from .rng import Stream

__all__ = [
    "Nonlinearity",
    "SolverConfig",
    "FieldState",
    "heat_semigroup_step",
    "ito_step",
    "evolve",
    "run_ensemble",
    "simulate_pullback",
    "pullback_discrepancies",
    "estimate_nu_eff",
    "write_snapshot",
    "read_snapshot",
]

MAX_STEPS = 10**7
STABILITY_GATE = 0.1
SNAPSHOT_MAGIC = b"SPDEFLD1"
_HEADER = struct.Struct("<8sIIdd")


@dataclass(frozen=True)
class Nonlinearity:
    """Built-in diffusion coefficients ``sigma``.

    All are Lipschitz on the whole real line.  ``saturating`` is
    ``min(max(u, 0), cap)``: the solver can produce negative values, so the
    clamp at zero extends it continuously below the positive half-line.
    """

    kind: str
    a: float = 0.0
    b: float = 0.0
    cap: float = math.inf

    _KINDS = ("constant", "linear", "affine", "saturating")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown nonlinearity {self.kind!r}")
        if self.kind == "saturating" and not self.cap > 0:
            raise ValueError("cap must be positive")

    @classmethod
    def constant(cls, c: float) -> "Nonlinearity":
        return cls("constant", a=float(c))

    @classmethod
    def linear(cls) -> "Nonlinearity":
        return cls("linear")

    @classmethod
    def affine(cls, a: float, b: float) -> "Nonlinearity":
        return cls("affine", a=float(a), b=float(b))

    @classmethod
    def saturating(cls, cap: float) -> "Nonlinearity":
        return cls("saturating", cap=float(cap))

    @classmethod
    def parse(cls, text: str) -> "Nonlinearity":
        """``linear``, ``constant:c``, ``affine:a,b`` or ``saturating:cap``."""
        name, _, args = text.strip().partition(":")
        vals = [float(v) for v in args.split(",")] if args else []
        if name == "linear" and not vals:
            return cls.linear()
        if name == "constant" and len(vals) == 1:
            return cls.constant(*vals)
        if name == "affine" and len(vals) == 2:
            return cls.affine(*vals)
        if name == "saturating" and len(vals) == 1:
            return cls.saturating(*vals)
        raise ValueError(f"cannot parse nonlinearity {text!r}")

    def __str__(self):
        if self.kind == "constant":
            return f"constant:{self.a!r}"
        if self.kind == "affine":
            return f"affine:{self.a!r},{self.b!r}"
        if self.kind == "saturating":
            return f"saturating:{self.cap!r}"
        return "linear"

    @property
    def lipschitz_constant(self) -> float:
        return {"constant": 0.0, "linear": 1.0, "affine": abs(self.b), "saturating": 1.0}[self.kind]

    def __call__(self, u):
        u = np.asarray(u)
        if self.kind == "constant":
            return np.full_like(u, self.a, dtype=float)
        if self.kind == "linear":
            return u
        if self.kind == "affine":
            return self.a + self.b * u
        return np.clip(u, 0.0, self.cap)


@dataclass(frozen=True)
class SolverConfig:
    beta: float
    dt: float
    nonlinearity: Nonlinearity
    cov: CovarianceSpec
    grid: TorusGrid
    smooth_noise: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.cov.dimension != self.grid.dimension:
            raise GridMismatch("covariance and grid dimensions differ")
        if self.stability_number > STABILITY_GATE:
            warnings.warn(
                f"beta*Lip*sqrt(R(0) dt) = {self.stability_number:.3g} exceeds {STABILITY_GATE}; "
                "reduce dt or beta", StabilityWarning, stacklevel=2)

    @property
    def stability_number(self) -> float:
        return self.beta * self.nonlinearity.lipschitz_constant * math.sqrt(self.cov.variance * self.dt)

    @cached_property
    def sampler(self) -> SpectralSampler:
        return build_sampler(self.grid, self.cov)

    def describe(self) -> dict:
        return {
            "beta": self.beta,
            "dt": self.dt,
            "nonlinearity": str(self.nonlinearity),
            "kappa": float(self.cov.kappa),
            "dimension": self.grid.dimension,
            "amplitude": self.cov.amplitude,
            "profile": self.cov.profile.value,
            "n": self.grid.n,
            "h": self.grid.h,
            "smooth_noise": self.smooth_noise,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True, eq=False)
class FieldState:
    grid: TorusGrid
    time: float
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise GridMismatch(f"values shape {v.shape} does not match grid {self.grid.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def flat(cls, grid: TorusGrid, time: float = 0.0, level: float = 1.0) -> "FieldState":
        return cls(grid, time, np.full(grid.shape, level))


# ---------------------------------------------------------------------------
# stepping kernels (batched over a leading replica axis)


def heat_multiplier(grid: TorusGrid, dt: float) -> np.ndarray:
    return np.exp(-0.5 * grid.wavenumber_squared() * dt)


def _heat(u: np.ndarray, grid: TorusGrid, mult: np.ndarray, workers=None) -> np.ndarray:
    axes = grid.axes
    u_hat = sfft.rfftn(u, axes=axes, workers=workers)
    u_hat *= mult
    return sfft.irfftn(u_hat, s=grid.shape, axes=axes, workers=workers)


class _Stepper:
    def __init__(self, config: SolverConfig, workers=None):
        self.config = config
        self.grid = config.grid
        self.mult = heat_multiplier(config.grid, config.dt)
        self.workers = workers

    def noise(self, generators) -> np.ndarray:
        shape = self.grid.shape
        white = np.empty((len(generators),) + shape)
        for i, gen in enumerate(generators):
            white[i] = gen.standard_normal(shape)
        return self.config.sampler.color(white, self.config.dt, workers=self.workers)

    def step(self, u: np.ndarray, dw: np.ndarray) -> np.ndarray:
        cfg = self.config
        forcing = cfg.beta * cfg.nonlinearity(u) * dw
        if cfg.smooth_noise:
            return _heat(u + forcing, self.grid, self.mult, self.workers)
        return _heat(u, self.grid, self.mult, self.workers) + forcing


def heat_semigroup_step(state: FieldState, dt: float) -> FieldState:
    """Exact torus heat semigroup over time ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    out = _heat(np.asarray(state.values)[None], state.grid, heat_multiplier(state.grid, dt))[0]
    return FieldState(state.grid, state.time + dt, out)


def ito_step(state: FieldState, config: SolverConfig, noise: NoiseSlice) -> FieldState:
    if not math.isclose(noise.dt, config.dt, rel_tol=1e-12):
        raise ValueError(f"noise dt {noise.dt} != solver dt {config.dt}")
    if not (state.grid.same_as(config.grid) and noise.grid.same_as(config.grid)):
        raise GridMismatch("state, noise and config grids must match")
    out = _Stepper(config).step(np.asarray(state.values)[None], np.asarray(noise.values)[None])[0]
    if not np.all(np.isfinite(out)):
        raise NonFinite("non-finite value after one step")
    return FieldState(state.grid, state.time + config.dt, out)


def _snapshot_steps(times: Sequence[float], dt: float, horizon: float) -> list[int]:
    times = [float(t) for t in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("snapshot_times must be sorted")
    if times and (times[0] < 0 or times[-1] > horizon + 1e-12):
        raise ValueError("snapshot_times must lie in [0, horizon]")
    return [int(math.floor(t / dt + 1e-9)) for t in times]


def run_ensemble(config: SolverConfig, horizon: float, snapshot_times: Sequence[float], stream: Stream,
                 n_replicas: int, observe: Callable[[np.ndarray, float], np.ndarray] | None = None,
                 batch_size: int = 16, first_replica: int = 0, workers=None) -> list[np.ndarray]:
    """Evolve ``n_replicas`` independent flat-start trajectories.

    ``observe(values, time)`` receives a ``(batch, n, ..., n)`` block at each
    snapshot and returns one row per replica; results are concatenated in
    replica order.  Replica ``r`` consumes ``stream.at(r, step)``, so the
    output does not depend on ``batch_size`` or ``workers``.
    """
    n_steps = int(round(horizon / config.dt))
    if abs(n_steps * config.dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a multiple of dt")
    if n_steps > MAX_STEPS:
        raise ValueError(f"{n_steps} steps exceeds the limit of {MAX_STEPS}")
    snaps = _snapshot_steps(snapshot_times, config.dt, horizon)
    if observe is None:
        observe = lambda v, t: v.copy()  # noqa: E731
    stepper = _Stepper(config, workers)
    shape = config.grid.shape
    results: list[list[np.ndarray]] = [[] for _ in snaps]
    for start in range(first_replica, first_replica + n_replicas, batch_size):
        reps = range(start, min(start + batch_size, first_replica + n_replicas))
        u = np.ones((len(reps),) + shape)
        for j in range(n_steps + 1):
            for k, s in enumerate(snaps):
                if s == j:
                    results[k].append(np.asarray(observe(u, j * config.dt)))
            if j == n_steps:
                break
            dw = stepper.noise([stream.at(r, j) for r in reps])
            u = stepper.step(u, dw)
            if not np.all(np.isfinite(u)):
                raise NonFinite(f"non-finite value at step {j}", step=j)
    return [np.concatenate(r, axis=0) for r in results]


def evolve(config: SolverConfig, horizon: float, snapshot_times: Sequence[float], stream: Stream,
           replica: int = 0, workers=None) -> list[FieldState]:
    """Single trajectory from ``u = 1``; states at the requested times.

    A requested time is mapped to the last step not after it and the
    returned state carries that step's exact time.
    """
    if horizon == 0:
        return [FieldState.flat(config.grid)]
    steps = _snapshot_steps(snapshot_times, config.dt, horizon)
    blocks = run_ensemble(config, horizon, snapshot_times, stream, 1, first_replica=replica,
                          batch_size=1, workers=workers)
    return [FieldState(config.grid, s * config.dt, b[0]) for s, b in zip(steps, blocks)]


# ---------------------------------------------------------------------------
# pullback runs


def _pullback_steps(config: SolverConfig, K_values: Sequence[float], t: float):
    K = [float(k) for k in K_values]
    if any(b < a for a, b in zip(K, K[1:])) or (K and K[0] < 0):
        raise ValueError("K_values must be sorted and non-negative")
    starts = [-int(round(k / config.dt)) for k in K]
    end = int(round(t / config.dt))
    for k, s in zip(K, starts):
        if abs(-s * config.dt - k) > 1e-9 * max(1.0, k):
            raise ValueError("K values must be multiples of dt")
    if abs(end * config.dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError("t must be a multiple of dt")
    if not starts or end < max(starts):
        raise ValueError("need at least one K and t >= -min(K)")
    return starts, end


def _pullback_block(stepper: _Stepper, stream: Stream, reps: Sequence[int], starts, end) -> np.ndarray:
    """Returns states ``(len(reps), len(starts), n, ..., n)`` at the final time."""
    grid = stepper.grid
    u = np.ones((len(reps), len(starts)) + grid.shape)
    first = min(starts)
    for j in range(first, end):
        active = [k for k, s in enumerate(starts) if s <= j]
        dw = stepper.noise([stream.at(r, j) for r in reps])
        block = u[:, active].reshape((-1,) + grid.shape)
        dwb = np.repeat(dw, len(active), axis=0)
        new = stepper.step(block, dwb)
        if not np.all(np.isfinite(new)):
            raise NonFinite(f"non-finite value at step {j}", step=j)
        u[:, active] = new.reshape((len(reps), len(active)) + grid.shape)
    return u


def simulate_pullback(config: SolverConfig, K_values: Sequence[float], t: float, stream: Stream,
                      replica: int = 0, workers=None) -> list[FieldState]:
    """Runs started flat at times ``-K`` and coupled through common noise.

    Step ``j`` (covering ``[j dt, (j+1) dt)``) always draws from
    ``stream.at(replica, j)``, so overlapping windows see identical noise.
    """
    starts, end = _pullback_steps(config, K_values, t)
    u = _pullback_block(_Stepper(config, workers), stream, [replica], starts, end)[0]
    return [FieldState(config.grid, end * config.dt, u[k]) for k in range(len(starts))]


def pullback_discrepancies(config: SolverConfig, K_values: Sequence[float], t: float, stream: Stream,
                           n_replicas: int, batch_size: int = 8, workers=None) -> np.ndarray:
    """Per-replica spatial mean of ``(u^(K_{j+1}) - u^(K_j))^2`` at time ``t``."""
    starts, end = _pullback_steps(config, K_values, t)
    stepper = _Stepper(config, workers)
    out = []
    for s in range(0, n_replicas, batch_size):
        reps = list(range(s, min(s + batch_size, n_replicas)))
        u = _pullback_block(stepper, stream, reps, starts, end)
        diff = np.diff(u, axis=1)
        out.append((diff**2).reshape(len(reps), len(starts) - 1, -1).mean(axis=2))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# effective variance


def estimate_nu_eff(config: SolverConfig, burn_in: float, n_replicas: int, stream: Stream,
                    batch_size: int = 16, workers=None, tolerance: float = 1e-2) -> EstimatorResult:
    """``|E sigma(u(T, x))|`` at ``T = burn_in``, averaged over sites and replicas.

    The estimate is also formed at ``T/10``; a relative change above
    ``tolerance`` between the two emits :class:`StationarityNotReached` and
    sets ``meta['status']``.  A constant ``sigma`` is returned exactly.
    """
    if burn_in < 1:
        raise ValueError("burn_in must be at least 1")
    sig = config.nonlinearity
    if sig.kind == "constant":
        return EstimatorResult(abs(sig.a), 0.0, n_replicas, {"status": "exact", "time": burn_in})
    early = math.floor(burn_in / 10 / config.dt + 1e-9) * config.dt
    times = [early, burn_in] if early > 0 else [burn_in]
    obs = run_ensemble(config, burn_in, times, stream, n_replicas,
                       observe=lambda v, _t: sig(v).reshape(v.shape[0], -1).mean(axis=1),
                       batch_size=batch_size, workers=workers)
    final = replica_mean(obs[-1])
    meta = {"time": burn_in, "status": "ok"}
    if len(obs) == 2:
        first = replica_mean(obs[0])
        change = abs(final.mean - first.mean) / max(abs(final.mean), 1e-300)
        meta["relative_change"] = change
        if change > tolerance:
            meta["status"] = "StationarityNotReached"
            warnings.warn(f"running estimate moved by {change:.2e} over the last decade",
                          StationarityNotReached, stacklevel=2)
    return EstimatorResult(abs(final.mean), final.stderr, final.n, meta)


# ---------------------------------------------------------------------------
# snapshot files


def write_snapshot(path, state: FieldState, config_hash: str = "", seed: int | None = None) -> Path:
    """Binary dump (little-endian header + row-major float64) and JSON sidecar."""
    path = Path(path)
    g = state.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, g.dimension, g.n, g.h, state.time))
        fh.write(np.ascontiguousarray(state.values, dtype="<f8").tobytes())
    sidecar = {"config_hash": config_hash, "seed": seed, "dimension": g.dimension, "n": g.n,
               "h": g.h, "time": state.time}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_snapshot(path) -> tuple[FieldState, dict]:
    path = Path(path)
    raw = path.read_bytes()
    magic, d, n, h, time = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path} is not a field snapshot")
    grid = TorusGrid(d, n, h)
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(grid.shape)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return FieldState(grid, time, values), sidecar
