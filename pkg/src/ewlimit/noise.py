"""Space-time Gaussian noise on a periodic lattice.

Increments are white in time and carry a stationary spatial covariance
``R``.  Sampling uses approximate circulant embedding: the covariance is
wrapped onto the torus by minimal-image distance, its discrete spectrum is
computed once, and negative eigenvalues (tail-truncation artefacts) are
clipped to zero.  The clipped fraction is recorded and gated.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .errors import ClippedMassExceeded, GridMismatch, GridTooSmall
from .mc_analysis import EstimatorResult

__all__ = [
    "Profile",
    "CovarianceSpec",
    "TorusGrid",
    "SpectralSampler",
    "NoiseSlice",
    "build_sampler",
    "sample_increment",
    "sample_increments",
    "empirical_covariance",
    "MAX_CLIPPED_FRACTION",
]

MAX_CLIPPED_FRACTION = 1e-3
MIN_SIDE_LENGTH = 8.0
MAX_SITES = 2**28


class Profile(enum.Enum):
    INVERSE_POLY = "inverse_poly"
    PURE_RIESZ = "pure_riesz"


@dataclass(frozen=True)
class CovarianceSpec:
    """Spatial covariance ``R`` with decay exponent ``kappa``.

    ``INVERSE_POLY`` is ``amplitude * (1 + |x|^2)^(-kappa/2)``; ``PURE_RIESZ``
    is the scale-free limit ``amplitude * |x|^(-kappa)``, which is singular
    at the origin and only meaningful for the limit model.
    """

    kappa: float
    dimension: int = 3
    profile: Profile = Profile.INVERSE_POLY
    amplitude: float = 1.0

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 3:
            raise ValueError(f"dimension must be an integer >= 3, got {self.dimension}")
        if not 2 < float(self.kappa) < self.dimension:
            raise ValueError(f"kappa must lie in (2, {self.dimension}), got {self.kappa}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        object.__setattr__(self, "profile", Profile(self.profile))

    def radial(self, r):
        """``R`` as a function of ``|x|``."""
        r = np.asarray(r, dtype=float)
        k = float(self.kappa)
        if self.profile is Profile.INVERSE_POLY:
            return self.amplitude * (1.0 + r * r) ** (-0.5 * k)
        with np.errstate(divide="ignore"):
            return self.amplitude * r ** (-k)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.radial(np.sqrt(np.sum(x * x, axis=-1)))

    def rescaled(self, r, epsilon: float):
        """``eps^-kappa R(x/eps)`` at ``|x| = r``; tends to ``|x|^-kappa``."""
        return epsilon ** (-float(self.kappa)) * self.radial(np.asarray(r, dtype=float) / epsilon)

    @property
    def variance(self) -> float:
        """``R(0)``."""
        if self.profile is Profile.PURE_RIESZ:
            return math.inf
        return float(self.amplitude)


@dataclass(frozen=True)
class TorusGrid:
    """Periodic lattice ``(h Z / L Z)^d`` with ``n`` points per axis."""

    dimension: int
    n: int
    h: float

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"points_per_axis must be a power of two >= 8, got {self.n}")
        if self.n**self.dimension > MAX_SITES:
            raise ValueError(f"grid has {self.n ** self.dimension} sites, limit is {MAX_SITES}")
        if not self.h > 0:
            raise ValueError("spacing must be positive")

    @property
    def side_length(self) -> float:
        return self.n * self.h

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dimension

    @property
    def sites(self) -> int:
        return self.n**self.dimension

    @property
    def cell_volume(self) -> float:
        return self.h**self.dimension

    @property
    def axes(self) -> tuple[int, ...]:
        """Spatial axes of a batched array ``(batch, n, ..., n)``."""
        return tuple(range(-self.dimension, 0))

    def minimal_image_coordinates(self) -> np.ndarray:
        """Signed lattice coordinates along one axis, in physical units."""
        j = np.arange(self.n)
        return np.where(j < self.n // 2, j, j - self.n) * self.h

    def minimal_image_radius(self) -> np.ndarray:
        c = self.minimal_image_coordinates()
        r2 = np.zeros(self.shape)
        for axis in range(self.dimension):
            shape = [1] * self.dimension
            shape[axis] = self.n
            r2 = r2 + (c**2).reshape(shape)
        return np.sqrt(r2)

    def wavenumber_squared(self, half: bool = True) -> np.ndarray:
        """``|k|^2`` on the (r)FFT frequency layout, ``k = 2 pi m / L``."""
        k = 2.0 * np.pi * sfft.fftfreq(self.n, d=self.h)
        k_last = 2.0 * np.pi * sfft.rfftfreq(self.n, d=self.h) if half else k
        k2 = np.zeros((self.n,) * (self.dimension - 1) + (k_last.size,))
        for axis in range(self.dimension):
            kk = k_last if axis == self.dimension - 1 else k
            shape = [1] * self.dimension
            shape[axis] = kk.size
            k2 = k2 + (kk**2).reshape(shape)
        return k2

    def same_as(self, other: "TorusGrid") -> bool:
        return (self.dimension, self.n, self.h) == (other.dimension, other.n, other.h)


def _reflect(a: np.ndarray) -> np.ndarray:
    """``a[-k]`` for every multi-index ``k`` (mod n)."""
    out = a
    for axis in range(a.ndim):
        out = np.roll(np.flip(out, axis=axis), 1, axis=axis)
    return out


@dataclass(frozen=True, eq=False)
class SpectralSampler:
    """Immutable square-root-of-spectrum sampler for one grid and covariance.

    ``spectrum`` follows the continuum Fourier convention, ``h^d`` times the
    DFT of the wrapped covariance samples, so ``spectrum[0]`` equals
    ``h^d * sum(R_wrapped)``.  ``eigenvalues`` are those of the circulant
    covariance matrix itself (per unit time), after clipping.
    """

    grid: TorusGrid
    spectrum: np.ndarray
    clipped_mass_fraction: float
    eigenvalues: np.ndarray = field(repr=False)
    covariance_samples: np.ndarray = field(repr=False)
    _sqrt_half: np.ndarray = field(repr=False)

    @classmethod
    def from_covariance_samples(cls, grid: TorusGrid, samples: np.ndarray,
                                max_clipped: float = MAX_CLIPPED_FRACTION) -> "SpectralSampler":
        samples = np.asarray(samples, dtype=float)
        if samples.shape != grid.shape:
            raise GridMismatch(f"covariance samples have shape {samples.shape}, grid is {grid.shape}")
        eig = sfft.fftn(samples).real
        eig = 0.5 * (eig + _reflect(eig))
        total = float(np.abs(eig).sum())
        negative = float(-eig[eig < 0].sum())
        fraction = negative / total if total > 0 else 0.0
        if fraction > max_clipped:
            raise ClippedMassExceeded(
                f"clipped spectral mass fraction {fraction:.3e} exceeds {max_clipped:.1e}"
            )
        eig = np.clip(eig, 0.0, None)
        half = np.sqrt(eig[..., : grid.n // 2 + 1])
        spectrum = eig * grid.cell_volume
        samples = samples.copy()
        for a in (eig, spectrum, half, samples):
            a.setflags(write=False)
        return cls(grid, spectrum, fraction, eig, samples, half)

    def discrete_covariance(self) -> np.ndarray:
        """Covariance actually realised by the sampler, after clipping."""
        return sfft.ifftn(self.eigenvalues).real

    def dalang_sum(self) -> float:
        """Discrete analogue of ``int R^(z) / (1 + |z|^2) dz``."""
        k2 = self.grid.wavenumber_squared(half=False)
        dk = (2.0 * np.pi / self.grid.side_length) ** self.grid.dimension
        return float(np.sum(self.spectrum / (1.0 + k2)) * dk)

    def color(self, white: np.ndarray, dt: float, workers: int | None = None) -> np.ndarray:
        """Map unit white noise (batch, *shape) to correlated increments."""
        axes = self.grid.axes
        w_hat = sfft.rfftn(white, axes=axes, workers=workers)
        w_hat *= self._sqrt_half * math.sqrt(dt)
        return sfft.irfftn(w_hat, s=self.grid.shape, axes=axes, workers=workers)


@dataclass(frozen=True, eq=False)
class NoiseSlice:
    """Noise increment over one time step, integrated against ``[t, t+dt)``."""

    grid: TorusGrid
    values: np.ndarray
    dt: float


def build_sampler(grid: TorusGrid, cov: CovarianceSpec) -> SpectralSampler:
    if cov.dimension != grid.dimension:
        raise GridMismatch(f"covariance dimension {cov.dimension} != grid dimension {grid.dimension}")
    if grid.side_length < MIN_SIDE_LENGTH:
        raise GridTooSmall(f"side length {grid.side_length} < {MIN_SIDE_LENGTH}")
    if cov.profile is not Profile.INVERSE_POLY:
        raise ValueError("only bounded covariance profiles can drive the lattice noise")
    return SpectralSampler.from_covariance_samples(grid, cov.radial(grid.minimal_image_radius()))


def sample_increments(sampler: SpectralSampler, dt: float, generators: Sequence[np.random.Generator],
                      workers: int | None = None) -> np.ndarray:
    """One increment per generator, stacked along a leading batch axis."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    shape = sampler.grid.shape
    white = np.empty((len(generators),) + shape)
    for i, gen in enumerate(generators):
        white[i] = gen.standard_normal(shape)
    return sampler.color(white, dt, workers=workers)


def sample_increment(sampler: SpectralSampler, dt: float, stream: np.random.Generator) -> NoiseSlice:
    values = sample_increments(sampler, dt, [stream])[0]
    values.setflags(write=False)
    return NoiseSlice(sampler.grid, values, dt)


def _block_stderr(a: np.ndarray, blocks: int = 8) -> float:
    n0 = a.shape[0]
    blocks = min(blocks, n0)
    means = np.array([b.mean() for b in np.array_split(a, blocks, axis=0)])
    return float(means.std(ddof=1) / math.sqrt(blocks))


def empirical_covariance(slices: Sequence[NoiseSlice], lags: Sequence[Sequence[int]]) -> list[EstimatorResult]:
    """Spatially and ensemble averaged ``E[w(x) w(x + lag)]`` per lattice lag.

    Uncentred (the noise has mean zero by construction).  With several
    slices the standard error is taken across slices; a single slice falls
    back to spatial blocks along the first axis.
    """
    slices = list(slices)
    if not slices:
        raise ValueError("need at least one slice")
    grid = slices[0].grid
    for s in slices[1:]:
        if not s.grid.same_as(grid):
            raise GridMismatch("all slices must live on the same grid")
    values = np.stack([np.asarray(s.values) for s in slices])
    out = []
    for lag in lags:
        lag = tuple(int(v) for v in lag)
        if len(lag) != grid.dimension:
            raise ValueError(f"lag {lag} does not match dimension {grid.dimension}")
        shifted = np.roll(values, shift=tuple(-v for v in lag), axis=grid.axes)
        prod = values * shifted
        per_slice = prod.reshape(len(slices), -1).mean(axis=1)
        if len(slices) >= 2:
            se = float(per_slice.std(ddof=1) / math.sqrt(len(slices)))
        else:
            se = _block_stderr(prod[0])
        out.append(EstimatorResult(float(per_slice.mean()), se, len(slices), {"lag": str(lag)}))
    return out
