"""Test functions and the rescaled fluctuation pairing.

A test function here is a radial profile ``p`` placed at ``center`` with
scale ``lam``: ``g(y) = lam^-d p(|y - center| / lam)``.  Profiles are
normalised to unit integral, so rescaling preserves the integral.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy import integrate

from .errors import SupportNotCovered, Unresolvable
from .mc_analysis import FitResult, fit_loglog
from .noise import TorusGrid

__all__ = [
    "Shape",
    "TestFunction",
    "FluctuationSample",
    "eval_test_function",
    "pairing_weights",
    "pair_field",
    "pair_values",
    "pair_all_translates",
    "HolderTable",
    "holder_probe",
    "fit_exponent",
]


class Shape(enum.Enum):
    BUMP = "bump"
    SMOOTH_INDICATOR = "smooth_indicator"


def sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (0.5 * d) / math.gamma(0.5 * d)


def _bump(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def _smooth_step(x):
    """0 for x <= 0, 1 for x >= 1, C-infinity in between."""
    x = np.asarray(x, dtype=float)
    a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
    b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


@lru_cache(maxsize=None)
def _normaliser(shape: Shape, plateau: float, d: int) -> float:
    """Inverse of the integral of the unnormalised unit-scale profile."""
    raw = _raw_profile(shape, plateau)
    outer = _raw_support(shape, plateau)
    brk = [plateau] if shape is Shape.SMOOTH_INDICATOR and plateau > 0 else None
    val, _ = integrate.quad(lambda r: float(raw(np.array(r))) * r ** (d - 1), 0.0, outer,
                            points=brk, epsabs=0, epsrel=1e-13, limit=200)
    return 1.0 / (sphere_area(d) * val)


def _raw_profile(shape: Shape, plateau: float) -> Callable:
    if shape is Shape.BUMP:
        return _bump
    return lambda r: _smooth_step(plateau + 1.0 - np.asarray(r, dtype=float))


def _raw_support(shape: Shape, plateau: float) -> float:
    return 1.0 if shape is Shape.BUMP else plateau + 1.0


@dataclass(frozen=True)
class TestFunction:
    """Compactly supported radial test function ``g^lam_x``.

    ``BUMP`` is the standard mollifier ``exp(-1/(1-|x|^2))`` on the unit
    ball.  ``SMOOTH_INDICATOR`` equals its maximum on ``|x| <= plateau`` and
    falls smoothly to zero on ``plateau <= |x| <= plateau + 1``.  Both are
    scaled to unit integral.
    """

    shape: Shape = Shape.BUMP
    center: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    plateau: float = 1.0
    name: str = ""

    __test__ = False  # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) < 1:
            raise ValueError("center must have at least one coordinate")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.plateau < 0:
            raise ValueError("plateau must be non-negative")

    @classmethod
    def bump(cls, dimension: int = 3, center=None, scale: float = 1.0, name: str = "") -> "TestFunction":
        c = (0.0,) * dimension if center is None else tuple(center)
        return cls(Shape.BUMP, c, scale, name=name)

    @classmethod
    def smooth_indicator(cls, dimension: int = 3, plateau: float = 1.0, center=None, scale: float = 1.0,
                         name: str = "") -> "TestFunction":
        c = (0.0,) * dimension if center is None else tuple(center)
        return cls(Shape.SMOOTH_INDICATOR, c, scale, plateau, name=name)

    @property
    def dimension(self) -> int:
        return len(self.center)

    @property
    def unit_support_radius(self) -> float:
        return _raw_support(self.shape, self.plateau)

    @property
    def support_radius(self) -> float:
        return self.scale * self.unit_support_radius

    @property
    def integral(self) -> float:
        return 1.0

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        c = ",".join(f"{v:g}" for v in self.center)
        return f"{self.shape.value}[{c};{self.scale:g}]"

    def unit_profile(self, r):
        """Normalised profile at unit scale as a function of the radius."""
        norm = _normaliser(self.shape, float(self.plateau), self.dimension)
        return norm * _raw_profile(self.shape, self.plateau)(r)

    def radial(self, r):
        """``g`` as a function of the distance from ``center``."""
        r = np.asarray(r, dtype=float)
        return self.scale ** (-self.dimension) * self.unit_profile(r / self.scale)

    def translate(self, x) -> "TestFunction":
        """``g`` shifted by ``x``."""
        x = np.broadcast_to(np.asarray(x, dtype=float), (self.dimension,))
        return replace(self, center=tuple(np.add(self.center, x)), name="")

    def at(self, center) -> "TestFunction":
        return replace(self, center=tuple(float(c) for c in center), name="")

    def rescale(self, lam: float) -> "TestFunction":
        """``g^lam``: scale multiplied by ``lam``, centre kept."""
        return replace(self, scale=self.scale * lam, name="")

    def dyadic(self, n: int, center=None) -> "TestFunction":
        """``2^(nd) phi(2^n (. - x))``."""
        c = self.center if center is None else center
        return replace(self, scale=self.scale * 2.0 ** (-n), center=tuple(float(v) for v in c), name="")

    def __call__(self, y):
        return eval_test_function(self, y)


def eval_test_function(g: TestFunction, y) -> np.ndarray:
    """``g(y)`` for points ``y`` of shape ``(..., d)``; zero off the support."""
    y = np.asarray(y, dtype=float)
    diff = y - np.asarray(g.center)
    return g.radial(np.sqrt(np.sum(diff * diff, axis=-1)))


@dataclass(frozen=True)
class FluctuationSample:
    epsilon: float
    t: float
    test_fn_id: str
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("fluctuation value must be finite")


def _lattice_points(grid: TorusGrid) -> list[np.ndarray]:
    c = grid.minimal_image_coordinates()
    out = []
    for axis in range(grid.dimension):
        shape = [1] * grid.dimension
        shape[axis] = grid.n
        out.append(c.reshape(shape))
    return out


def pairing_weights(grid: TorusGrid, g: TestFunction, epsilon: float) -> np.ndarray:
    """``g(eps y)`` on the lattice, ``y`` in minimal-image coordinates."""
    if g.dimension != grid.dimension:
        raise ValueError("test function and grid dimensions differ")
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    reach = max(abs(c) for c in g.center) + g.support_radius
    if reach / epsilon > 0.5 * grid.side_length:
        raise SupportNotCovered(
            f"support reaches {reach / epsilon:.4g} lattice units, torus half-side is {0.5 * grid.side_length:.4g}")
    r2 = 0.0
    for axis, pts in enumerate(_lattice_points(grid)):
        r2 = r2 + (epsilon * pts - g.center[axis]) ** 2
    return g.radial(np.sqrt(r2))


def _prefactor(grid: TorusGrid, epsilon: float, kappa: float) -> float:
    d = grid.dimension
    return epsilon ** (1.0 - 0.5 * float(kappa) + d) * grid.cell_volume


def pair_values(values: np.ndarray, grid: TorusGrid, g: TestFunction, epsilon: float,
                kappa: float) -> np.ndarray:
    """Pairing for a batch ``(..., n, ..., n)`` of microscopic fields."""
    w = pairing_weights(grid, g, epsilon)
    centred = np.asarray(values, dtype=float) - 1.0
    axes = tuple(range(-grid.dimension, 0))
    return _prefactor(grid, epsilon, kappa) * np.sum(centred * w, axis=axes)


def pair_field(field, g: TestFunction, epsilon: float, kappa: float, t: float | None = None) -> FluctuationSample:
    """``eps^(1 - kappa/2 + d) h^d sum_y (u(y) - 1) g(eps y)``.

    ``field`` holds the microscopic solution at time ``t / eps^2``; when
    ``t`` is given this is checked against ``field.time``.
    """
    if t is None:
        t = field.time * epsilon**2
    elif not math.isclose(field.time, t / epsilon**2, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"field time {field.time} does not equal t/eps^2 = {t / epsilon ** 2}")
    value = float(pair_values(field.values, field.grid, g, epsilon, kappa))
    return FluctuationSample(epsilon, t, g.label, value)


def pair_all_translates(values: np.ndarray, grid: TorusGrid, g: TestFunction, epsilon: float,
                        kappa: float, workers=None) -> np.ndarray:
    """Pairings with ``g`` translated by every lattice vector.

    Entry ``z`` of the output pairs the field with ``g(. - eps h z)``; entry 0
    reproduces :func:`pair_values`.  Computed as one circular correlation.
    """
    w = pairing_weights(grid, g, epsilon)
    axes = grid.axes
    u_hat = sfft.rfftn(np.asarray(values, dtype=float) - 1.0, axes=axes, workers=workers)
    w_hat = sfft.rfftn(w, workers=workers)
    corr = sfft.irfftn(u_hat * np.conj(w_hat), s=grid.shape, axes=axes, workers=workers)
    return _prefactor(grid, epsilon, kappa) * corr


# ---------------------------------------------------------------------------
# dyadic probes


@dataclass(frozen=True)
class HolderTable:
    levels: tuple
    centers: tuple
    values: dict = field(repr=False)  # (level, center index) -> array of samples

    def rms(self, level: int, center: int) -> float:
        v = np.asarray(self.values[(level, center)], dtype=float)
        return float(np.sqrt(np.mean(v * v)))


def holder_probe(pairing: Callable[[TestFunction], object], phi: TestFunction, levels: Sequence[int],
                 centers: Sequence, spacing: float | None = None) -> HolderTable:
    """Evaluate ``pairing`` on ``phi^(n)_x`` for every level and centre.

    ``pairing`` maps a test function to a number or an array of samples.
    With ``spacing`` set, each probe must span at least two lattice cells.
    """
    levels = tuple(int(n) for n in levels)
    if spacing is not None:
        for n in levels:
            if phi.scale * 2.0 ** (-n) < 2.0 * spacing:
                raise Unresolvable(f"level {n} has scale {phi.scale * 2.0 ** (-n):g} < 2 x spacing {spacing:g}")
    centers = tuple(tuple(float(c) for c in x) for x in centers)
    values = {}
    for n in levels:
        for i, x in enumerate(centers):
            values[(n, i)] = np.atleast_1d(np.asarray(pairing(phi.dyadic(n, x)), dtype=float))
    return HolderTable(levels, centers, values)


def fit_exponent(table: HolderTable) -> FitResult:
    """Regress ``log2 max_x ||<zeta, phi^(n)_x>||_2`` on ``n``.

    The returned ``meta['alpha']`` is minus the slope.
    """
    peaks = np.array([max(table.rms(n, i) for i in range(len(table.centers))) for n in table.levels])
    x = 2.0 ** np.asarray(table.levels, dtype=float)
    fit = fit_loglog(x, peaks, base=2.0)
    fit.meta["alpha"] = -fit.slope
    fit.meta["peaks"] = peaks.tolist()
    return fit
