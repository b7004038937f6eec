"""Deterministic numerics for the Gaussian (Edwards-Wilkinson) limit.

The limit field is driven by noise with covariance ``delta(t-s) |x-y|^-kappa``.
Its covariance against test functions reduces to one-dimensional radial
integrals of the Riesz-smoothed heat kernel

    K(a, r) = (P_a * |.|^-kappa)(x),  |x| = r,

which satisfies ``K(a, r) = a^(-kappa/2) K(1, r / sqrt(a))``.  ``K(1, .)`` is
computed by adaptive quadrature and cached as a Chebyshev table; the
time-integrated kernel needed for the covariance is tabulated the same way.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from numpy.polynomial import chebyshev as C
from scipy import integrate, special

from .errors import DomainError, NotPositiveSemidefinite, QuadratureNotConverged
from .fluctuation import TestFunction, pairing_weights, sphere_area
from .noise import CovarianceSpec, SpectralSampler, TorusGrid, build_sampler

__all__ = [
    "RieszParams",
    "heat_kernel",
    "heat_kernel_bound_constant",
    "riesz_heat_convolution",
    "riesz_heat_kernel",
    "heat_smoothed_radial",
    "cross_correlation",
    "J_quadrature",
    "i_gamma0",
    "LimitCovariance",
    "limit_covariance",
    "sample_limit",
    "additive_variance",
    "radial_convolution",
    "riesz_convolution_constant",
]

PSD_TOLERANCE = 1e-10


@dataclass(frozen=True)
class RieszParams:
    kappa: float
    dimension: int = 3

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 3:
            raise ValueError("dimension must be an integer >= 3")
        if not 2 < float(self.kappa) < self.dimension:
            raise ValueError(f"kappa must lie in (2, {self.dimension})")
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "dimension", int(self.dimension))

    @property
    def nu(self) -> float:
        """Bessel order of the radial Fourier transform."""
        return 0.5 * self.dimension - 1.0


# ---------------------------------------------------------------------------
# heat kernel


def heat_kernel(t: float, x) -> np.ndarray:
    """``(2 pi t)^(-d/2) exp(-|x|^2 / 2t)`` for points ``x`` of shape ``(..., d)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    r2 = np.sum(x * x, axis=-1)
    return (2.0 * math.pi * t) ** (-0.5 * d) * np.exp(-0.5 * r2 / t)


def heat_kernel_bound_constant(lam: float, d: int) -> float:
    """Smallest ``C`` with ``P_s(x) <= C s^(-lam/2) |x|^(lam-d)`` for all ``s, x``."""
    if not 0 < lam < d:
        raise ValueError("lam must lie in (0, d)")
    m = d - lam
    return (2.0 * math.pi) ** (-0.5 * d) * m ** (0.5 * m) * math.exp(-0.5 * m)


# ---------------------------------------------------------------------------
# radial heat smoothing


def _scaled_bessel(nu: float, zeta):
    """``zeta^-nu I_nu(zeta) exp(-zeta)``, continuous at ``zeta = 0``."""
    zeta = np.asarray(zeta, dtype=float)
    small = zeta < 1e-6
    large = zeta > 1e7
    safe = np.where(small | large, 1.0, zeta)
    out = safe ** (-nu) * special.ive(nu, safe)
    lim = 2.0 ** (-nu) / math.gamma(nu + 1.0) * np.exp(-zeta) * (1.0 + zeta**2 / (4.0 * (nu + 1.0)))
    # Hankel expansion; scipy's ive returns nan for very large arguments
    zl = np.where(large, zeta, 1.0)
    mu = 4.0 * nu * nu
    series = 1.0 - (mu - 1.0) / (8.0 * zl) + (mu - 1.0) * (mu - 9.0) / (128.0 * zl * zl)
    asym = zl ** (-nu) * series / np.sqrt(2.0 * math.pi * zl)
    return np.where(small, lim, np.where(large, asym, out))


def heat_smoothed_radial(a: float, r: float, f: Callable, d: int, singular_power: float = 0.0,
                         rtol: float = 1e-8, width: float = 14.0) -> float:
    """``int P_a(z - x) f(|z|) dz`` at ``|x| = r`` for radial ``f``.

    ``f(rho) ~ rho^-singular_power`` near the origin is absorbed by the
    substitution ``rho = s^q`` with ``q = 1/(d - singular_power)``.
    """
    if not a > 0:
        raise ValueError("a must be positive")
    if not singular_power < d:
        raise DomainError("singular_power must be below the dimension")
    nu = 0.5 * d - 1.0
    q = 1.0 / (d - singular_power)
    sa = math.sqrt(a)
    lo = max(0.0, r - width * sa)
    hi = r + width * sa

    def integrand(rho):
        if rho <= 0.0:
            return 0.0
        return rho ** (d - 1) * f(rho) * math.exp(-0.5 * (rho - r) ** 2 / a) * float(_scaled_bessel(nu, rho * r / a))

    def substituted(s):
        # rho = s^q near the origin absorbs the power singularity
        return q * s ** (q - 1.0) * integrand(s**q) if s > 0 else 0.0

    # geometric panels resolve structure of f on scales far below sqrt(a)
    edges = {lo, hi}
    if lo < r < hi:
        edges.add(r)
    e = hi / 16.0
    while e > max(lo, 1e-12 * hi):
        edges.add(e)
        e /= 16.0
    edges = sorted(edges)
    val, err = 0.0, 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            for x0, x1 in zip(edges, edges[1:]):
                if x0 == 0.0:
                    v, e = integrate.quad(substituted, 0.0, x1 ** (1.0 / q), epsabs=0.0, epsrel=0.01 * rtol,
                                          limit=400)
                else:
                    v, e = integrate.quad(integrand, x0, x1, epsabs=0.0, epsrel=0.01 * rtol, limit=400)
                val, err = val + v, err + e
        except integrate.IntegrationWarning as exc:
            raise QuadratureNotConverged(str(exc)) from None
    if err > rtol * abs(val):
        raise QuadratureNotConverged(f"error estimate {err:.2e} for value {val:.6e}")
    return a ** (-0.5 * d) * val


def riesz_heat_convolution(a: float, r: float, params: RieszParams, rtol: float = 1e-6) -> float:
    """``K(a, r)`` by direct adaptive quadrature (no tables)."""
    if not a > 0:
        raise ValueError("a must be positive")
    if r < 0:
        raise ValueError("r must be non-negative")
    k, d = params.kappa, params.dimension
    k1 = heat_smoothed_radial(1.0, r / math.sqrt(a), lambda rho: rho ** (-k), d, singular_power=k,
                              rtol=rtol)
    return a ** (-0.5 * k) * k1


def riesz_k1_origin(params: RieszParams) -> float:
    """Closed form of ``K(1, 0) = E |Z|^-kappa`` for a standard Gaussian ``Z``."""
    k, d = params.kappa, params.dimension
    return 2.0 ** (-0.5 * k) * math.gamma(0.5 * (d - k)) / math.gamma(0.5 * d)


def _cheb_fit(func: Callable, rtol: float, degrees=(24, 48, 96, 160, 256)) -> np.ndarray:
    """Chebyshev coefficients on [0, 1], accepted when midpoint checks pass."""
    probe = 0.5 * (1.0 + np.cos(np.pi * (np.arange(37) + 0.37) / 37))
    exact = np.array([func(u) for u in probe])
    for deg in degrees:
        nodes = 0.5 * (1.0 + np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1)))
        coef = C.chebfit(2.0 * nodes - 1.0, np.array([func(u) for u in nodes]), deg)
        approx = C.chebval(2.0 * probe - 1.0, coef)
        if np.max(np.abs(approx - exact) / np.maximum(np.abs(exact), 1e-300)) < rtol:
            return coef
    raise QuadratureNotConverged("Chebyshev table did not reach the requested accuracy")


@dataclass(frozen=True, eq=False)
class RieszHeatTable:
    """Chebyshev tables for ``K(1, r)`` and its time integral.

    ``K(1, r) = h(u) (1 + r^2)^(-kappa/2)`` with ``u = r / (1 + r)`` and
    ``h(1) = 1``.  The tail integral

        T(B) = int_B^inf b^(-kappa/2) K(1, b^(-1/2)) db

    is stored as ``T(B) (1 + B)^(kappa/2 - 1)`` in ``y = B / (1 + B)``.
    """

    params: RieszParams
    k_coef: np.ndarray = field(repr=False)
    t_coef: np.ndarray = field(repr=False)

    def k1(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            u = np.where(np.isinf(r), 1.0, r / (1.0 + r))
            return C.chebval(2.0 * u - 1.0, self.k_coef) * (1.0 + r * r) ** (-0.5 * self.params.kappa)

    def kernel(self, a, r) -> np.ndarray:
        """Vectorised ``K(a, r)``."""
        a = np.asarray(a, dtype=float)
        return a ** (-0.5 * self.params.kappa) * self.k1(np.asarray(r, dtype=float) / np.sqrt(a))

    def tail(self, B) -> np.ndarray:
        B = np.asarray(B, dtype=float)
        k = self.params.kappa
        with np.errstate(invalid="ignore", over="ignore"):
            y = np.where(np.isinf(B), 1.0, B / (1.0 + B))
            return C.chebval(2.0 * y - 1.0, self.t_coef) * (1.0 + B) ** (1.0 - 0.5 * k)

    def time_integrated(self, a0, a1, rho) -> np.ndarray:
        """``1/2 int_{a0}^{a1} K(a, rho) da``."""
        rho = np.asarray(rho, dtype=float)
        k = self.params.kappa
        r2 = rho * rho
        return 0.5 * rho ** (2.0 - k) * (self.tail(a0 / r2) - self.tail(a1 / r2))


@lru_cache(maxsize=16)
def riesz_heat_kernel(params: RieszParams) -> RieszHeatTable:
    """Tabulated ``K`` for ``params`` (built once per parameter set)."""
    k = params.kappa

    def h(u):
        if u >= 1.0:
            return 1.0
        r = u / (1.0 - u)
        return riesz_heat_convolution(1.0, r, params, rtol=1e-11) * (1.0 + r * r) ** (0.5 * k)

    k_coef = _cheb_fit(h, 1e-9)

    def k1(r):
        u = r / (1.0 + r)
        return C.chebval(2.0 * u - 1.0, k_coef) * (1.0 + r * r) ** (-0.5 * k)

    def integrand(b):
        return b ** (-0.5 * k) * k1(b ** -0.5) if b > 0 else 1.0

    def tail_scaled(y):
        if y >= 1.0:
            return k1(0.0) / (0.5 * k - 1.0)
        B = y / (1.0 - y)
        total = 0.0
        edges = [B] + [e for e in (0.25, 1.0, 4.0, 16.0) if e > B]
        for lo, hi in zip(edges, edges[1:]):
            total += integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-13, limit=200)[0]
        top = edges[-1]
        # beyond top: b = top / w^2 gives a smooth integrand on (0, 1]
        total += integrate.quad(lambda w: integrand(top / (w * w)) * 2.0 * top / w**3, 0.0, 1.0,
                                epsabs=0.0, epsrel=1e-13, limit=200)[0]
        return total * (1.0 + B) ** (0.5 * k - 1.0)

    t_coef = _cheb_fit(tail_scaled, 1e-9)
    return RieszHeatTable(params, k_coef, t_coef)


# ---------------------------------------------------------------------------
# cross-correlation of radial test functions


def _angular_rule(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes in ``cos(angle)`` and weights for the normalised sphere average."""
    a = 0.5 * (d - 3)
    if a == 0:
        x, w = special.roots_legendre(n)
    else:
        x, w = special.roots_jacobi(n, a, a)
    return x, w / w.sum()


def _radial_rule(lo: float, hi: float, panels: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = special.roots_legendre(n)
    edges = np.linspace(lo, hi, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    half = 0.5 * np.diff(edges)[:, None]
    return (mid + half * x).ravel(), (half * w).ravel()


def cross_correlation(f: TestFunction, g: TestFunction, s, n_nodes: int = 48) -> np.ndarray:
    """``Psi(s) = int f_0(p) g_0(p - s e) dp`` for the centred profiles."""
    d = f.dimension
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if g.support_radius < f.support_radius:
        # Psi is symmetric in the two radial profiles; resolve the narrower one
        f, g = g, f
    rho, wr = _radial_rule(0.0, f.support_radius, 4, n_nodes)
    mu, wm = _angular_rule(n_nodes, d)
    radial = sphere_area(d) * wr * rho ** (d - 1) * f.radial(rho)
    out = np.empty_like(s)
    chunk = max(1, 2_000_000 // (rho.size * mu.size))
    for i in range(0, s.size, chunk):
        sc = s[i:i + chunk, None, None]
        dist = np.sqrt(np.maximum(rho[None, :, None] ** 2 + sc**2 - 2.0 * rho[None, :, None] * sc * mu, 0.0))
        out[i:i + chunk] = np.einsum("spm,p,m->s", g.radial(dist), radial, wm)
    return out


def _offset(f: TestFunction, g: TestFunction) -> float:
    if f.dimension != g.dimension:
        raise ValueError("test functions live in different dimensions")
    return float(np.linalg.norm(np.subtract(f.center, g.center)))


def _psi_interpolant(f: TestFunction, g: TestFunction, n_nodes: int, panels: int = 16,
                     deg: int = 20) -> Callable:
    """Piecewise Chebyshev interpolant of the cross-correlation on its support."""
    S = f.support_radius + g.support_radius
    edges = np.linspace(0.0, S, panels + 1)
    x = np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1))
    nodes = 0.5 * (edges[:-1, None] + edges[1:, None]) + 0.5 * np.diff(edges)[:, None] * x
    vals = cross_correlation(f, g, nodes.ravel(), n_nodes).reshape(nodes.shape)
    coef = np.stack([C.chebfit(x, v, deg) for v in vals])

    def psi(s):
        shape = np.shape(s)
        s = np.asarray(s, dtype=float).ravel()
        idx = np.clip((s / S * panels).astype(int), 0, panels - 1)
        loc = 2.0 * (s - edges[idx]) / (edges[1] - edges[0]) - 1.0
        out = C.chebval(loc, coef[idx].T, tensor=False)
        return np.where(s < S, out, 0.0).reshape(shape)

    return psi


def _shell_average(f: TestFunction, g: TestFunction, rho: np.ndarray, n_nodes: int,
                   panels: int = 16) -> np.ndarray:
    """Average of ``Psi(|w - Delta|)`` over the sphere ``|w| = rho``."""
    D = _offset(f, g)
    psi = _psi_interpolant(f, g, n_nodes, panels)
    if D == 0.0:
        return psi(rho)
    mu, wm = _angular_rule(4 * n_nodes, f.dimension)
    s = np.sqrt(np.maximum(rho[:, None] ** 2 + D * D - 2.0 * rho[:, None] * D * mu, 0.0))
    return psi(s) @ wm


def _shell_rule(f: TestFunction, g: TestFunction, panels: int, n: int, geometric: int = 48):
    """Radial nodes covering the support of the shell average."""
    D = _offset(f, g)
    S = f.support_radius + g.support_radius
    lo, hi = max(0.0, D - S), D + S
    if lo > 0.0:
        return _radial_rule(lo, hi, panels, n)
    # geometric panels towards the origin, where the kernel is singular
    x, w = special.roots_legendre(n)
    edges = np.concatenate([[0.0], 0.5 * hi * 2.0 ** -np.arange(geometric, 0, -1.0),
                            np.linspace(0.5 * hi, hi, panels + 1)])
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    half = 0.5 * np.diff(edges)[:, None]
    return (mid + half * x).ravel(), (half * w).ravel()


def _j_once(f, g, tau, v, table: RieszHeatTable, panels: int, n: int, n_psi: int) -> float:
    d = f.dimension
    rho, w = _shell_rule(f, g, panels, n)
    psi = _shell_average(f, g, rho, n_psi, panels)
    kern = table.time_integrated(abs(tau - v), tau + v, rho)
    return float(sphere_area(d) * np.sum(w * rho ** (d - 1) * psi * kern))


def J_quadrature(f: TestFunction, g: TestFunction, tau: float, v: float, params: RieszParams,
                 rtol: float = 1e-4, max_refinements: int = 5) -> float:
    """``int_0^{tau ^ v} int int f(x1) g(x2) K(tau + v - 2s, x1 - x2) dx ds``.

    With ``a = tau + v - 2s`` the time integral becomes a tabulated function
    of ``|x1 - x2|``, leaving one radial integral against the
    shell-averaged cross-correlation of ``f`` and ``g``.  Resolution is
    refined until two successive values agree to ``rtol``.
    """
    if not (tau > 0 and v > 0):
        raise ValueError("tau and v must be positive")
    if f.dimension != params.dimension or g.dimension != params.dimension:
        raise ValueError("test function dimension does not match params")
    table = riesz_heat_kernel(params)
    panels, n, n_psi = 8, 12, 24
    prev = _j_once(f, g, tau, v, table, panels, n, n_psi)
    for _ in range(max_refinements):
        panels, n, n_psi = 2 * panels, n + 4, int(1.5 * n_psi)
        cur = _j_once(f, g, tau, v, table, panels, n, n_psi)
        if abs(cur - prev) <= rtol * abs(cur):
            return cur
        prev = cur
    raise QuadratureNotConverged(f"J did not converge to rtol={rtol}")


def i_gamma0(f: TestFunction, g: TestFunction, lam: float, params: RieszParams,
             panels: int = 32, n: int = 16) -> float:
    """``int |y1-y2|^-kappa |x1-y1|^(lam-d) |x2-y2|^(lam-d) f(x1) g(x2)``.

    Both interior vertices are integrated out in closed form, leaving
    ``c c' int int f g |x1 - x2|^(2 lam - kappa)``; requires ``0 < lam < kappa/2``.
    """
    k, d = params.kappa, params.dimension
    if not 0 < lam < 0.5 * k:
        raise DomainError("need 0 < lam < kappa/2")
    c1 = riesz_convolution_constant(lam - d, -k, params)
    c2 = riesz_convolution_constant(lam - d, lam - k, params)
    rho, w = _shell_rule(f, g, panels, n)
    psi = _shell_average(f, g, rho, 48)
    return c1 * c2 * float(sphere_area(d) * np.sum(w * rho ** (d - 1 + 2 * lam - k) * psi))


# ---------------------------------------------------------------------------
# limit covariance


@dataclass(frozen=True, eq=False)
class LimitCovariance:
    """``beta^2 nu_eff^2 J_{t_i, t_j}(g_i, g_j)`` with a clamped PSD factor."""

    entries: np.ndarray
    beta: float
    nu_eff: float
    times: tuple = ()
    labels: tuple = ()
    factor: np.ndarray = field(default=None, repr=False)
    clamped: float = 0.0

    @classmethod
    def from_matrix(cls, entries, beta: float = 1.0, nu_eff: float = 1.0, times=(), labels=()) -> "LimitCovariance":
        m = np.array(entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("covariance must be a square matrix")
        if not np.allclose(m, m.T, rtol=1e-10, atol=0.0):
            raise ValueError("covariance must be symmetric")
        m = 0.5 * (m + m.T)
        factor, clamped = _psd_factor(m)
        m.setflags(write=False)
        factor.setflags(write=False)
        n = m.shape[0]
        times = tuple(times) or (math.nan,) * n
        labels = tuple(labels) or tuple(f"g{i}" for i in range(n))
        return cls(m, beta, nu_eff, times, labels, factor, clamped)

    def __len__(self):
        return self.entries.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "t_i", "t_j", "g_i", "g_j", "sigma_ij"])
            for i in range(len(self)):
                for j in range(len(self)):
                    w.writerow([i, j, repr(float(self.times[i])), repr(float(self.times[j])),
                                self.labels[i], self.labels[j], repr(float(self.entries[i, j]))])


def _psd_factor(m: np.ndarray) -> tuple[np.ndarray, float]:
    """``L`` with ``L L^T`` the clamped matrix; returns the clamped mass too."""
    if not m.size:
        return np.zeros((0, 0)), 0.0
    w, V = np.linalg.eigh(m)
    scale = max(float(np.trace(m)), 0.0)
    if np.any(w < -PSD_TOLERANCE * scale) or (scale == 0.0 and np.any(w < 0)):
        raise NotPositiveSemidefinite(f"smallest eigenvalue {w.min():.3e} with trace {scale:.3e}")
    clamped = float(-w[w < 0].sum())
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w), clamped


def limit_covariance(beta: float, nu_eff: float, pairs: Sequence[tuple[float, TestFunction]],
                     params: RieszParams, rtol: float = 1e-4) -> LimitCovariance:
    """Covariance of ``(<U(t_i), g_i>)_i`` for the limit field."""
    pairs = list(pairs)
    if any(not t > 0 for t, _ in pairs):
        raise ValueError("all times must be positive")
    n = len(pairs)
    m = np.zeros((n, n))
    amp = beta**2 * nu_eff**2
    if amp != 0.0:
        for i in range(n):
            for j in range(i, n):
                ti, gi = pairs[i]
                tj, gj = pairs[j]
                m[i, j] = m[j, i] = amp * J_quadrature(gi, gj, ti, tj, params, rtol=rtol)
    return LimitCovariance.from_matrix(m, beta, nu_eff, tuple(t for t, _ in pairs),
                                       tuple(g.label for _, g in pairs))


def sample_limit(cov: LimitCovariance, n: int, stream: np.random.Generator) -> np.ndarray:
    """``n`` independent draws, shape ``(n, len(cov))``."""
    z = stream.standard_normal((n, len(cov)))
    return z @ cov.factor.T


# ---------------------------------------------------------------------------
# exact discrete oracle for additive noise


def additive_variance(g: TestFunction, t: float, epsilon: float, cov: CovarianceSpec, beta: float,
                      grid: TorusGrid, dt: float, sampler: SpectralSampler | None = None) -> float:
    """Exact variance of the lattice pairing when ``sigma = 1``.

    With ``N = t / (eps^2 dt)`` steps of the exponential-Euler scheme the
    field is ``u - 1 = beta sum_j S^(N-1-j) dW_j``, so in Fourier space

        Var X = c^2 beta^2 dt / n^d * sum_k |W_k|^2 lam_k (1 - q_k^N) / (1 - q_k)

    with ``q_k = exp(-|k|^2 dt)``, ``lam_k`` the sampler eigenvalues and
    ``W`` the pairing weights.
    """
    if beta == 0:
        return 0.0
    steps = int(round(t / epsilon**2 / dt))
    if steps < 0 or abs(steps * dt - t / epsilon**2) > 1e-9 * max(1.0, t / epsilon**2):
        raise ValueError("t / eps^2 must be a multiple of dt")
    if sampler is None:
        sampler = build_sampler(grid, cov)
    w_hat = sfft.rfftn(pairing_weights(grid, g, epsilon))
    k2 = grid.wavenumber_squared()
    lam = sampler.eigenvalues[..., : grid.n // 2 + 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        geo = np.where(k2 > 0, np.expm1(-steps * k2 * dt) / np.expm1(-k2 * dt), float(steps))
    terms = np.abs(w_hat) ** 2 * lam * geo
    # rfft stores half the spectrum: double the columns that have a mirror
    mult = np.full(terms.shape[-1], 2.0)
    mult[0] = 1.0
    if grid.n % 2 == 0:
        mult[-1] = 1.0
    total = float(np.sum(terms * mult))
    c = epsilon ** (1.0 - 0.5 * float(cov.kappa) + grid.dimension) * grid.cell_volume
    return c * c * beta**2 * dt * total / grid.sites


# ---------------------------------------------------------------------------
# homogeneous convolution constants


def _shell_power_d3(rho, r: float, beta: float, gap=None):
    """Sphere average of ``|r e - rho theta|^beta`` in three dimensions.

    ``gap = |rho - r|`` may be passed when it is known more accurately than
    the difference of the two radii.
    """
    rho = np.asarray(rho, dtype=float)
    M = np.maximum(rho, r)
    t = np.minimum(rho, r) / M
    small = t < 1e-4
    ts = np.where(small, 0.5, t)
    with np.errstate(divide="ignore"):
        log_om = np.log1p(-ts) if gap is None else np.log(np.where(small, 0.5, np.asarray(gap) / M))
        if beta == -2.0:
            core = 0.5 * (np.log1p(ts) - log_om) / ts
        else:
            c = beta + 2.0
            core = (np.expm1(c * np.log1p(ts)) - np.expm1(c * log_om)) / (2.0 * ts * c)
    series = 1.0 + beta * (beta + 1.0) * t * t / 6.0
    return M**beta * np.where(small, series, core)


def _shell_power(rho: float, r: float, beta: float, d: int, gap: float | None = None) -> float:
    if d == 3:
        return float(_shell_power_d3(rho, r, beta, gap))
    # Gegenbauer generating function: sphere mean of |e - t theta|^-2s = 2F1(a, b; c; t^2)
    M, t = max(rho, r), min(rho, r) / max(rho, r)
    a = -0.5 * beta
    b, c = a - 0.5 * d + 1.0, 0.5 * d
    excess = c - a - b
    if gap is None or excess > -0.05 or t < 0.5:
        return M**beta * float(special.hyp2f1(a, b, c, t * t))
    # connection formula about z = 1, with 1 - t^2 taken from the gap
    w = (gap / M) * (1.0 + t)
    regular = special.gamma(c) * special.gamma(excess) / (special.gamma(c - a) * special.gamma(c - b))
    singular = special.gamma(c) * special.gamma(-excess) / (special.gamma(a) * special.gamma(b))
    val = (regular * special.hyp2f1(a, b, 1.0 - excess, w)
           + singular * w**excess * special.hyp2f1(c - a, c - b, 1.0 + excess, w))
    return M**beta * float(val)


def _endpoint_substitution(func: Callable, a: float, b: float, p: float, left: bool) -> Callable:
    """Map ``(a, b)`` onto ``(0, 1)`` with ``|x - end| = (b - a) u^q``.

    ``p`` is the power of the integrand at the singular end; ``q`` is chosen
    so that the substituted integrand vanishes linearly there.  ``func`` is
    called as ``func(x, off)`` with ``off = |x - end|`` computed exactly.
    """
    q = max(1.0, 2.0 / (1.0 + p))
    width = b - a

    def g(u):
        off = width * u**q
        if off == 0.0:
            return 0.0
        return func(a + off if left else b - off, off) * width * q * u ** (q - 1.0)

    return g


def radial_convolution(f: Callable, beta: float, r: float, d: int, rtol: float = 1e-9,
                       f_exponent: float = 0.0) -> float:
    """``int f(|z|) |x - z|^beta dz`` at ``|x| = r > 0``.

    ``f_exponent`` is the power law of ``f`` at the origin; together with
    ``beta`` it fixes the endpoint singularities, which are flattened by a
    substitution before integrating.
    """
    if not r > 0:
        raise ValueError("r must be positive")

    def integrand(rho, gap=None):
        if rho == 0.0:
            return 0.0
        return rho ** (d - 1) * f(rho) * _shell_power(rho, r, beta, d, gap)

    # powers at rho = 0 and at rho = r (the sphere mean of |x - z|^beta behaves like |rho - r|^(beta + d - 1))
    p0, pr = d - 1 + f_exponent, min(0.0, beta + d - 1)
    pieces = ((0.0, 0.5 * r, p0, True, lambda x, _off: integrand(x)),
              (0.5 * r, r, pr, False, integrand), (r, 2.0 * r, pr, True, integrand))
    total, err = 0.0, 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            for lo, hi, p, left, func in pieces:
                g = _endpoint_substitution(func, lo, hi, p, left)
                v, e = integrate.quad(g, 0.0, 1.0, epsabs=0.0, epsrel=0.01 * rtol, limit=400)
                total, err = total + v, err + e
            # tail: rho = 2r / w maps (2r, inf) onto (0, 1)
            v, e = integrate.quad(lambda w: integrand(2.0 * r / w) * 2.0 * r / w**2 if w > 0 else 0.0,
                                  0.0, 1.0, epsabs=0.0, epsrel=0.01 * rtol, limit=400)
        except integrate.IntegrationWarning as exc:
            raise QuadratureNotConverged(str(exc)) from None
    total, err = total + v, err + e
    if err > rtol * abs(total):
        raise QuadratureNotConverged(f"error estimate {err:.2e} for value {total:.6e}")
    return sphere_area(d) * total


def riesz_convolution_constant(alpha: float, beta_exp: float, params: RieszParams,
                               rtol: float = 1e-8) -> float:
    """``c`` in ``int |z|^alpha |x - z|^beta dz = c |x|^(alpha + beta + d)``."""
    d = params.dimension
    if not (alpha > -d and beta_exp > -d and alpha + beta_exp + d < 0):
        raise DomainError(f"need alpha, beta > -{d} and alpha + beta + {d} < 0, got {alpha}, {beta_exp}")
    return radial_convolution(lambda rho: rho**alpha, beta_exp, 1.0, d, rtol=rtol, f_exponent=alpha)
