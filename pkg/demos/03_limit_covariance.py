"""The Gaussian limit: covariance, direct sampling and Hölder-type exponents.

Run:  python3 demos/03_limit_covariance.py
"""
import numpy as np

from ewlimit.fluctuation import TestFunction, fit_exponent, holder_probe
from ewlimit.limit_model import RieszParams, J_quadrature, limit_covariance, riesz_convolution_constant, sample_limit
from ewlimit.mc_analysis import time_holder_fit

params = RieszParams(2.5, 3)
bump = TestFunction.bump(3)

print("Riesz composition constant (-2, -2):", riesz_convolution_constant(-2.0, -2.0, params), "(pi^3 =",
      np.pi**3, ")")
for D in (0.0, 1.0, 3.0):
    print(f"J_(1,1)(bump, bump shifted by {D}) = {J_quadrature(bump, bump.at((D, 0, 0)), 1.0, 1.0, params):.6f}")

# spatial exponent from dyadic probes of the sampled limit
levels, centers = range(5), [(0.0, 0.0, 0.0), (0.5, 0.0, 0.0)]
family = [bump.dyadic(n, c) for n in levels for c in centers]
cov = limit_covariance(0.1, 1.0, [(1.0, f) for f in family], params)
x = sample_limit(cov, 10_000, np.random.default_rng(0))
column = {(f.scale, f.center): k for k, f in enumerate(family)}
fit = fit_exponent(holder_probe(lambda f: x[:, column[(f.scale, f.center)]], bump, levels, centers))
print(f"spatial exponent estimate {fit.meta['alpha']:.3f} (regularity 1 - kappa/2 = -0.25)")

# temporal exponent from increments on a fine time grid
times = [1.0 + k / 64 for k in range(8)]
cov_t = limit_covariance(0.1, 1.0, [(t, bump) for t in times], params)
g = time_holder_fit(sample_limit(cov_t, 10_000, np.random.default_rng(1)), times)
print(f"temporal exponent estimate {g.slope:.3f} (any value below 1/2 is admissible)")
