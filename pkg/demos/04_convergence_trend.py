"""Finite-eps variance of the fluctuation field against its limit.

A small version of the covariance-convergence check: the lattice variance
approaches the limit as eps decreases.  Takes about a minute.

Run:  python3 demos/04_convergence_trend.py
"""
from ewlimit.fluctuation import TestFunction, pair_all_translates
from ewlimit.limit_model import RieszParams, limit_covariance
from ewlimit.mc_analysis import replica_mean
from ewlimit.noise import CovarianceSpec, TorusGrid
from ewlimit.rng import Stream
from ewlimit.solver import Nonlinearity, SolverConfig, run_ensemble

kappa, beta = 2.5, 0.1
bump = TestFunction.bump(3)
sigma = limit_covariance(beta, 1.0, [(1.0, bump)], RieszParams(kappa, 3)).entries[0, 0]
config = SolverConfig(beta, 0.04, Nonlinearity.linear(), CovarianceSpec(kappa, 3), TorusGrid(3, 32, 0.5))

print(f"limit variance {sigma:.5f}")
for eps in (1.0, 0.5, 0.25):
    T = 1.0 / eps**2

    def mean_square(v, _t, e=eps):
        x = pair_all_translates(v, config.grid, bump, e, kappa)
        return (x * x).reshape(len(v), -1).mean(axis=1)

    est = replica_mean(run_ensemble(config, T, [T], Stream(4), 16, observe=mean_square)[0])
    print(f"eps = {eps:4.2f}: MC variance {est}, discrepancy {abs(est.mean - sigma):.5f}")
