"""Admissible exponent ranges for the four example diagrams.

Run:  python3 demos/01_diagram_intervals.py
"""
from fractions import Fraction as F

from ewlimit.diagram import (AffineDegree, admissible_interval, check_fixed, gamma0, gamma0_prime, gamma1, gamma2,
                             gamma_tilde, isomorphic, reduce_vertex)

kappa = F(5, 2)
L = AffineDegree.lam()

# each interval is exact rational arithmetic; the witnesses name the binding constraints
for name, diagram in (("gamma0", gamma0(kappa)), ("gamma1", gamma1(kappa)), ("gamma2", gamma2(kappa)),
                      ("gamma_tilde(L - K, 2 - K)", gamma_tilde(L - kappa, 2 - kappa))):
    res = admissible_interval(diagram)
    kind, witness = res.upper_witness
    print(f"{name:26s} {res}   upper end set by {kind} {witness}")

# just outside the interval the checker returns a concrete failing partition
verdict = check_fixed(gamma0(kappa), F(13, 10))
print("\n" + verdict.describe())

# integrating out interior vertices maps the examples onto smaller diagrams
r0 = reduce_vertex(gamma0(kappa), "y2", at_lambda=1)
r1 = reduce_vertex(reduce_vertex(gamma1(kappa), "y2", at_lambda=1), "y3", at_lambda=1)
print("\ngamma0 minus y2 ~ gamma0_prime:", isomorphic(r0, gamma0_prime(kappa)))
print("gamma1 minus y2, y3 ~ gamma_tilde:", isomorphic(r1, gamma_tilde(L - kappa, 2 - kappa)))
print("\nDSL form of the reduced gamma0:\n" + r0.to_dsl())
