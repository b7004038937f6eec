import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import linear_two_point

from ewlimit.errors import GridMismatch, NonFinite, StabilityWarning, StationarityNotReached
from ewlimit.mc_analysis import mann_kendall, replica_mean
from ewlimit.noise import CovarianceSpec, NoiseSlice, TorusGrid, sample_increment
from ewlimit.rng import Stream
from ewlimit.solver import (FieldState, Nonlinearity, SolverConfig, estimate_nu_eff, evolve, heat_semigroup_step,
                            ito_step, pullback_discrepancies, read_snapshot, run_ensemble, simulate_pullback,
                            write_snapshot)

KAPPA = 2.5
GRID = TorusGrid(3, 16, 0.5)
COV = CovarianceSpec(KAPPA, 3)


def config(sigma=None, beta=0.1, dt=0.01, grid=GRID, **kw):
    return SolverConfig(beta, dt, sigma or Nonlinearity.linear(), COV, grid, **kw)


# --- nonlinearities --------------------------------------------------------------


@pytest.mark.parametrize("text,lip", [("linear", 1.0), ("constant:2.5", 0.0), ("affine:1,-3", 3.0),
                                      ("saturating:2", 1.0)])
def test_nonlinearity_parse_roundtrip(text, lip):
    s = Nonlinearity.parse(text)
    assert s.lipschitz_constant == lip
    assert Nonlinearity.parse(str(s)) == s


@pytest.mark.parametrize("bad", ["quadratic", "constant", "affine:1", "saturating:0", "linear:1"])
def test_nonlinearity_parse_rejects(bad):
    with pytest.raises(ValueError):
        Nonlinearity.parse(bad)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_nonlinearities_are_lipschitz(x, y):
    for s in (Nonlinearity.linear(), Nonlinearity.constant(3.0), Nonlinearity.affine(1.0, -2.0),
              Nonlinearity.saturating(2.0)):
        assert abs(float(s(np.array(x))) - float(s(np.array(y)))) <= s.lipschitz_constant * abs(x - y) + 1e-12


def test_saturating_extension():
    s = Nonlinearity.saturating(2.0)
    assert s(np.array([-1.0, 0.5, 3.0])).tolist() == [0.0, 0.5, 2.0]


# --- configuration -------------------------------------------------------------------


def test_stability_gate_warns():
    with pytest.warns(StabilityWarning):
        config(beta=2.0, dt=0.01)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        config(beta=0.1, dt=0.01)


def test_config_validation():
    with pytest.raises(ValueError):
        config(beta=-1.0)
    with pytest.raises(ValueError):
        config(dt=0.0)
    with pytest.raises(GridMismatch):
        SolverConfig(0.1, 0.01, Nonlinearity.linear(), CovarianceSpec(KAPPA, 4), GRID)


def test_config_hash_stable_and_sensitive():
    assert config().config_hash() == config().config_hash()
    assert config().config_hash() != config(beta=0.05).config_hash()


# --- heat semigroup ----------------------------------------------------------------


def test_heat_constant_is_fixed():
    s = heat_semigroup_step(FieldState.flat(GRID, level=2.5), 0.3)
    assert np.allclose(s.values, 2.5, rtol=0, atol=1e-14) and s.time == pytest.approx(0.3)


def test_heat_fourier_mode():
    g = TorusGrid(3, 16, 0.5)
    x = np.arange(16) * 0.5
    k = 2 * math.pi * 3 / g.side_length
    u = np.broadcast_to(np.cos(k * x)[:, None, None], g.shape)
    out = heat_semigroup_step(FieldState(g, 0.0, u), 0.2)
    assert np.allclose(out.values, math.exp(-0.5 * k * k * 0.2) * u, atol=1e-13)


@given(st.floats(0.01, 2.0), st.floats(0.01, 2.0))
def test_heat_semigroup_composition(a, b):
    rng = np.random.default_rng(1)
    s = FieldState(GRID, 0.0, rng.standard_normal(GRID.shape))
    two = heat_semigroup_step(heat_semigroup_step(s, a), b)
    one = heat_semigroup_step(s, a + b)
    assert np.allclose(two.values, one.values, atol=1e-12)
    assert one.values.mean() == pytest.approx(s.values.mean(), abs=1e-13)


def test_heat_point_mass_matches_continuum_kernel():
    g = TorusGrid(3, 64, 0.25)
    u = np.zeros(g.shape)
    u[0, 0, 0] = 1.0 / g.cell_volume
    out = heat_semigroup_step(FieldState(g, 0.0, u), 1.0)
    assert out.values[0, 0, 0] == pytest.approx((2 * math.pi) ** -1.5, rel=0.01)
    assert (2 * math.pi) ** -1.5 == pytest.approx(0.063494, abs=1e-6)


# --- one step --------------------------------------------------------------------


def test_ito_step_beta_zero_is_heat_step():
    rng = np.random.default_rng(2)
    s = FieldState(GRID, 0.0, 1 + 0.1 * rng.standard_normal(GRID.shape))
    cfg = config(beta=0.0)
    w = sample_increment(cfg.sampler, cfg.dt, Stream(0).at(0, 0))
    assert np.array_equal(ito_step(s, cfg, w).values, heat_semigroup_step(s, cfg.dt).values)


def test_ito_step_uses_prestep_sigma():
    cfg = config()
    rng = np.random.default_rng(3)
    u = 1 + 0.1 * rng.standard_normal(GRID.shape)
    w = sample_increment(cfg.sampler, cfg.dt, Stream(0).at(0, 0))
    got = ito_step(FieldState(GRID, 0.0, u), cfg, w).values
    expect = heat_semigroup_step(FieldState(GRID, 0.0, u), cfg.dt).values + 0.1 * u * w.values
    assert np.allclose(got, expect, atol=1e-14)


def test_ito_step_checks():
    cfg = config()
    s = FieldState.flat(GRID)
    w = sample_increment(cfg.sampler, 0.02, Stream(0).at(0, 0))
    with pytest.raises(ValueError):
        ito_step(s, cfg, w)
    other = TorusGrid(3, 16, 1.0)
    with pytest.raises(GridMismatch):
        ito_step(FieldState.flat(other), cfg, NoiseSlice(other, np.zeros(other.shape), cfg.dt))
    bad = NoiseSlice(GRID, np.full(GRID.shape, np.inf), cfg.dt)
    with pytest.raises(NonFinite):
        ito_step(s, cfg, bad)


# --- trajectories ------------------------------------------------------------------


def test_horizon_zero_returns_flat_state():
    (s,) = evolve(config(), 0.0, [0.0], Stream(1))
    assert s.time == 0.0 and np.all(s.values == 1.0)


def test_evolve_deterministic():
    a = evolve(config(), 0.2, [0.1, 0.2], Stream(4), replica=2)
    b = evolve(config(), 0.2, [0.1, 0.2], Stream(4), replica=2)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert a[0].time == pytest.approx(0.1)


def test_evolve_maps_times_to_last_step():
    (s,) = evolve(config(), 0.1, [0.055], Stream(4))
    assert s.time == pytest.approx(0.05)


def test_ensemble_independent_of_batch_and_workers():
    cfg = config()
    a = run_ensemble(cfg, 0.1, [0.1], Stream(8), 6, batch_size=6)[0]
    b = run_ensemble(cfg, 0.1, [0.1], Stream(8), 6, batch_size=1, workers=4)[0]
    c = np.concatenate([run_ensemble(cfg, 0.1, [0.1], Stream(8), 3, first_replica=s)[0] for s in (0, 3)])
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_ensemble_guards():
    with pytest.raises(ValueError):
        run_ensemble(config(), 0.105, [0.1], Stream(0), 1)
    with pytest.raises(ValueError):
        run_ensemble(config(), 0.1, [0.1, 0.05], Stream(0), 1)
    with pytest.raises(ValueError):
        run_ensemble(config(), 0.1, [0.2], Stream(0), 1)


def test_beta_zero_freezes_at_one():
    (u,) = run_ensemble(config(beta=0.0), 0.5, [0.5], Stream(0), 2)
    assert np.array_equal(u, np.ones_like(u))


def test_additive_mean_zero():
    cfg = config(Nonlinearity.constant(1.0))
    (m,) = run_ensemble(cfg, 0.5, [0.5], Stream(12), 200, observe=lambda v, t: v[(slice(None), 0, 0, 0)] - 1)
    assert replica_mean(m).contains(0.0)


def test_linear_mean_preserved():
    (m,) = run_ensemble(config(), 0.2, [0.2], Stream(13), 1000, batch_size=50,
                        observe=lambda v, t: v[(slice(None), 0, 0, 0)])
    assert replica_mean(m).contains(1.0)


def test_linear_moments_bounded_on_window():
    """Second moment against the exact lattice recursion; no trend in residual or 4th moment."""
    cfg = config()
    steps = [100 * k for k in range(1, 11)]
    exact = linear_two_point(cfg.sampler, cfg.beta, cfg.dt, steps[-1], set(steps))

    def observe(v, t):
        flat = v.reshape(v.shape[0], -1)
        return np.stack([(flat**2).mean(1), (flat**4).mean(1)], axis=1)

    obs = run_ensemble(cfg, 10.0, [s * cfg.dt for s in steps], Stream(3), 32, observe=observe, batch_size=32)
    resid, fourth = [], []
    for s, o in zip(steps, obs):
        m2 = replica_mean(o[:, 0])
        assert m2.contains(exact[s].flat[0])
        resid.append(m2.mean - exact[s].flat[0])
        fourth.append(replica_mean(o[:, 1]).mean)
    for series in (resid, fourth):
        tau, p = mann_kendall(series)
        assert not (tau > 0 and p < 0.05)


# --- pullback -----------------------------------------------------------------------


def test_pullback_equal_K_identical():
    a, b = simulate_pullback(config(), [0.5, 0.5], 0.2, Stream(5))
    assert np.array_equal(a.values, b.values) and a.time == pytest.approx(0.2)


def test_pullback_beta_zero_all_flat():
    for s in simulate_pullback(config(beta=0.0), [0.1, 0.2, 0.4], 0.1, Stream(5)):
        assert np.array_equal(s.values, np.ones(GRID.shape))


def test_pullback_coupling_matches_evolve():
    # K = 0 run is an ordinary forward run on the non-negative steps
    cfg = config()
    (k0,) = simulate_pullback(cfg, [0.0], 0.1, Stream(6), replica=1)
    (fwd,) = evolve(cfg, 0.1, [0.1], Stream(6), replica=1)
    assert np.array_equal(k0.values, fwd.values)


def test_pullback_discrepancies_shape_and_consistency():
    cfg = config()
    K = [0.1, 0.2, 0.4]
    d = pullback_discrepancies(cfg, K, 0.1, Stream(7), 3, batch_size=2)
    assert d.shape == (3, 2) and np.all(d > 0)
    states = simulate_pullback(cfg, K, 0.1, Stream(7), replica=2)
    direct = [np.mean((b.values - a.values) ** 2) for a, b in zip(states, states[1:])]
    assert np.allclose(d[2], direct, rtol=1e-12)


def test_pullback_guards():
    with pytest.raises(ValueError):
        simulate_pullback(config(), [0.4, 0.2], 0.1, Stream(0))
    with pytest.raises(ValueError):
        simulate_pullback(config(), [], 0.1, Stream(0))
    with pytest.raises(ValueError):
        simulate_pullback(config(), [0.105], 0.1, Stream(0))


# --- effective variance ---------------------------------------------------------------


def test_nu_eff_constant_exact():
    r = estimate_nu_eff(config(Nonlinearity.constant(-1.5)), 1.0, 10, Stream(0))
    assert r.mean == 1.5 and r.stderr == 0.0


def test_nu_eff_linear_is_one():
    r = estimate_nu_eff(config(), 1.0, 64, Stream(1), batch_size=32)
    assert r.contains(1.0)


def test_nu_eff_saturating_regression_pin():
    r = estimate_nu_eff(config(Nonlinearity.saturating(2.0)), 2.0, 64, Stream(2024), batch_size=32)
    assert 0 < r.mean <= 2 and r.stderr > 0
    assert r.mean == pytest.approx(0.9970016523700482, rel=1e-9)


def test_nu_eff_stationarity_warning():
    with pytest.warns(StationarityNotReached):
        r = estimate_nu_eff(config(Nonlinearity.affine(0.5, 0.5)), 1.0, 4, Stream(1), tolerance=0.0)
    assert r.meta["status"] == "StationarityNotReached"


def test_nu_eff_burn_in_guard():
    with pytest.raises(ValueError):
        estimate_nu_eff(config(), 0.5, 4, Stream(0))


# --- snapshots ------------------------------------------------------------------------


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    s = FieldState(GRID, 1.25, rng.standard_normal(GRID.shape))
    p = write_snapshot(tmp_path / "u.fld", s, config_hash="abc", seed=7)
    raw = p.read_bytes()
    assert raw[:8] == b"SPDEFLD1" and len(raw) == 8 + 4 + 4 + 8 + 8 + 8 * GRID.sites
    back, meta = read_snapshot(p)
    assert np.array_equal(back.values, s.values) and back.time == 1.25 and back.grid.same_as(GRID)
    assert meta["config_hash"] == "abc" and meta["seed"] == 7


def test_snapshot_bad_magic(tmp_path):
    p = tmp_path / "x.fld"
    p.write_bytes(b"NOTAFILE" + bytes(100))
    with pytest.raises(ValueError):
        read_snapshot(p)


def test_field_state_read_only_and_shape_checked():
    s = FieldState.flat(GRID)
    with pytest.raises(ValueError):
        s.values[0, 0, 0] = 2.0
    with pytest.raises(GridMismatch):
        FieldState(GRID, 0.0, np.ones((4, 4, 4)))
