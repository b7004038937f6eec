from fractions import Fraction as F

import pytest
from hypothesis import given, strategies as st

from ewlimit.config import SCHEMA, RunConfig, load_config, parse_config, parse_fraction
from ewlimit.errors import ConfigError


def test_defaults_cover_schema():
    cfg = parse_config("")
    assert [k for k, _ in cfg.values] == sorted(SCHEMA)
    assert cfg["grid.h"] == F(1, 2) and cfg["cov.kappa"] == F(5, 2) and cfg["run.seed"] == 20240601
    assert cfg.get("nope", 3) == 3


def test_parse_values_and_comments():
    cfg = parse_config("# header\n grid.n = 16   # small\ncov.kappa=11/4\npairing.epsilons = 1, 1/2 , 1/4\n\n")
    assert cfg["grid.n"] == 16 and cfg["cov.kappa"] == F(11, 4)
    assert cfg["pairing.epsilons"] == (F(1), F(1, 2), F(1, 4))


def test_parse_fraction():
    assert parse_fraction(" 5/2 ") == F(5, 2) and parse_fraction("0.1") == F(1, 10) and parse_fraction("3") == 3
    for bad in ("1/0", "abc", ""):
        with pytest.raises(ValueError):
            parse_fraction(bad)


@pytest.mark.parametrize("text,line,needle", [
    ("grid.n = 16\nsolver.beta 0.1\n", 2, "key = value"),
    ("\n\nbogus.key = 1\n", 3, "unknown key"),
    ("grid.n = 16\n# c\ngrid.n = 32\n", 3, "duplicate"),
    ("cov.kappa = five\n", 1, "cov.kappa"),
    ("run.seed = 1.5\n", 1, "run.seed"),
    ("pairing.times = ,\n", 1, "pairing.times"),
    ("cov.profile =   \n", 1, "cov.profile"),
])
def test_errors_carry_line_numbers(text, line, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:") and needle in str(info.value)


def test_load_config(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("grid.n = 64\n", encoding="utf-8")
    assert load_config(p)["grid.n"] == 64
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_overrides():
    cfg = parse_config("").with_overrides(run__seed=7, cov__kappa=F(11, 4))
    assert cfg["run.seed"] == 7 and cfg["cov.kappa"] == F(11, 4)
    with pytest.raises(ConfigError):
        parse_config("").with_overrides(run__nope=1)


def test_hash_tracks_content():
    a = parse_config("grid.n = 16\n")
    assert a.hash() == parse_config("# same run\ngrid.n=16").hash()
    assert a.hash() != parse_config("grid.n = 32\n").hash()
    assert len(a.hash()) == 64


fractions = st.builds(F, st.integers(-1000, 1000), st.integers(1, 1000))


@given(st.integers(0, 2**64 - 1), st.integers(4, 256), fractions, st.lists(fractions, min_size=1, max_size=4),
       st.sampled_from(["linear", "constant", "saturating"]))
def test_round_trip(seed, n, beta, eps, sigma):
    cfg = parse_config("").with_overrides(run__seed=seed, grid__n=n, solver__beta=beta,
                                          pairing__epsilons=tuple(eps), solver__sigma=sigma)
    again = parse_config(cfg.serialize())
    assert again == cfg and again.hash() == cfg.hash()
    assert isinstance(again, RunConfig)
