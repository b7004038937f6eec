"""Flat ``key = value`` run configuration.

Values are typed by a fixed schema; rationals are kept exact so that a
serialised configuration re-parses to an identical run.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError

__all__ = ["SCHEMA", "RunConfig", "parse_config", "load_config", "parse_fraction"]


def parse_fraction(text: str) -> Fraction:
    """Exact rational from ``p/q``, an integer or a decimal literal."""
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a rational number: {text!r}") from None


def _int(text: str) -> int:
    v = int(text.strip(), 0)
    return v


def _str(text: str) -> str:
    if not text.strip():
        raise ValueError("empty value")
    return text.strip()


def _fraction_list(text: str) -> tuple:
    items = [s for s in text.split(",") if s.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(parse_fraction(s) for s in items)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "run.seed": (_int, 20240601),
    "run.replicas": (_int, 64),
    "run.batch_size": (_int, 16),
    "grid.dimension": (_int, 3),
    "grid.n": (_int, 32),
    "grid.h": (parse_fraction, Fraction(1, 2)),
    "cov.kappa": (parse_fraction, Fraction(5, 2)),
    "cov.profile": (_str, "inverse_poly"),
    "cov.amplitude": (parse_fraction, Fraction(1)),
    "solver.beta": (parse_fraction, Fraction(1, 10)),
    "solver.dt": (parse_fraction, Fraction(1, 100)),
    "solver.sigma": (_str, "linear"),
    "pairing.epsilons": (_fraction_list, (Fraction(1),)),
    "pairing.times": (_fraction_list, (Fraction(1),)),
    "pairing.shape": (_str, "bump"),
    "pairing.scale": (parse_fraction, Fraction(1)),
    "pairing.plateau": (parse_fraction, Fraction(1)),
    "pairing.center": (_fraction_list, (Fraction(0),)),
    "limit.nu_eff": (parse_fraction, Fraction(1)),
    "limit.rtol": (parse_fraction, Fraction(1, 10000)),
    "selftest.replicas": (_int, 1000),
    "analyze.samples": (_str, "samples.csv"),
    "analyze.limit": (_str, "limit_cov.csv"),
    "analyze.slack": (parse_fraction, Fraction(1)),
}


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration: every schema key with its typed value."""

    values: tuple  # sorted (key, value) pairs

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    def get(self, key: str, default=None):
        return dict(self.values).get(key, default)

    def with_overrides(self, **kv) -> "RunConfig":
        d = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            d[key] = v
        return RunConfig(tuple(sorted(d.items())))

    def serialize(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values)

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()


def parse_config(text: str) -> RunConfig:
    """Parse configuration text; unset keys take their defaults."""
    seen: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        try:
            seen[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", line=lineno) from None
    values = {k: seen.get(k, default) for k, (_, default) in SCHEMA.items()}
    return RunConfig(tuple(sorted(values.items())))


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text)
