"""Experiment configuration: an INI file with one section per concern.

Numbers accept fractions (``R = 2/3, 1/3, 1``); lists are comma separated;
an empty value means "not set" for optional entries.  Unknown sections or
keys are rejected.  :func:`dumps` writes the shortest round-trip form of
every float, so ``loads(dumps(cfg)) == cfg``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import DomainError

FLOAT, INT, BOOL, STR, FLOATS, OPT_FLOAT = "float", "int", "bool", "str", "floats", "opt_float"


def _f(default, kind=FLOAT):
    if isinstance(default, (list, tuple)):
        return field(default=tuple(default), metadata={"kind": kind})
    return field(default=default, metadata={"kind": kind})


@dataclass(frozen=True)
class FlowSection:
    kind: str = _f("double_gyre", STR)
    A: float = _f(0.1)
    omega: float = _f(math.pi)
    alpha: float = _f(0.01)
    velocity: tuple = _f((0.0, 0.0), FLOATS)


@dataclass(frozen=True)
class ParticleSection:
    R: tuple = _f((2 / 3, 1 / 3, 1.0), FLOATS)
    St_over_R: float = _f(0.01)
    Re: float = _f(1.0)
    g: tuple = _f((0.0, 0.0), FLOATS)
    kappa: float | None = _f(None, OPT_FLOAT)


@dataclass(frozen=True)
class EnsembleSection:
    box: tuple = _f((0.2, 1.8, 0.2, 0.8), FLOATS)
    nx: int = _f(5, INT)
    ny: int = _f(3, INT)
    w0: tuple = _f((10.0, 10.0), FLOATS)


@dataclass(frozen=True)
class SolverSection:
    backend: str = _f("mild_volterra", STR)
    dt: float = _f(0.01)
    tau_end: float = _f(1000.0)
    picard_tol: float = _f(1e-12)
    picard_max_iters: int = _f(50, INT)
    faxen: bool = _f(False, BOOL)
    t0: float = _f(0.0)


@dataclass(frozen=True)
class EnvelopeSection:
    tol: float = _f(1e-6)
    omit_eps2: bool = _f(False, BOOL)
    violation_rtol: float = _f(1e-9)


@dataclass(frozen=True)
class BoundsSection:
    nx: int = _f(801, INT)
    ny: int = _f(401, INT)
    nt: int = _f(128, INT)
    matrix_norm: str = _f("frobenius", STR)
    refine_tol: float = _f(1e-2)
    L_A: float | None = _f(None, OPT_FLOAT)
    L_B: float | None = _f(None, OPT_FLOAT)
    L_M: float | None = _f(None, OPT_FLOAT)
    L_c: float | None = _f(None, OPT_FLOAT)


@dataclass(frozen=True)
class Fig4Section:
    R: tuple = _f((0.1, 1 / 3, 2 / 3, 1.0, 1.9), FLOATS)
    dt: float = _f(0.05)
    tau_end: float = _f(1000.0)
    slope_window: tuple = _f((100.0, 1000.0), FLOATS)
    plateau_tau: float = _f(1e6)
    omit_eps2: bool = _f(True, BOOL)


@dataclass(frozen=True)
class RestartSection:
    R: float = _f(1.0)
    y0: tuple = _f((1.0, 0.5), FLOATS)
    tau1: float = _f(5.0)
    window: float = _f(5.0)
    dt: float = _f(0.01)
    # absolute tolerance on w that restart gaps are measured against
    tolerance: float = _f(1e-8)


@dataclass(frozen=True)
class TableSection:
    kappa: tuple = _f((), FLOATS)
    tau_min: float = _f(1e-3)
    tau_max: float = _f(1e3)
    points: int = _f(200, INT)


@dataclass(frozen=True)
class OutputSection:
    dir: str = _f("out", STR)
    output_every: int = _f(10, INT)


@dataclass(frozen=True)
class RunSection:
    seed: int = _f(0, INT)
    threads: int = _f(1, INT)


@dataclass(frozen=True)
class ExperimentConfig:
    flow: FlowSection = field(default_factory=FlowSection)
    particle: ParticleSection = field(default_factory=ParticleSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    solver: SolverSection = field(default_factory=SolverSection)
    envelope: EnvelopeSection = field(default_factory=EnvelopeSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    fig4: Fig4Section = field(default_factory=Fig4Section)
    restart: RestartSection = field(default_factory=RestartSection)
    table: TableSection = field(default_factory=TableSection)
    output: OutputSection = field(default_factory=OutputSection)
    run: RunSection = field(default_factory=RunSection)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        """Copy with keys of one section changed."""
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; changes iff a setting changes."""
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_SECTION_TYPES = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}


def parse_number(text: str) -> float:
    """Parse ``"0.25"``, ``"2/3"``, ``"1e-6"``, ``"pi"`` or ``"2*pi"``."""
    s = text.strip().lower()
    if s in ("pi", "1*pi"):
        return math.pi
    if s.endswith("*pi"):
        return parse_number(s[:-3]) * math.pi
    try:
        if "/" in s:
            return float(Fraction(s))
        return float(s)
    except (ValueError, ZeroDivisionError) as exc:
        raise DomainError(f"not a number: {text!r}") from exc


def _parse_value(kind, raw, where):
    raw = raw.strip()
    try:
        if kind == FLOAT:
            return parse_number(raw)
        if kind == OPT_FLOAT:
            return None if raw == "" else parse_number(raw)
        if kind == INT:
            return int(raw)
        if kind == BOOL:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == FLOATS:
            return tuple(parse_number(p) for p in raw.split(",") if p.strip())
        return raw
    except (ValueError, DomainError) as exc:
        raise DomainError(f"{where}: cannot parse {raw!r} as {kind}") from exc


def _format_value(kind, value):
    if kind in (FLOAT, OPT_FLOAT):
        return "" if value is None else repr(float(value))
    if kind == BOOL:
        return "true" if value else "false"
    if kind == FLOATS:
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read_string(text)
    sections = {}
    for name in parser.sections():
        if name not in _SECTION_TYPES:
            raise DomainError(f"unknown config section [{name}]")
        proto = _SECTION_TYPES[name]()
        kinds = {f.name: f.metadata["kind"] for f in dataclasses.fields(proto)}
        values = {}
        for key, raw in parser.items(name):
            if key not in kinds:
                raise DomainError(f"unknown key {key!r} in [{name}]")
            values[key] = _parse_value(kinds[key], raw, f"[{name}] {key}")
        sections[name] = dataclasses.replace(proto, **values)
    return ExperimentConfig(**sections)


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(config: ExperimentConfig) -> str:
    lines = []
    for name in _SECTION_TYPES:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format_value(f.metadata['kind'], getattr(section, f.name))}".rstrip())
        lines.append("")
    return "\n".join(lines)


def dump(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(config))
