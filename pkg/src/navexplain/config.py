"""Run configuration: INI sections ``run``, ``sim``, ``planner``, ``dqn``,
``branch`` and ``eval`` mapped onto the per-module dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .branch import BranchConfig
from .dqn import DqnConfig
from .evaluate import EvalConfig
from .planner import PlannerConfig
from .sim import SimConfig


class ConfigError(ValueError):
    """Malformed configuration file."""


@dataclass(frozen=True)
class RunSection:
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    sim: SimConfig = field(default_factory=SimConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    branch: BranchConfig = field(default_factory=BranchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))

    def override(self, section: str, **values) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **values)})


SECTIONS = [f.name for f in dataclasses.fields(RunConfig)]


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def render_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _line_of(text: str, section: str, key: str) -> int:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"\[(.+)\]", stripped)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", stripped, re.IGNORECASE):
            return lineno
    return 0


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    built = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}:{_section_line(text, name)}: unknown section [{name}]")
    for name in SECTIONS:
        default_section = getattr(RunConfig(), name)
        known = {f.name: f for f in dataclasses.fields(default_section)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                where = f"{source}:{_line_of(text, name, key)}"
                if key not in known:
                    raise ConfigError(f"{where}: unknown key {key!r} in [{name}]")
                values[key] = _convert(raw, getattr(default_section, key), where)
        try:
            built[name] = dataclasses.replace(default_section, **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: invalid [{name}] section: {exc}") from None
    return RunConfig(**built)


def _section_line(text: str, name: str) -> int:
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip() == f"[{name}]":
            return lineno
    return 0


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(), str(path))
