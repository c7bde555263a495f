"""Plain-text run configuration: one ``section.field = value`` per line.

Sections are ``tracker``, ``train``, ``synth`` and ``flow``; every field of
the owning dataclass is addressable and unknown keys are rejected. Values
are parsed by the type of the field's default. Occlusion schedules are
written ``start:end`` pairs separated by commas, e.g. ``10:20, 40:48``.
"""
import dataclasses
from dataclasses import dataclass, field

from .errors import InvalidInputError
from .flowwarp import FlowConfig
from .tracker import TrackerConfig
from .traineval.synth import SynthConfig
from .traineval.train import TrainConfig

SECTIONS = {"tracker": TrackerConfig, "train": TrainConfig, "synth": SynthConfig, "flow": FlowConfig}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class ConfigError(InvalidInputError):
    """A configuration line names an unknown key or holds an invalid value."""

    def __init__(self, message, key=None, lineno=None):
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)
        self.key = key
        self.lineno = lineno


@dataclass(frozen=True)
class RunConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)


def _field_types(cls):
    return {f.name: type(f.default) if f.default is not dataclasses.MISSING else str
            for f in dataclasses.fields(cls)}


def _parse_occlusions(text):
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.split(","):
        a, sep, b = part.strip().partition(":")
        if not sep:
            raise ValueError(f"expected start:end, got {part.strip()!r}")
        out.append((int(a), int(b)))
    return tuple(out)


def _parse_value(kind, text):
    t = text.strip()
    if kind is bool:
        low = t.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {t!r}")
    if kind is int:
        return int(t)
    if kind is float:
        return float(t)
    if kind is tuple:
        return _parse_occlusions(t)
    return t


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(f"{a}:{b}" for a, b in v)
    return str(v)


def parse_config(text, base=None):
    """Parse config text on top of ``base`` (defaults when None)."""
    base = base or RunConfig()
    updates = {name: {} for name in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", key, lineno)
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"unknown key {key!r} (sections: {', '.join(SECTIONS)})", key, lineno)
        types = _field_types(SECTIONS[section])
        if name not in types:
            raise ConfigError(f"unknown key {key!r}", key, lineno)
        try:
            updates[section][name] = _parse_value(types[name], value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key, lineno) from None
    sections = {}
    for name, cls in SECTIONS.items():
        try:
            sections[name] = dataclasses.replace(getattr(base, name), **updates[name])
        except InvalidInputError as exc:
            raise ConfigError(f"invalid {name} settings: {exc}", name) from None
    return RunConfig(**sections)


def format_config(cfg):
    """Every field of every section, in declaration order."""
    lines = []
    for name in SECTIONS:
        sub = getattr(cfg, name)
        for f in dataclasses.fields(sub):
            lines.append(f"{name}.{f.name} = {_format_value(getattr(sub, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())
