"""Plain-text `key=value` run configuration.

Keys are the field names of CrfParams, LinkThresholds, DifficultPairConfig
and SceneConfig (no two share a name) plus a few run-level settings. Blank
lines and `#` comments are ignored; unknown keys are an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional

from .core import CrfParams
from .graph import DifficultPairConfig
from .simulate import SceneConfig
from .tracklets import LinkThresholds

SECTIONS = {
    "crf": CrfParams,
    "link": LinkThresholds,
    "pairs": DifficultPairConfig,
    "scene": SceneConfig,
}

# run-level keys and their parsers
RUN_KEYS = {
    "mode": str,
    "unary_provider": str,
    "pair_provider": str,
    "params_file": str,
    "velocity_window": int,
    "overlap": float,
}

MODES = ("unary", "crf")


class ConfigError(ValueError):
    """Unknown key or unparseable value."""


@dataclass(frozen=True)
class RunConfig:
    crf: CrfParams = field(default_factory=CrfParams)
    link: LinkThresholds = field(default_factory=LinkThresholds)
    pairs: DifficultPairConfig = field(default_factory=DifficultPairConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    mode: str = "crf"
    unary_provider: Optional[str] = None
    pair_provider: Optional[str] = None
    params_file: Optional[str] = None
    velocity_window: int = 5
    overlap: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.velocity_window < 2:
            raise ConfigError("velocity_window must be >= 2")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must lie in [0, 1)")

    def to_text(self) -> str:
        lines = []
        for name, cls in SECTIONS.items():
            lines.append(f"# {cls.__name__}")
            section = getattr(self, name)
            for f in fields(cls):
                lines.append(f"{f.name}={_format(getattr(section, f.name))}")
        lines.append("# run")
        for key in RUN_KEYS:
            lines.append(f"{key}={_format(getattr(self, key))}")
        return "\n".join(lines) + "\n"


def _key_index() -> dict[str, tuple[Optional[str], object]]:
    index: dict[str, tuple[Optional[str], object]] = {}
    for name, cls in SECTIONS.items():
        default = cls()
        for f in fields(cls):
            index[f.name] = (name, getattr(default, f.name))
    for key in RUN_KEYS:
        index[key] = (None, getattr(RunConfig(), key))
    return index


KEYS = _key_index()


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str):
    section, default = KEYS[key]
    raw = raw.strip()
    if section is None:
        if raw.lower() == "none" and key not in ("mode", "velocity_window", "overlap"):
            return None
        return RUN_KEYS[key](raw)
    if raw.lower() == "none":
        if default is None:
            return None
        raise ConfigError(f"{key} cannot be none")
    if default is None or isinstance(default, float):
        return float(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        v = float(raw)
        if not v.is_integer():
            raise ConfigError(f"{key} must be an integer, got {raw!r}")
        return int(v)
    return raw


def parse_pairs(pairs: Iterable[tuple[str, str]], base: Optional[RunConfig] = None, source: str = "<config>") -> RunConfig:
    """Apply `(key, value)` pairs on top of `base` (defaults when omitted)."""
    base = base or RunConfig()
    updates: dict[Optional[str], dict] = {}
    for key, raw in pairs:
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            value = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
        updates.setdefault(KEYS[key][0], {})[key] = value
    try:
        changes = {name: replace(getattr(base, name), **vals) for name, vals in updates.items() if name is not None}
        changes.update(updates.get(None, {}))
        return replace(base, **changes)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(text: str, source: str = "<config>", base: Optional[RunConfig] = None) -> RunConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        pairs.append((k, v))
    return parse_pairs(pairs, base, source)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path))


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """`--set key=value` flags; these win over the file."""
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        pairs.append(tuple(item.split("=", 1)))
    return parse_pairs(pairs, cfg, "--set")
