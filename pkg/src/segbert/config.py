"""Run configuration: flat ``key = value`` sections parsed with configparser."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .features import MelConfig
from .speechbert import SpeechBertConfig
from .tts import TTSConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    seed: int = 0
    bert_steps: int = 2000
    tts_steps: int = 3000


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    features: MelConfig = field(default_factory=lambda: MelConfig(n_mels=8))
    bert: SpeechBertConfig = field(default_factory=SpeechBertConfig)
    tts: TTSConfig = field(default_factory=TTSConfig)


SECTIONS = {"run": RunSettings, "features": MelConfig, "bert": SpeechBertConfig, "tts": TTSConfig}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if default is None or raw.lower() == "none":
        return None if raw.lower() == "none" else float(raw)
    try:
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def _build(cls, values: dict[str, str], section: str):
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    unknown = set(values) - set(defaults)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, defaults[k], f"[{section}] {k}") for k, v in values.items()}
    try:
        return dataclasses.replace(cls(), **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    cfg = base or RunConfig()
    parts = {}
    for name, cls in SECTIONS.items():
        current = getattr(cfg, name)
        values = {f.name: _render(getattr(current, f.name)) for f in dataclasses.fields(cls)}
        if cp.has_section(name):
            values.update(dict(cp.items(name)))
        parts[name] = _build(cls, values, name)
    return _check_consistency(RunConfig(**parts))


def _check_consistency(cfg: RunConfig) -> RunConfig:
    if cfg.bert.n_mels != cfg.features.n_mels or cfg.tts.n_mels != cfg.features.n_mels:
        raise ConfigError("n_mels must agree across [features], [bert] and [tts]")
    if cfg.tts.dynamic_embedding and cfg.tts.d_E != cfg.bert.d_E:
        raise ConfigError(f"[tts] d_E={cfg.tts.d_E} must equal the BERT embedding width {cfg.bert.d_E}")
    return cfg


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def render_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, cls in SECTIONS.items():
        part = getattr(cfg, name)
        cp[name] = {f.name: _render(getattr(part, f.name)) for f in dataclasses.fields(cls)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def render_section(name: str, obj) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp[name] = {f.name: _render(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_section(text: str, name: str):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    if not cp.has_section(name):
        raise ConfigError(f"missing [{name}] section")
    return _build(SECTIONS[name], dict(cp.items(name)), name)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode()).hexdigest()


def profile(name: str) -> RunConfig:
    """``desk``: CPU-sized defaults. ``paper``: 80 mel bins, T_S = 20,
    80-dim dynamic projection."""
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return parse_config("""
[features]
n_mels = 80
[bert]
n_mels = 80
[tts]
n_mels = 80
T_S = 20
dyn_proj_dim = 80
""")
    raise ConfigError(f"unknown profile {name!r} (expected 'desk' or 'paper')")


def load_config(path: str | Path | None, profile_name: str = "desk") -> RunConfig:
    base = profile(profile_name)
    if path is None:
        return base
    return parse_config(Path(path).read_text(encoding="utf-8"), base)
