"""Flat TOML-style config files and key=value overrides.

Sections map onto the dataclass configs: [model] -> EncoderConfig,
[sync] -> CrossModalConfig, [sampler] -> SamplerConfig, [train] -> TrainConfig,
[eval] -> OffsetSearchConfig, [synthetic] -> SyntheticConfig. Unknown sections
or keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict
from pathlib import Path

from .encoders import EncoderConfig
from .evaluation import OffsetSearchConfig
from .sync_model import CrossModalConfig
from .synthetic import SyntheticConfig
from .training import ConfigurationError, SamplerConfig, TrainConfig

SECTION_TYPES = {
    "model": EncoderConfig,
    "sync": CrossModalConfig,
    "sampler": SamplerConfig,
    "train": TrainConfig,
    "eval": OffsetSearchConfig,
    "synthetic": SyntheticConfig,
}


@dataclasses.dataclass
class RunConfig:
    model: EncoderConfig
    sync: CrossModalConfig
    sampler: SamplerConfig
    train: TrainConfig
    eval: OffsetSearchConfig
    synthetic: SyntheticConfig

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(**{name: typ() for name, typ in SECTION_TYPES.items()})

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTION_TYPES}

    def resolved_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        return [] if not inner else [_parse_value(p) for p in inner.split(",")]
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if (raw.startswith('"') and raw.endswith('"')) or \
       (raw.startswith("'") and raw.endswith("'")):
        return raw[1:-1]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse '[section]' headers plus 'key = value' lines into nested dicts."""
    sections: dict[str, dict] = {}
    current = None
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SECTION_TYPES:
                raise ConfigurationError(
                    f"{source}:{line_no}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{line_no}: expected key = value")
        if current is None:
            raise ConfigurationError(
                f"{source}:{line_no}: key outside of any [section]")
        key, raw = line.split("=", 1)
        sections[current][key.strip()] = _parse_value(raw)
    return sections


def _apply(cfg: RunConfig, section: str, key: str, value) -> None:
    target = getattr(cfg, section, None)
    if section not in SECTION_TYPES:
        raise ConfigurationError(f"unknown config section '{section}'")
    names = {f.name for f in dataclasses.fields(target)}
    if key not in names:
        raise ConfigurationError(f"unknown key '{section}.{key}'")
    setattr(target, key, value)


def load_run_config(path=None, overrides: list | None = None) -> RunConfig:
    """Build a RunConfig from defaults + optional file + key=value overrides.

    Overrides use dotted keys, e.g. 'sampler.visual_len=10'.
    """
    cfg = RunConfig.defaults()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        for section, kv in parse_config_text(path.read_text(), str(path)).items():
            for key, value in kv.items():
                _apply(cfg, section, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override must look like section.key=value: '{item}'")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigurationError(f"override key must be section.key: '{dotted}'")
        section, key = dotted.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), _parse_value(raw))
    # Re-run dataclass validation after field-level mutation.
    for name, typ in SECTION_TYPES.items():
        section = getattr(cfg, name)
        try:
            setattr(cfg, name, typ(**asdict(section)))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid [{name}] config: {exc}")
    return cfg
