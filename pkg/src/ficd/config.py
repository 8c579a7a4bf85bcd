"""key = value run configuration.

One ``key = value`` per line, ``#`` starts a comment.  Keys are dotted:
``train.*`` (TrainConfig), ``model.*`` (DenoiserSpec), ``sample.*``
(SampleConfig minus the schedule, which comes from the checkpoint) and
``phantom.*`` (PhantomSpec).  Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from .diffusion import SampleConfig
from .model import DenoiserSpec
from .phantom import PhantomSpec
from .trainer import TrainConfig, desk_config


class ConfigError(ValueError):
    pass


SAMPLE_KEYS = ("mc_repeats", "seed", "clamp_x0", "final_noise_zero", "sigma")


def _fields(cls, skip=()):
    return {f.name: f.type for f in dataclasses.fields(cls) if f.name not in skip}


SECTIONS = {
    "train": _fields(TrainConfig, skip=("model",)),
    "model": _fields(DenoiserSpec),
    "sample": {k: v for k, v in _fields(SampleConfig).items() if k in SAMPLE_KEYS},
    "phantom": _fields(PhantomSpec),
}


def known_keys():
    return sorted(f"{s}.{k}" for s, keys in SECTIONS.items() for k in keys)


def _convert(key, kind, raw):
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "int | None":
            return None if raw.lower() == "none" else int(raw)
        if kind == "tuple":
            return tuple(float(x) if "." in x else int(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None


def parse_text(text):
    """Parse config text into ``{dotted_key: raw_string}``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=desk_config)
    sample: dict = field(default_factory=dict)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def sample_config(self, schedule) -> SampleConfig:
        return SampleConfig(schedule, **self.sample)

    def resolved(self):
        """Every addressable key with its effective value."""
        values = {}
        for name in SECTIONS["train"]:
            values[f"train.{name}"] = getattr(self.train, name)
        for name in SECTIONS["model"]:
            values[f"model.{name}"] = getattr(self.train.model, name)
        defaults = {f.name: f.default for f in dataclasses.fields(SampleConfig) if f.name in SAMPLE_KEYS}
        for name in SAMPLE_KEYS:
            values[f"sample.{name}"] = self.sample.get(name, defaults[name])
        for name in SECTIONS["phantom"]:
            values[f"phantom.{name}"] = getattr(self.phantom, name)
        return values

    def to_text(self):
        lines = []
        for k, v in self.resolved().items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def resolve(mapping, base: RunConfig | None = None) -> RunConfig:
    """Apply ``{dotted_key: raw}`` to ``base`` (desk defaults if omitted)."""
    base = base or RunConfig()
    grouped = {s: {} for s in SECTIONS}
    for key, raw in mapping.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in SECTIONS[section]:
            raise ConfigError(f"unknown config key: {key}")
        grouped[section][name] = _convert(key, SECTIONS[section][name], raw)
    try:
        model = replace(base.train.model, **grouped["model"])
        train = replace(base.train, model=model, **grouped["train"])
        sample = {**base.sample, **grouped["sample"]}
        SampleConfig(train.schedule(), **sample)
        phantom = replace(base.phantom, **grouped["phantom"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train, sample, phantom)


def load(path=None, overrides=None) -> RunConfig:
    mapping = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            mapping.update(parse_text(fh.read()))
    mapping.update(overrides or {})
    return resolve(mapping)
