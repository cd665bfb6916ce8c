"""Experiment configuration: INI-style ``key = value`` files with sections.

Unknown sections or keys and out-of-range values are rejected with the line
they came from. Presets ship in ``condkl/presets``.
"""

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, fields
from importlib import resources

PRESETS = ("paper-sigma065", "paper-sigma13", "desk-sigma065")
STAGES = ("synth", "fit", "condition", "propagate", "compare", "learn")


class ConfigError(ValueError):
    def __init__(self, message, line=None, source="<config>"):
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)
        self.line = line


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip() == "" else int(text)


def _list(text):
    return tuple(item.strip() for item in text.split(",") if item.strip())


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


# section -> key -> (attribute, parser, default, check, description of check)
SCHEMA = {
    "domain": {
        "lx": ("lx", float, 2.0, _positive, "> 0"),
        "ly": ("ly", float, 1.0, _positive, "> 0"),
    },
    "grid": {
        "nx": ("nx", int, 120, lambda v: v >= 2, ">= 2"),
        "ny": ("ny", int, 60, lambda v: v >= 2, ">= 2"),
    },
    "kernel": {
        "sigma": ("sigma", float, 0.65, _nonneg, ">= 0"),
        "l1": ("l1", float, 0.15, _positive, "> 0"),
        "l2": ("l2", float, 0.2, _positive, "> 0"),
        "sigma_eps": ("sigma_eps", float, 0.0, _nonneg, ">= 0"),
        "fit": ("fit_kernel", _bool, False, None, ""),
    },
    "reference": {
        "seed": ("reference_seed", int, 0, _nonneg, ">= 0"),
        "fraction": ("reference_fraction", float, 0.99, lambda v: 0 < v <= 1, "in (0, 1]"),
    },
    "observations": {
        "n": ("n_obs", int, 40, lambda v: v >= 1, ">= 1"),
        "seed": ("obs_seed", int, 1, _nonneg, ">= 0"),
        "file": ("obs_file", str, "", None, ""),
    },
    "model": {
        "approach": ("approach", str, "1", lambda v: v in ("1", "2", "unconditional"),
                     "one of 1, 2, unconditional"),
        "fraction": ("fraction", float, 0.99, lambda v: 0 < v <= 1, "in (0, 1]"),
        "d": ("d", _opt_int, None, lambda v: v is None or v >= 1, ">= 1 or blank"),
        "r": ("r", _opt_int, None, lambda v: v is None or v >= 1, ">= 1 or blank"),
    },
    "propagation": {
        "method": ("propagation", str, "mc", lambda v: v in ("mc", "collocation"),
                   "mc or collocation"),
        "mc_samples": ("mc_samples", int, 15000, lambda v: v >= 2, ">= 2"),
        "level": ("level", int, 3, lambda v: v >= 1, ">= 1"),
    },
    "active_learning": {
        "methods": ("al_methods", _list, ("1", "2"),
                    lambda v: len(v) > 0 and set(v) <= {"1", "2"}, "subset of 1, 2"),
        "n_am": ("n_am", int, 10, lambda v: v >= 1, ">= 1"),
        "ensemble": ("ensemble", int, 200, lambda v: v >= 2, ">= 2"),
        "mc_samples": ("al_mc_samples", int, 1000, lambda v: v >= 2, ">= 2"),
        "dump_criteria": ("dump_criteria", _bool, False, None, ""),
    },
    "run": {
        "seed": ("seed", int, 0, _nonneg, ">= 0"),
        "stages": ("stages", _list, STAGES, lambda v: set(v) <= set(STAGES),
                   "subset of " + ", ".join(STAGES)),
    },
    "output": {
        "dir": ("out_dir", str, "out", None, ""),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    lx: float
    ly: float
    nx: int
    ny: int
    sigma: float
    l1: float
    l2: float
    sigma_eps: float
    fit_kernel: bool
    reference_seed: int
    reference_fraction: float
    n_obs: int
    obs_seed: int
    obs_file: str
    approach: str
    fraction: float
    d: object
    r: object
    propagation: str
    mc_samples: int
    level: int
    al_methods: tuple
    n_am: int
    ensemble: int
    al_mc_samples: int
    dump_criteria: bool
    seed: int
    stages: tuple
    out_dir: str

    def to_dict(self) -> dict:
        out = {}
        for section, keys in SCHEMA.items():
            out[section] = {key: _jsonable(getattr(self, spec[0])) for key, spec in keys.items()}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ExperimentConfig(**values)


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _line_of(text, section, key=None):
    current = None
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return number
            continue
        if key is not None and current == section:
            m = re.match(r"([^=:#;]+)[=:]", line)
            if m and m.group(1).strip().lower() == key:
                return number
    return None


def parse_config(text, source="<config>", overrides=()) -> ExperimentConfig:
    """Parse and validate config text; ``overrides`` are ``section.key=value``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"),
                                       interpolation=None, empty_lines_in_values=False)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line, source) from exc

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value", None, source)
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown override {dotted!r}", None, source)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())

    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section), source)
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]",
                                  _line_of(text, section, key), source)
    for section, keys in SCHEMA.items():
        for key, (attr, parse, default, check, rule) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    value = parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}",
                                      _line_of(text, section, key), source) from exc
                if check is not None and not check(value):
                    raise ConfigError(f"[{section}] {key} = {raw!r} must be {rule}",
                                      _line_of(text, section, key), source)
            else:
                value = default
            values[attr] = value
    return ExperimentConfig(**values)


def preset_text(name) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return resources.files("condkl").joinpath("presets", f"{name}.ini").read_text()


def load_config(path_or_preset, overrides=()) -> ExperimentConfig:
    """Read a config file, or a shipped preset when given a preset name."""
    name = str(path_or_preset)
    if name in PRESETS:
        return parse_config(preset_text(name), f"preset:{name}", overrides)
    try:
        with open(name) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, name) from exc
    return parse_config(text, name, overrides)
