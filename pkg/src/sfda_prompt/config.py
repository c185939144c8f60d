"""Experiment configuration files.

Plain ``key=value`` lines. Keys before any header are experiment-level;
``[data]``, ``[source]``, ``[pls]`` and ``[fas]`` sections configure the
generator, source training and the two adaptation stages. ``#`` starts a
comment. Unknown keys and out-of-range values are rejected with the line
number.
"""
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, RejectedInputError
from .pipeline import FasConfig, PlsConfig, SourceConfig

VARIANTS = ("no_da", "self_train", "pls_only", "fas_only", "full")


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    n_train: int = 200
    n_test: int = 50
    seed: int = 0
    source_domains: tuple = ("source_a", "source_b")
    target_domain: str = "target"


@dataclass
class ExperimentConfig:
    data_root: str = ""
    source_model: str = ""
    variant: str = "full"
    variants: tuple = VARIANTS
    seeds: tuple = (0, 1, 2)
    data: DataConfig = field(default_factory=DataConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    pls: PlsConfig = field(default_factory=PlsConfig)
    fas: FasConfig = field(default_factory=FasConfig)


# ----------------------------------------------------------- value parsing

def _int(lo=None, hi=None):
    def parse(text):
        value = int(text)
        if lo is not None and value < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and value > hi:
            raise ValueError(f"must be <= {hi}")
        return value
    return parse


def _float(lo=None, hi=None, lo_open=False, hi_open=False):
    def parse(text):
        value = float(text)
        if lo is not None and (value < lo or (lo_open and value == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and (value > hi or (hi_open and value == hi)):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}")
        return value
    return parse


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text
    return parse


def _bool(text):
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError("must be true or false")


def _str(text):
    return text


def _names(text):
    items = tuple(t.strip() for t in text.split(",") if t.strip())
    if not items:
        raise ValueError("must list at least one name")
    return items


def _variants(text):
    items = _names(text)
    for item in items:
        if item not in VARIANTS:
            raise ValueError(f"unknown variant {item!r}")
    return items


def _seeds(text):
    items = tuple(int(t) for t in _names(text))
    if any(s < 0 for s in items):
        raise ValueError("seeds must be non-negative")
    return items


def _layers(text):
    if text == "all":
        return "all"
    return _int(lo=1)(text)


# section -> key -> (parser, attribute name)
SCHEMA = {
    "": {
        "data_root": (_str, "data_root"),
        "source_model": (_str, "source_model"),
        "variant": (_choice(*VARIANTS), "variant"),
        "variants": (_variants, "variants"),
        "seeds": (_seeds, "seeds"),
    },
    "data": {
        "height": (_int(lo=8), "height"),
        "width": (_int(lo=8), "width"),
        "channels": (_int(lo=1), "channels"),
        "n_train": (_int(lo=1), "n_train"),
        "n_test": (_int(lo=1), "n_test"),
        "seed": (_int(lo=0), "seed"),
        "source_domains": (_names, "source_domains"),
        "target_domain": (_str, "target_domain"),
    },
    "source": {
        "epochs": (_int(lo=1), "epochs"),
        "lr0": (_float(lo=0, lo_open=True), "lr0"),
        "batch_size": (_int(lo=2), "batch_size"),
        "momentum": (_float(lo=0, hi=1, hi_open=True), "momentum"),
        "base_channels": (_int(lo=2), "base_channels"),
        "depth": (_int(lo=2), "depth"),
        "noise_sigma": (_float(lo=0), "noise_sigma"),
        "max_shift": (_int(lo=0), "max_shift"),
    },
    "pls": {
        "alpha": (_float(lo=0), "alpha"),
        "bn_layers": (_layers, "bn_layer_count"),
        "epochs": (_int(lo=1), "epochs"),
        "lr0": (_float(lo=0, lo_open=True), "lr0"),
        "batch_size": (_int(lo=1), "batch_size"),
        "momentum": (_float(lo=0, hi=1, hi_open=True), "momentum"),
        "combine_op": (_choice("add", "mul"), "combine_op"),
        "prompt_space": (_choice("spatial", "frequency"), "prompt_space"),
    },
    "fas": {
        "gamma": (_float(lo=0), "gamma"),
        "epochs": (_int(lo=1), "epochs"),
        "lr0": (_float(lo=0, lo_open=True), "lr0"),
        "threshold": (_float(lo=0, hi=1, lo_open=True, hi_open=True), "threshold"),
        "batch_size": (_int(lo=1), "batch_size"),
        "momentum": (_float(lo=0, hi=1, hi_open=True), "momentum"),
        "beta_max": (_float(lo=0, hi=0.5, lo_open=True), "beta_max"),
        "augment": (_bool, "augment"),
    },
}

_SECTION_TYPES = {"data": DataConfig, "source": SourceConfig, "pls": PlsConfig, "fas": FasConfig}


def parse_config_text(text, source="<config>"):
    values = {section: {} for section in SCHEMA}
    lines = {section: {} for section in SCHEMA}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}: malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA or section == "":
                raise ConfigError(f"{source}: unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected key=value, got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        where = f"[{section}]" if section else "top level"
        if key not in SCHEMA[section]:
            raise ConfigError(f"{source}: unknown key {key!r} at {where}", lineno)
        if key in values[section]:
            raise ConfigError(f"{source}: duplicate key {key!r} at {where}", lineno)
        parser, attr = SCHEMA[section][key]
        try:
            values[section][attr] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {value!r} ({exc})", lineno) from None
        lines[section][attr] = lineno

    built = {}
    for name, cls in _SECTION_TYPES.items():
        try:
            built[name] = cls(**values[name])
        except RejectedInputError as exc:
            first = min(lines[name].values(), default=None)
            raise ConfigError(f"{source}: [{name}] {exc}", first) from None
    return ExperimentConfig(**values[""], **built)


def parse_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=str(path))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config):
    """Canonical text: every key, schema order, one blank line between sections."""
    blocks = []
    for section, keys in SCHEMA.items():
        target = config if section == "" else getattr(config, section)
        body = [f"{key}={_format(getattr(target, attr))}" for key, (_, attr) in keys.items()]
        if section:
            body.insert(0, f"[{section}]")
        blocks.append("\n".join(body))
    return "\n\n".join(blocks) + "\n"


def config_fields(section):
    cls = _SECTION_TYPES[section]
    return [f.name for f in fields(cls)]
