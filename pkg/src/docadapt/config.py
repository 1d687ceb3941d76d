"""Config-file handling: flat INI sections mirroring the AdaptConfig tree.

A run is configured by (defaults) <- (INI file sections) <- (--set overrides),
and the fully resolved config is echoed into the run manifest so any run can
be re-executed bit-exactly from its manifest alone.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, fields
from pathlib import Path

from .adapt import AdaptConfig, OptimizerConfig
from .augment import AugmentConfig
from .consensus import ConsensusConfig
from .detector import DetectorConfig
from .ema import TeacherSchedule
from .errors import ConfigurationError
from .losses import LossWeights

_SECTIONS = {
    "detector": DetectorConfig,
    "schedule": TeacherSchedule,
    "consensus": ConsensusConfig,
    "weights": LossWeights,
    "augment": AugmentConfig,
    "optimizer": OptimizerConfig,
    "run": AdaptConfig,  # only AdaptConfig's own scalar fields live here
}

_RUN_FIELDS = ("epochs", "eval_every", "seed", "selection_mode", "hard_threshold", "use_kl", "use_auxiliary")


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"cannot parse boolean from {raw!r}")


def _parse_anchors(raw: str) -> tuple:
    pairs = []
    for chunk in raw.replace(";", ",").split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "x" not in chunk:
            raise ConfigurationError(f"anchor {chunk!r} must look like WIDTHxHEIGHT")
        w, h = chunk.split("x", 1)
        pairs.append((int(w), int(h)))
    if not pairs:
        raise ConfigurationError("anchor list is empty")
    return tuple(pairs)


def _parse_threshold_pairs(raw: str) -> tuple:
    out = []
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        cat, thr = chunk.split(":", 1)
        out.append((int(cat), float(thr)))
    return tuple(out)


_SPECIAL_PARSERS = {
    ("detector", "channels"): lambda raw: tuple(int(v) for v in raw.split(",") if v.strip()),
    ("detector", "anchors"): _parse_anchors,
    ("schedule", "n_update"): lambda raw: None if raw.strip().lower() == "auto" else int(raw),
    ("consensus", "keep_threshold_per_category"): _parse_threshold_pairs,
}


def _coerce(section: str, key: str, raw: str, default):
    parser = _SPECIAL_PARSERS.get((section, key))
    if parser is not None:
        return parser(raw)
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, str) or default is None:
        return raw.strip()
    raise ConfigurationError(f"no parser for [{section}] {key}")


def _section_defaults(section: str) -> dict:
    cls = _SECTIONS[section]
    inst = cls()  # throwaway instance resolves default_factory fields too
    return {
        f.name: getattr(inst, f.name)
        for f in fields(cls)
        if section != "run" or f.name in _RUN_FIELDS
    }


def load_config_file(path) -> dict:
    """Parse an INI config file into a {section: {key: value}} dict of typed values."""
    parser = configparser.ConfigParser()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    parser.read(path)
    out: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(
                f"unknown config section [{section}]; valid sections: {', '.join(_SECTIONS)}"
            )
        defaults = _section_defaults(section)
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
            out.setdefault(section, {})[key] = _coerce(section, key, raw, defaults[key])
    return out


def apply_overrides(values: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (from --set flags) onto parsed values."""
    out = {s: dict(kv) for s, kv in values.items()}
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown section in override {item!r}")
        defaults = _section_defaults(section)
        if key not in defaults:
            raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
        out.setdefault(section, {})[key] = _coerce(section, key, raw, defaults[key])
    return out


def build_adapt_config(values: dict) -> AdaptConfig:
    """Assemble the full AdaptConfig from a parsed {section: {key: value}} dict."""
    kwargs = dict(values.get("run", {}))
    kwargs["detector"] = DetectorConfig(**values.get("detector", {}))
    kwargs["schedule"] = TeacherSchedule(**values.get("schedule", {}))
    kwargs["consensus"] = ConsensusConfig(**values.get("consensus", {}))
    kwargs["weights"] = LossWeights(**values.get("weights", {}))
    kwargs["augment"] = AugmentConfig(**values.get("augment", {}))
    kwargs["optimizer"] = OptimizerConfig(**values.get("optimizer", {}))
    return AdaptConfig(**kwargs)


def adapt_config_to_dict(config: AdaptConfig) -> dict:
    """JSON-ready snapshot; inverse of :func:`adapt_config_from_dict`."""
    return asdict(config)


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def adapt_config_from_dict(snapshot: dict) -> AdaptConfig:
    snap = {k: _tupled(v) for k, v in snapshot.items()}
    return AdaptConfig(
        detector=DetectorConfig(**{k: _tupled(v) for k, v in snap["detector"].items()}),
        schedule=TeacherSchedule(**snap["schedule"]),
        consensus=ConsensusConfig(**{k: _tupled(v) for k, v in snap["consensus"].items()}),
        weights=LossWeights(**snap["weights"]),
        augment=AugmentConfig(**snap["augment"]),
        optimizer=OptimizerConfig(**snap["optimizer"]),
        **{k: snap[k] for k in _RUN_FIELDS},
    )


def default_config_text() -> str:
    """A fully-commented INI with every key at its default; `docadapt` --help points here."""
    lines = []
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        inst = cls()
        for f in fields(cls):
            if section == "run" and f.name not in _RUN_FIELDS:
                continue
            value = getattr(inst, f.name)
            if (section, f.name) in _SPECIAL_PARSERS:
                if f.name == "channels":
                    rendered = ",".join(str(v) for v in value)
                elif f.name == "anchors":
                    rendered = ",".join(f"{w}x{h}" for w, h in value)
                elif f.name == "n_update":
                    rendered = "auto" if value is None else str(value)
                else:
                    rendered = ",".join(f"{c}:{t}" for c, t in value)
            else:
                rendered = str(value)
            lines.append(f"{f.name} = {rendered}")
        lines.append("")
    return "\n".join(lines)
