"""Experiment config files: INI-style sections parsed into :class:`ExperimentConfig`.

Unknown sections/keys, bad types and invalid values raise
:class:`ConfigError` carrying the offending line number.
"""

from __future__ import annotations

import configparser
import re
from pathlib import Path

import numpy as np

from .alloop import ExperimentConfig
from .augment import AugPolicy, AugStep
from .exceptions import ConfigError
from .heuristics import AggregationSpec
from .model import TrainConfig
from .projection import ALL_CHANNELS, SensorConfig


def _opt(conv):
    def parse(s):
        return None if s.strip().lower() in ("", "none") else conv(s)
    parse.__name__ = f"optional {conv.__name__}"
    return parse


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s):
    return tuple(float(x) for x in s.replace(",", " ").split())


def _strs(s):
    return tuple(x for x in s.replace(",", " ").split())


_bool.__name__ = "boolean"
_ints.__name__ = "integer list"
_floats.__name__ = "float list"
_strs.__name__ = "name list"

# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "manifest": (_opt(str), None),
        "test_manifest": (_opt(str), None),
        "pool_size": (_opt(int), None),
        "test_size": (_opt(int), None),
        "name": (str, "experiment"),
    },
    "sensor": {
        "width": (int, 64),
        "height": (int, 16),
        "fov_up": (float, 3.0),
        "fov_down": (float, 25.0),
        "channels": (_strs, ("x", "y", "r", "remission")),
    },
    "model": {
        "hidden": (_ints, (16, 32, 32)),
        "dropout": (float, 0.2),
        "mc_iterations": (int, 8),
    },
    "train": {
        "max_iterations": (int, 100000),
        "lr": (float, 0.01),
        "lr_decay": (float, 0.99),
        "weight_decay": (float, 0.0001),
        "batch_size": (int, 16),
        "eval_period": (int, 500),
        "patience": (int, 15),
        "min_delta": (float, 1e-3),
        "momentum": (float, 0.9),
    },
    "al": {
        "init_size": (int, 1041),
        "budget": (int, 800),
        "heuristic": (str, "bald"),
        "aggregation": (str, "sum"),
        "class_weights": (_opt(_floats), None),
        "seed": (int, 0),
        "model_seed": (_opt(int), None),
        "max_steps": (_opt(int), None),
        "threads": (int, 1),
    },
    "augment": {
        "enabled": (_bool, False),
        "prob": (float, 0.5),
        "seed": (int, 0),
        "transforms": (_strs, ("random_pixel_dropout", "coarse_dropout", "gaussian_noise_r",
                               "gaussian_noise_remission", "cyclic_shift", "instance_cut_paste")),
        "pixel_dropout_p": (float, 0.1),
        "coarse_holes_min": (int, 1),
        "coarse_holes_max": (int, 5),
        "sigma_depth": (float, 0.1),
        "sigma_remission": (float, 0.03),
        "cut_paste_classes": (_ints, (2, 3, 4)),
        "cut_paste_max": (int, 3),
    },
    "report": {
        "out_dir": (str, "out"),
        "le_convention": (str, "as-written"),
        "le_targets": (_opt(_floats), None),
        "miou_fs": (_opt(float), None),
    },
}

REQUIRED = {("data", "manifest")}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_index(text):
    index, section = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), lineno)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            index.setdefault((section, m.group(1).strip().lower()), lineno)
    return index


def read_config_text(text, source="<config>"):
    """Parse config text into ``{section: {key: value}}`` with defaults and checks."""
    lines = _line_index(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None

    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    seen = set()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", lines.get((section, None)))
        for key, raw in cp.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line)
            conv, _ = SCHEMA[section][key]
            try:
                values[section][key] = conv(raw)
            except ValueError:
                raise ConfigError(
                    f"[{section}] {key} = {raw!r} is not a valid {conv.__name__}", line
                ) from None
            seen.add((section, key))
    missing = REQUIRED - seen
    if missing:
        s, k = sorted(missing)[0]
        # point at the section header, or at the end of the file when the section is absent
        at = lines.get((s, None)) or max(1, len(text.splitlines()))
        raise ConfigError(f"missing required key {k!r} in [{s}]", at)
    return values, lines


def _build(values, base_dir=None):
    d, s, m, t, a, g, r = (values[k] for k in ("data", "sensor", "model", "train", "al", "augment", "report"))

    def rel(p):
        if p is None or base_dir is None or Path(p).is_absolute():
            return p
        return str(Path(base_dir) / p)

    channels = tuple(s["channels"])
    if set(channels) - set(ALL_CHANNELS) or len(set(channels)) != len(channels):
        raise ValueError(f"channels must be distinct names from {ALL_CHANNELS}")
    policy = None
    if g["enabled"]:
        steps = []
        for name in g["transforms"]:
            if name == "random_pixel_dropout":
                steps.append(AugStep(name, g["prob"], {"p": g["pixel_dropout_p"]}))
            elif name == "coarse_dropout":
                steps.append(AugStep(name, g["prob"],
                                     {"n_holes_range": (g["coarse_holes_min"], g["coarse_holes_max"])}))
            elif name == "gaussian_noise_r":
                steps.append(AugStep("gaussian_noise", g["prob"], {"channel": "r", "sigma": g["sigma_depth"]}))
            elif name == "gaussian_noise_remission":
                steps.append(AugStep("gaussian_noise", g["prob"],
                                     {"channel": "remission", "sigma": g["sigma_remission"]}))
            elif name == "cyclic_shift":
                steps.append(AugStep(name, g["prob"], {}))
            elif name == "instance_cut_paste":
                steps.append(AugStep(name, g["prob"], {"class_whitelist": tuple(g["cut_paste_classes"]),
                                                       "max_instances": g["cut_paste_max"]}))
            else:
                raise ValueError(f"unknown transform {name!r}")
        policy = AugPolicy(steps, g["seed"])
    if r["le_convention"] not in ("as-written", "inverted"):
        raise ValueError("le_convention must be 'as-written' or 'inverted'")
    weights = a["class_weights"]
    cfg = ExperimentConfig(
        manifest=rel(d["manifest"]),
        test_manifest=rel(d["test_manifest"]),
        name=d["name"],
        sensor=SensorConfig.from_degrees(s["width"], s["height"], s["fov_up"], s["fov_down"]),
        channels=channels,
        pool_size=d["pool_size"],
        test_size=d["test_size"],
        init_size=a["init_size"],
        budget=a["budget"],
        heuristic=a["heuristic"],
        aggregation=AggregationSpec(a["aggregation"], tuple(weights) if weights else None),
        mc_iterations=m["mc_iterations"],
        hidden=tuple(m["hidden"]),
        dropout=m["dropout"],
        train=TrainConfig(t["max_iterations"], t["lr"], t["lr_decay"], t["weight_decay"],
                          t["batch_size"], t["eval_period"], t["patience"], t["min_delta"],
                          t["momentum"]),
        aug=policy,
        seed=a["seed"],
        model_seed=a["model_seed"],
        max_steps=a["max_steps"],
        threads=a["threads"],
        out_dir=r["out_dir"],
    )
    return cfg


_ALIASES = {"class weights": ("al", "class_weights"), "fov": ("sensor", "fov_up"),
            "transform": ("augment", "transforms"), "probability": ("augment", "prob")}


def _blame(msg, lines):
    """Line of the config key a validation message refers to, if any."""
    for (section, key), line in sorted(lines.items(), key=lambda kv: -len(kv[0][1] or "")):
        if key and re.search(rf"\b{re.escape(key)}\b", msg):
            return line
    for word, loc in _ALIASES.items():
        if word in msg and loc in lines:
            return lines[loc]
    return None


def parse_config_text(text, base_dir=None, source="<config>") -> ExperimentConfig:
    values, lines = read_config_text(text, source)
    try:
        cfg = _build(values, base_dir)
        cfg.validate()
    except ConfigError as exc:
        if exc.line is None:
            raise ConfigError(str(exc), _blame(str(exc), lines)) from None
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), _blame(str(exc), lines)) from None
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Read and validate a config file; relative data paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base_dir=path.parent, source=str(path))


def config_values(cfg: ExperimentConfig) -> dict:
    """Inverse of parsing: section/key values representing ``cfg``."""
    s = cfg.sensor
    out = {
        "data": {"manifest": cfg.manifest, "test_manifest": cfg.test_manifest,
                 "pool_size": cfg.pool_size, "test_size": cfg.test_size, "name": cfg.name},
        "sensor": {"width": s.width, "height": s.height, "fov_up": round(float(np.degrees(s.fov_up)), 10),
                   "fov_down": round(float(np.degrees(s.fov_down)), 10), "channels": cfg.channels},
        "model": {"hidden": cfg.hidden, "dropout": cfg.dropout, "mc_iterations": cfg.mc_iterations},
        "train": {k: getattr(cfg.train, k) for k in SCHEMA["train"]},
        "al": {"init_size": cfg.init_size, "budget": cfg.budget, "heuristic": cfg.heuristic,
               "aggregation": cfg.aggregation.method, "class_weights": cfg.aggregation.weights,
               "seed": cfg.seed, "model_seed": cfg.model_seed, "max_steps": cfg.max_steps},
        "augment": {"enabled": cfg.aug is not None},
    }
    if cfg.aug is not None:
        out["augment"]["seed"] = cfg.aug.seed
        out["augment"]["policy"] = [(st.name, st.prob, sorted(st.params.items())) for st in cfg.aug.steps]
    return out


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Normalized snapshot with sorted sections and keys.

    Output-only settings (``out_dir``, ``threads``) are left out so they do
    not invalidate a resume.
    """
    values = config_values(cfg)
    chunks = []
    for section in sorted(values):
        chunks.append(f"[{section}]")
        for key in sorted(values[section]):
            chunks.append(f"{key} = {_fmt(values[section][key])}")
        chunks.append("")
    return "\n".join(chunks)
