"""Experiment configuration: a flat TOML schema with validation and presets.

A config has the sections ``[run]``, ``[data]``, ``[partition]``,
``[topology]``, ``[train]`` and ``[eval]``; every key is optional except
``partition.plan`` for non-i.i.d. runs. Unknown sections or keys are rejected.
``partition.strict = false`` lets a run continue, with a warning, when the
class-proportion assumption cannot be met exactly. Relative paths are resolved against the config file's directory first and the
working directory second.
"""

import dataclasses
import hashlib
import json
import re
import sys
from importlib import resources
from pathlib import Path

from .errors import ParseError, ValidationError
from .training import TrainConfig, derive_seed

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PRESETS = (
    "mnist-iid-paper",
    "mnist-noniid-4",
    "noniid-5-replicated",
    "synthetic-desk-iid",
    "synthetic-desk-noniid",
)

DEFAULTS = {
    "run": {"algorithm": "iid", "seed": 0, "out": "runs/default", "name": ""},
    "data": {
        "source": "synthetic",
        "n_classes": 3,
        "class_dim": 3,
        "per_class": 150,
        "ambient_dim": 32,
        "noise": 0.05,
        "test_per_class": 50,
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "limit": 2000,
        "test_limit": 500,
        "cache": "",
    },
    "partition": {"mode": "iid", "n_nodes": 4, "label_sets": [], "plan": "", "enforce": True, "strict": True},
    "topology": {"p": 0.5, "complete": False},
    "train": {f.name: f.default for f in dataclasses.fields(TrainConfig) if f.name != "seed"},
    "eval": {
        "energy": 0.95,
        "tol_orth": 0.2,
        "tol_spec": 0.1,
        "class_dim": 0,
        "max_spread": 2.0,
        "heatmap_samples": 300,
        "min_accuracy": 0.0,
    },
}

CHOICES = {
    ("run", "algorithm"): ("iid", "noniid", "dsgd"),
    ("data", "source"): ("synthetic", "mnist", "cache"),
    ("partition", "mode"): ("iid", "by-labels"),
    ("train", "activation"): ("relu", "elu"),
    ("train", "compression_weight"): ("inner", "node"),
    ("train", "bcd_order"): ("ascending", "descending"),
}

PATH_KEYS = {("data", k) for k in ("train_images", "train_labels", "test_images", "test_labels", "cache")} | {
    ("partition", "plan")
}


@dataclasses.dataclass
class ExperimentConfig:
    """Validated configuration with every default filled in."""

    sections: dict
    source: str = ""

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def algorithm(self):
        return self.sections["run"]["algorithm"]

    @property
    def master_seed(self):
        return self.sections["run"]["seed"]

    def seed(self, stage):
        """Stage seed derived from the master seed by a fixed schedule."""
        return derive_seed(self.master_seed, stage)

    def train_config(self):
        kw = dict(self.sections["train"])
        kw["hidden"] = tuple(kw["hidden"])
        return TrainConfig(seed=self.seed("train"), **kw)

    def semantic(self):
        """Every field that affects numeric output (the output directory does not)."""
        out = json.loads(json.dumps(self.sections))
        out["run"].pop("out", None)
        out["run"].pop("name", None)
        return out

    def hash(self):
        blob = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed=None, out=None):
        sections = json.loads(json.dumps(self.sections))
        if seed is not None:
            sections["run"]["seed"] = int(seed)
        if out is not None:
            sections["run"]["out"] = str(out)
        return ExperimentConfig(sections, self.source)


def _parse_toml(text):
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        msg = str(exc)
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", msg)
            line = int(m.group(1)) if m else None
        key = None
        if line is not None:
            lines = text.splitlines()
            if 0 < line <= len(lines):
                key = lines[line - 1].split("=")[0].strip() or None
        raise ParseError(msg, line, key) from None


def _check_type(section, key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) and not isinstance(default, bool):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
        value = list(value) if ok else value
    else:
        # optional ints such as train.local_steps
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
    if not ok:
        raise ValidationError(f"{section}.{key}", f"expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _resolve(path, base):
    p = Path(path)
    if p.is_absolute() or not path:
        return path
    if base is not None and (base / p).exists():
        return str(base / p)
    return str(p)


def validate(raw, base=None, source=""):
    """Fill defaults, reject unknown keys and check cross-field requirements."""
    if not isinstance(raw, dict):
        raise ValidationError("<root>", "config must be a table")
    sections = json.loads(json.dumps(DEFAULTS, default=list))
    for name, table in raw.items():
        if name not in DEFAULTS:
            raise ValidationError(name, "unknown section")
        if not isinstance(table, dict):
            raise ValidationError(name, "must be a table")
        for key, value in table.items():
            if key not in DEFAULTS[name]:
                raise ValidationError(f"{name}.{key}", "unknown key")
            value = _check_type(name, key, value, DEFAULTS[name][key])
            if (name, key) in CHOICES and value not in CHOICES[(name, key)]:
                raise ValidationError(f"{name}.{key}", f"must be one of {CHOICES[(name, key)]}")
            if (name, key) in PATH_KEYS:
                value = _resolve(value, base)
            sections[name][key] = value

    train = sections["train"]
    for key in ("rho", "lr", "eps_sq"):
        if not train[key] > 0:
            raise ValidationError(f"train.{key}", "must be positive")
    if train["gamma"] < 0:
        raise ValidationError("train.gamma", "must be non-negative")
    if train["rounds"] < 1:
        raise ValidationError("train.rounds", "must be >= 1")
    if train["local_steps"] is not None and train["local_steps"] < 1:
        raise ValidationError("train.local_steps", "must be >= 1")
    if not 0 < sections["topology"]["p"] <= 1:
        raise ValidationError("topology.p", "must lie in (0, 1]")
    if not 0 < sections["eval"]["energy"] <= 1:
        raise ValidationError("eval.energy", "must lie in (0, 1]")
    part = sections["partition"]
    if part["mode"] == "by-labels":
        if not part["label_sets"]:
            raise ValidationError("partition.label_sets", "required for by-labels partitioning")
        part["n_nodes"] = len(part["label_sets"])
    if part["n_nodes"] < 1:
        raise ValidationError("partition.n_nodes", "must be >= 1")
    if sections["run"]["algorithm"] == "noniid":
        if not part["plan"]:
            raise ValidationError("partition.plan", "non-i.i.d. runs need a cluster plan file")
        if part["mode"] != "by-labels":
            raise ValidationError("partition.mode", "non-i.i.d. runs need by-labels partitioning")
    data = sections["data"]
    if data["source"] == "mnist":
        for key in ("train_images", "train_labels"):
            if not data[key]:
                raise ValidationError(f"data.{key}", "required for mnist data")
    if data["source"] == "cache" and not data["cache"]:
        raise ValidationError("data.cache", "required for cached data")
    return ExperimentConfig(sections, source)


def _preset_file(name):
    return resources.files("dmcr2").joinpath("presets", f"{name}.toml")


def load_config(path):
    """Load a TOML config from a path, or a packaged preset by name."""
    p = Path(path)
    if not p.exists():
        if str(path) in PRESETS:
            ref = _preset_file(str(path))
            with resources.as_file(ref) as real:
                return validate(_parse_toml(real.read_text()), real.parent, str(path))
        raise ValidationError("--config", f"no such file or preset: {path}")
    return validate(_parse_toml(p.read_text()), p.resolve().parent, str(p))
