"""Run configuration: a sectioned key=value text file (INI syntax).

One schema drives parsing, validation, the resolved-config snapshot and
the published JSON schema (docs/config.schema.json). Unknown sections
or keys are rejected, every range rule is checked before any work
starts, and error messages name the offending ``section.key``.
"""

import configparser
from dataclasses import dataclass, field
from io import StringIO

import numpy as np

from .glimpser import GlimpseConfig
from .halting import HaltingConfig
from .model import ModelConfig
from .training import LossConfig, TrainConfig
from .video import DIRECTIONS, DatasetSpec


class ConfigError(Exception):
    pass


@dataclass
class _Field:
    type: type
    default: object
    lo: float = None
    hi: float = None
    lo_open: bool = False
    hi_open: bool = False
    choices: tuple = None

    def range_text(self):
        if self.choices:
            return "one of " + "|".join(map(str, self.choices))
        if self.lo is None and self.hi is None:
            return None
        lo = "(-inf" if self.lo is None else ("(" if self.lo_open else "[") + str(self.lo)
        hi = "inf)" if self.hi is None else str(self.hi) + (")" if self.hi_open else "]")
        return f"in {lo}, {hi}"


SCHEMA = {
    "model": {
        "layers": _Field(int, 4, lo=1),
        "dim": _Field(int, 64, lo=1),
        "heads": _Field(int, 4, lo=1),
        "patch": _Field(int, 8, lo=1),
        "frames": _Field(int, 8, lo=2),
        "height": _Field(int, 32, lo=1),
        "width": _Field(int, 32, lo=1),
        "channels": _Field(int, 1, lo=1),
        "classes": _Field(int, 4, lo=2, hi=len(DIRECTIONS)),
    },
    "halting": {
        "enabled": _Field(bool, True),
        "gamma": _Field(float, 10.0),
        "beta": _Field(float, 10.0),
        "epsilon": _Field(float, 0.01, lo=0.0, hi=1.0, lo_open=True, hi_open=True),
    },
    "glimpser": {
        "enabled": _Field(bool, True),
        "R": _Field(float, 0.5, lo=0.0, hi=1.0, lo_open=True),
    },
    "loss": {
        "alpha_p": _Field(float, 5e-4, lo=0.0),
        "alpha_m": _Field(float, 0.01, lo=0.0),
    },
    "training": {
        "lr": _Field(float, 1e-5, lo=0.0, lo_open=True),
        "lr_min": _Field(float, 0.0, lo=0.0),
        "base_epochs": _Field(int, 0, lo=0),
        "epochs": _Field(int, 10, lo=0),
        "batch_size": _Field(int, 8, lo=1),
        "grad_clip": _Field(float, 1.0, lo=0.0),
    },
    "dataset": {
        "train_per_class": _Field(int, 8, lo=1),
        "eval_per_class": _Field(int, 8, lo=1),
        "square": _Field(int, 12, lo=1),
        "speed": _Field(int, 3, lo=1),
        "noise": _Field(float, 0.05, lo=0.0),
        "align": _Field(int, 1, lo=1),
    },
    "run": {
        "out_dir": _Field(str, "runs/default"),
        "seed": _Field(int, 0, lo=0),
        "precision": _Field(str, "float32", choices=("float32", "float64")),
    },
}

_BOOLS = {"true": True, "1": True, "yes": True, "on": True,
          "false": False, "0": False, "no": False, "off": False}


def _parse_value(section, key, f, raw):
    where = f"{section}.{key}"
    if f.type is bool:
        v = _BOOLS.get(raw.strip().lower())
        if v is None:
            raise ConfigError(f"config: {where} must be a boolean, got {raw!r}")
        return v
    if f.type is str:
        v = raw.strip()
    else:
        try:
            v = f.type(raw)
        except ValueError:
            raise ConfigError(f"config: {where} must be {f.type.__name__}, got {raw!r}") from None
    if f.choices and v not in f.choices:
        raise ConfigError(f"config: {where} must be {f.range_text()}, got {v!r}")
    if f.type in (int, float):
        bad = (
            (f.lo is not None and (v < f.lo or (f.lo_open and v == f.lo)))
            or (f.hi is not None and (v > f.hi or (f.hi_open and v == f.hi)))
            or not np.isfinite(v)
        )
        if bad:
            raise ConfigError(f"config: {where} must be {f.range_text()}, got {v}")
    return v


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, pair):
        return self.values[pair]

    @classmethod
    def from_string(cls, text):
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"config: parse error: {e}") from None
        values = {}
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"config: unknown section [{section}]")
            for key, raw in cp.items(section):
                match = next((k for k in SCHEMA[section] if k.lower() == key.lower()), None)
                if match is None:
                    raise ConfigError(f"config: unknown key {section}.{key}")
                values[(section, match)] = _parse_value(section, match, SCHEMA[section][match], raw)
        for section, keys in SCHEMA.items():
            for key, f in keys.items():
                values.setdefault((section, key), f.default)
        rc = cls(values)
        rc._cross_validate()
        return rc

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"config: cannot read {path}: {e.strerror}") from None
        return cls.from_string(text)

    def _cross_validate(self):
        v = self.values
        if v[("model", "dim")] % v[("model", "heads")]:
            raise ConfigError("config: model.heads must divide model.dim")
        for dim in ("height", "width"):
            if v[("model", dim)] % v[("model", "patch")]:
                raise ConfigError(f"config: model.patch must divide model.{dim}")
        if v[("dataset", "square")] >= min(v[("model", "height")], v[("model", "width")]):
            raise ConfigError("config: dataset.square must be smaller than the frame")

    # ---- typed views -------------------------------------------------
    def _section(self, name):
        return {k: self.values[(name, k)] for k in SCHEMA[name]}

    def model_config(self):
        m = self._section("model")
        return ModelConfig(layers=m["layers"], dim=m["dim"], heads=m["heads"],
                           patch=m["patch"], frames=m["frames"], height=m["height"],
                           width=m["width"], channels=m["channels"], classes=m["classes"])

    def halting_config(self):
        h = self._section("halting")
        return HaltingConfig(gamma=h["gamma"], beta=h["beta"], epsilon=h["epsilon"],
                             layers=self.values[("model", "layers")], enabled=h["enabled"])

    def glimpse_config(self):
        g = self._section("glimpser")
        return GlimpseConfig(g["R"]) if g["enabled"] else None

    def loss_config(self):
        l = self._section("loss")
        return LossConfig(alpha_p=l["alpha_p"], alpha_m=l["alpha_m"])

    def train_config(self, stage):
        t = self._section("training")
        epochs = t["base_epochs"] if stage == "base" else t["epochs"]
        return TrainConfig(lr=t["lr"], lr_min=t["lr_min"], epochs=epochs,
                           batch_size=t["batch_size"], stage=stage, grad_clip=t["grad_clip"])

    def dataset_spec(self, split):
        m = self._section("model")
        d = self._section("dataset")
        per = d["train_per_class"] if split == "train" else d["eval_per_class"]
        return DatasetSpec(frames=m["frames"], height=m["height"], width=m["width"],
                           channels=m["channels"], classes=m["classes"], per_class=per,
                           square=d["square"], speed=d["speed"], noise=d["noise"],
                           align=d["align"])

    @property
    def seed(self):
        return self.values[("run", "seed")]

    @property
    def out_dir(self):
        return self.values[("run", "out_dir")]

    @property
    def dtype(self):
        return np.float32 if self.values[("run", "precision")] == "float32" else np.float64

    def override(self, section, key, value):
        self.values[(section, key)] = value

    def to_ini(self):
        """Resolved snapshot: every key explicit, canonical order."""
        buf = StringIO()
        for section, keys in SCHEMA.items():
            buf.write(f"[{section}]\n")
            for key in keys:
                v = self.values[(section, key)]
                if isinstance(v, bool):
                    v = "true" if v else "false"
                buf.write(f"{key} = {v}\n")
            buf.write("\n")
        return buf.getvalue()


def json_schema():
    """JSON-schema rendering of SCHEMA (published in docs/)."""
    types = {int: "integer", float: "number", bool: "boolean", str: "string"}
    props = {}
    for section, keys in SCHEMA.items():
        sprops = {}
        for key, f in keys.items():
            entry = {"type": types[f.type], "default": f.default}
            if f.choices:
                entry["enum"] = list(f.choices)
            if f.lo is not None:
                entry["exclusiveMinimum" if f.lo_open else "minimum"] = f.lo
            if f.hi is not None:
                entry["exclusiveMaximum" if f.hi_open else "maximum"] = f.hi
            sprops[key] = entry
        props[section] = {"type": "object", "properties": sprops, "additionalProperties": False}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "tokenhalt run configuration",
        "type": "object",
        "properties": props,
        "additionalProperties": False,
    }
