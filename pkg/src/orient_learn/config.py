"""Plain-text ``key = value`` configuration with fixed sections and typed keys."""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field

from .data.synth import Perturbation
from .errors import UsageError
from .ghh import GhhConfig
from .network import ACTIVATIONS, ArchitectureSpec
from .trainer import TrainConfig

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "architecture": {
        "activation": (str, "ghh"),
        "S": (int, 4),
        "M": (int, 4),
        "dropout": (float, 0.3),
    },
    "training": {
        "epochs": (int, 100),
        "batch": (int, 10),
        "lr": (float, 1e-3),
        "halve_every": (int, 10),
        "seed": (int, 0),
        "atan2_eps": (float, 1e-8),
        "table_derivative": (str, "exact"),
    },
    "data": {
        "lambda": (float, 7.5),
        "n_pairs": (int, 500),
        "max_rotation": (float, 45.0),
        "per_copy": (int, 4),
        "max_keypoints": (int, 1000),
        "dist_thresh": (float, 2.5),
        "max_scale_ratio": (float, 1.5),
        "scale_jitter": (float, 0.1),
        "gain_jitter": (float, 0.1),
        "bias_jitter": (float, 0.05),
        "noise": (float, 0.01),
    },
    "paths": {
        "heldout": (str, ""),
        "loss_csv": (str, ""),
    },
}


class ConfigError(UsageError):
    pass


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(section: str, key: str, kind: type, text: str):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError("not finite")
            return value
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {kind.__name__}, got {text!r}") from None


@dataclass
class Config:
    values: dict[str, dict[str, object]] = field(
        default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                 for s, keys in SCHEMA.items()})

    def __post_init__(self):
        self.validate()

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        kind = SCHEMA[section][key][0]
        self.values[section][key] = _parse(section, key, kind, str(value))
        self.validate()

    def validate(self) -> None:
        a, t, d = self.values["architecture"], self.values["training"], self.values["data"]
        if a["activation"] not in ACTIVATIONS:
            raise ConfigError(f"[architecture] activation must be one of {', '.join(ACTIVATIONS)}")
        if a["S"] < 1 or a["M"] < 1:
            raise ConfigError("[architecture] S and M must be >= 1")
        if not 0.0 <= a["dropout"] < 1.0:
            raise ConfigError("[architecture] dropout must be in [0, 1)")
        if t["epochs"] < 0 or t["batch"] < 1 or t["lr"] <= 0:
            raise ConfigError("[training] needs epochs >= 0, batch >= 1, lr > 0")
        if t["table_derivative"] not in ("exact", "central"):
            raise ConfigError("[training] table_derivative must be exact or central")
        if d["lambda"] <= 0 or d["n_pairs"] < 0 or d["max_keypoints"] < 1:
            raise ConfigError("[data] needs lambda > 0, n_pairs >= 0, max_keypoints >= 1")

    # -- text form ------------------------------------------------------------

    def dumps(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_format(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "Config":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                           comment_prefixes=("#", ";"))
        parser.optionxform = str  # keys are case-sensitive (S, M)
        try:
            parser.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{source}: unknown key [{section}] {key}")
                cfg.values[section][key] = _parse(section, key, SCHEMA[section][key][0], raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.loads(text, str(path))

    # -- typed views ----------------------------------------------------------

    def architecture(self) -> ArchitectureSpec:
        """S and M shape the GHH groups; maxout uses S = 1 and the others ignore both."""
        a = self.values["architecture"]
        s = 1 if a["activation"] == "maxout" else a["S"]
        return ArchitectureSpec.for_activation(a["activation"], ghh=GhhConfig(s, a["M"]),
                                               dropout=a["dropout"])

    def train_config(self) -> TrainConfig:
        t = self.values["training"]
        return TrainConfig(epochs=t["epochs"], batch_size=t["batch"], learning_rate=t["lr"],
                           halve_every=t["halve_every"], seed=t["seed"],
                           atan2_eps=t["atan2_eps"], table_derivative=t["table_derivative"])

    def perturbation(self) -> Perturbation:
        d = self.values["data"]
        return Perturbation(d["scale_jitter"], d["gain_jitter"], d["bias_jitter"], d["noise"])
