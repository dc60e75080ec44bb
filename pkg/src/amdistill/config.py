"""Run configuration: sectioned key-value files with typed defaults and dotted overrides."""
from __future__ import annotations

import configparser
import os
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .amd import AmdConfig, LayerPairing
from .data import MixupConfig
from .kd import LossWeights
from .nn import ModelSpec
from .nn.models import FAMILIES, ModelSpecError
from .train import METHODS, TrainConfig

DATA_ROOT_ENV = "AMDISTILL_DATA_ROOT"
PRESET_DIR = Path(__file__).parent / "presets"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return text
    return parse


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


_MODEL_KEYS = {
    "family": (_choice(*FAMILIES), "wrn"),
    "depth": (int, 16),
    "width": (int, 1),
    "base_width": (int, 16),
    "tap_activation": (_choice("post", "pre"), "post"),
}

# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Callable[[str], Any], Any]]] = {
    "data": {
        "source": (_choice("synth", "cifar10"), "synth"),
        "root": (str, "data/cifar-10-batches-bin"),
        "cache_dir": (str, ""),
        "num_classes": (int, 10),
        "image_size": (int, 16),
        "n_per_class": (int, 60),
        "test_per_class": (int, 100),
        "noise": (float, 1.0),
        "distractors": (int, 3),
        "synth_seed": (int, 0),
        "train_subset": (int, 0),
        "test_subset": (int, 0),
        "dtype": (_choice("float32", "float64"), "float32"),
        "augment_pad": (int, 0),
        "mixup": (_bool, False),
        "mixup_alpha": (float, 0.2),
    },
    "teacher": dict(_MODEL_KEYS, width=(int, 2)),
    "student": dict(_MODEL_KEYS),
    "train": {
        "batch_size": (int, 128),
        "epochs": (int, 200),
        "lr": (float, 0.1),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-4),
        "milestones": (_ints, (40, 80, 120, 160)),
        "lr_decay": (float, 0.2),
        "seed": (int, 0),
        "eskd_stop": (_opt_int, None),
        "repeats": (int, 5),
    },
    "distill": {
        "method": (_choice(*METHODS), "amd-gl"),
        "teacher_checkpoint": (str, ""),
        "teacher_snapshot": (_choice("best", "eskd", "last"), "best"),
        "pairing": (str, "auto"),
        "lambda1": (float, 0.1),
        "lambda2": (float, 0.9),
        "tau": (float, 4.0),
        "gamma": (float, 5000.0),
        "s": (float, 64.0),
        "m": (float, 1.35),
        "d": (float, 2.0),
        "local_weight": (float, 0.2),
        "mask_threshold": (float, 0.5),
        "local_mode": (_choice("renormalize", "slice"), "renormalize"),
        # added to Frobenius norms during training so a dead map cannot divide by zero
        "norm_eps": (float, 1e-12),
    },
    "eval": {
        "checkpoint": (str, ""),
        "bins": (int, 15),
        "split": (_choice("test", "train"), "test"),
    },
}


class RunConfig:
    """Resolved configuration: defaults, then a file, then ``section.key=value`` overrides."""

    def __init__(self, values: Optional[Dict[str, Dict[str, Any]]] = None):
        self.values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, kv in (values or {}).items():
            for key, val in kv.items():
                self._check(sec, key)
                self.values[sec][key] = val

    @staticmethod
    def _check(section: str, key: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")

    def set(self, section: str, key: str, text: str) -> None:
        self._check(section, key)
        parser = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc

    def __getitem__(self, dotted: str) -> Any:
        section, _, key = dotted.partition(".")
        self._check(section, key)
        return self.values[section][key]

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg.update_from_file(resolve_config_path(path))
        for item in overrides:
            cfg.apply_override(item)
        return cfg

    def update_from_file(self, path: Path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, text in parser.items(section):
                self.set(section, key, text)

    def apply_override(self, item: str) -> None:
        dotted, eq, text = item.partition("=")
        section, dot, key = dotted.strip().partition(".")
        if not eq or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        self.set(section, key, text.strip())

    def to_ini(self) -> str:
        lines: List[str] = []
        for sec, kv in self.values.items():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {_fmt(v)}" for k, v in kv.items())
            lines.append("")
        return "\n".join(lines)

    def echo(self, out_dir) -> Path:
        """Write the fully resolved config next to the run's artifacts."""
        path = Path(out_dir) / "config.resolved.cfg"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path

    # -- typed views -----------------------------------------------------------

    def data_root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV) or self["data.root"])

    @property
    def dtype(self):
        return np.float64 if self["data.dtype"] == "float64" else np.float32

    def model_spec(self, role: str, input_shape, num_classes: int) -> ModelSpec:
        kv = self.values[role]
        spec = ModelSpec(family=kv["family"], depth=kv["depth"], width=kv["width"],
                         num_classes=num_classes, input_shape=tuple(input_shape),
                         base_width=kv["base_width"], tap_activation=kv["tap_activation"])
        try:
            spec.validate()
        except ModelSpecError as exc:
            raise ConfigError(f"[{role}] {exc}") from exc
        return spec

    def train_config(self) -> TrainConfig:
        kv = self.values["train"]
        cfg = TrainConfig(batch_size=kv["batch_size"], epochs=kv["epochs"], lr=kv["lr"],
                          momentum=kv["momentum"], weight_decay=kv["weight_decay"],
                          milestones=kv["milestones"], lr_decay=kv["lr_decay"], seed=kv["seed"],
                          eskd_stop=kv["eskd_stop"], repeats=kv["repeats"],
                          augment_pad=self["data.augment_pad"])
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from exc
        return cfg

    def loss_weights(self) -> LossWeights:
        kv = self.values["distill"]
        return LossWeights(kv["lambda1"], kv["lambda2"], kv["tau"], kv["gamma"])

    def amd_config(self) -> AmdConfig:
        kv = self.values["distill"]
        return AmdConfig(s=kv["s"], m=kv["m"], gamma=kv["gamma"], d=kv["d"],
                         local_weight=kv["local_weight"], global_weight=1 - kv["local_weight"],
                         mask_threshold=kv["mask_threshold"], local_mode=kv["local_mode"],
                         norm_eps=kv["norm_eps"])

    def mixup(self) -> MixupConfig:
        return MixupConfig(alpha=self["data.mixup_alpha"], enabled=self["data.mixup"])

    def pairing(self) -> Optional[LayerPairing]:
        """``auto`` pairs groups by position; otherwise ``t1:s1, t2:s2``."""
        text = self["distill.pairing"].strip()
        if text in ("", "auto"):
            return None
        pairs = []
        for item in text.split(","):
            t, colon, s = item.partition(":")
            if not colon:
                raise ConfigError(f"pairing entries must be teacher:student, got {item!r}")
            pairs.append((t.strip(), s.strip()))
        return LayerPairing(pairs)


def resolve_config_path(path) -> Path:
    """Look in the working directory first, then among the bundled presets."""
    p = Path(path)
    if p.is_file():
        return p
    bundled = PRESET_DIR / p.name
    if bundled.is_file():
        return bundled
    raise ConfigError(f"config file not found: {path}")
