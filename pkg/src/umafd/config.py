"""Flat ``key=value`` run configuration covering synthetic-data, backbone and training fields.

Blank lines and lines starting with ``#`` are ignored.  Unknown keys are
rejected.  ``format_config`` writes every key, so parse -> format -> parse is
the identity.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from umafd.backbone import BackboneConfig
from umafd.data import SynthConfig
from umafd.errors import ConfigError
from umafd.losses import LOSS_NAMES, WeightMode
from umafd.trainer import TrainConfig

SEED_ENV = "UMAFD_SEED"


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(H=256, W=256))
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.synth.T, self.synth.H, self.synth.W

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            dataclasses.replace(self.synth, seed=seed),
            self.backbone,
            dataclasses.replace(self.train, seed=seed),
        )

    def with_train(self, **kw) -> "RunConfig":
        return RunConfig(self.synth, self.backbone, dataclasses.replace(self.train, **kw))


# key -> (section, kind); "seed" is shared by synth and train
_FIELDS: dict[str, tuple[tuple[str, ...], str]] = {}
for _section, _cls in (("synth", SynthConfig), ("backbone", BackboneConfig), ("train", TrainConfig)):
    for _f in dataclasses.fields(_cls):
        sections, _ = _FIELDS.get(_f.name, ((), ""))
        _FIELDS[_f.name] = (sections + (_section,), _f.name)

_INT = {"n_train_pairs", "n_test_depth", "T", "H", "W", "seed", "stage1_channels", "embedding_dim",
        "n_stages", "epochs", "lr_decay_epoch", "xbm_capacity"}
_FLOAT = {"head_init_std", "noise_level", "base_lr", "lr_decay_factor", "momentum", "tau", "margin", "grl_lambda", "val_fraction"}
_BOOL = {"idm_enabled", "depth_supervised", "triplet_normalize"}


def _parse_bool(key, raw):
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_value(key: str, raw: str):
    try:
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    if key in _BOOL:
        return _parse_bool(key, raw)
    if key == "weight_mode":
        try:
            return WeightMode(raw.lower())
        except ValueError:
            raise ConfigError(f"weight_mode must be fixed or adaptive, got {raw!r}") from None
    if key == "lambdas":
        try:
            vals = tuple(float(x) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"lambdas: cannot parse {raw!r}") from None
        if len(vals) != len(LOSS_NAMES):
            raise ConfigError(f"lambdas needs {len(LOSS_NAMES)} comma-separated values")
        return vals
    if key == "enabled_losses":
        names = frozenset(x.strip() for x in raw.split(",") if x.strip())
        bad = names - set(LOSS_NAMES)
        if bad:
            raise ConfigError(f"enabled_losses: unknown loss {sorted(bad)[0]!r}")
        return names
    raise ConfigError(f"unknown config key {key!r}")


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _parse_value(key, raw)
    if env.get(SEED_ENV):
        values["seed"] = _parse_value("seed", env[SEED_ENV])

    kwargs: dict[str, dict] = {"synth": {"H": 256, "W": 256}, "backbone": {}, "train": {}}
    for key, val in values.items():
        for section in _FIELDS[key][0]:
            kwargs[section][key] = val
    return RunConfig(SynthConfig(**kwargs["synth"]), BackboneConfig(**kwargs["backbone"]), TrainConfig(**kwargs["train"]))


def load_config(path, env: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("", env)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), env)


def _format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, WeightMode):
        return val.value
    if isinstance(val, frozenset):
        return ",".join(n for n in LOSS_NAMES if n in val)
    if isinstance(val, tuple):
        return ",".join(repr(float(x)) for x in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def format_config(cfg: RunConfig) -> str:
    lines = []
    seen = set()
    for section in ("synth", "backbone", "train"):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            if f.name in seen:
                continue
            seen.add(f.name)
            lines.append(f"{f.name}={_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
