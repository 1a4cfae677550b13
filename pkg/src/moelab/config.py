"""Run configuration: YAML file, dotted ``key=value`` overrides, resolved snapshot.

Every key must already exist in :func:`default_config`; anything else is
rejected. Values given to ``--set`` are parsed as YAML scalars, so
``train.learning_rate=1e-3`` is a float and ``transfer.seeds=[0,1]`` a list.
"""

from __future__ import annotations

import copy
import dataclasses
import re
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .evalkit.report import DecodeConfig
from .evalkit.synthetic import SyntheticSpec
from .experiments import DESK_LEARNING_RATE
from .model import ModelConfig
from .training import TrainConfig

# keys whose default is None but which accept any value
_OPEN_KEYS = {("model", "vocab_size"), ("model", "router", "top_k"), ("tasks", "dir"), ("train", "tasks")}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _load(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigKeyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


def default_config() -> dict:
    model = ModelConfig().to_dict()
    model["vocab_size"] = None  # sized from the tokenizer
    model["router"]["top_k"] = None
    train = TrainConfig(learning_rate=DESK_LEARNING_RATE, log_every=1).to_dict()
    train.pop("seed")
    train["tasks"] = None  # None: the held-in mixture
    return {
        "seed": 0,
        "tasks": {"dir": None, "spec": dataclasses.asdict(SyntheticSpec())},
        "model": model,
        "train": train,
        "eval": dataclasses.asdict(DecodeConfig()),
        "ablate": {"base_steps": 300},
        "transfer": {"instruction_steps": 1000, "finetune_steps": 50, "seeds": [0, 1, 2], "include_dense": True},
        "sweep": {"learning_rates": [1e-4, 1e-3, 3e-3], "batch_sizes": [8, 32]},
    }


def _check_keys(tree: Mapping, ref: Mapping, path: tuple = ()) -> None:
    for k, v in tree.items():
        here = path + (k,)
        if k not in ref:
            raise ConfigKeyError(f"unknown config key: {'.'.join(map(str, here))}")
        if isinstance(ref[k], dict) and here not in _OPEN_KEYS:
            if not isinstance(v, Mapping):
                raise ConfigKeyError(f"config key {'.'.join(here)} must be a mapping")
            _check_keys(v, ref[k], here)


def _merge(base: dict, update: Mapping) -> dict:
    for k, v in update.items():
        if isinstance(v, Mapping) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ValueError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    return key.strip().split("."), _load(raw) if raw.strip() else None


def resolve_config(path=None, overrides: Sequence[str] = (), seed: int | None = None) -> dict:
    ref = default_config()
    cfg = copy.deepcopy(ref)
    if path is not None:
        loaded = _load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, Mapping):
            raise ValueError(f"{path}: top level must be a mapping")
        _check_keys(loaded, ref)
        _merge(cfg, loaded)
    for item in overrides:
        keys, value = parse_override(item)
        node, refnode = cfg, ref
        for i, k in enumerate(keys[:-1]):
            if not isinstance(refnode, dict) or k not in refnode or not isinstance(refnode[k], dict):
                raise ConfigKeyError(f"unknown config key: {'.'.join(keys[: i + 1])}")
            node, refnode = node[k], refnode[k]
        if keys[-1] not in refnode:
            raise ConfigKeyError(f"unknown config key: {'.'.join(keys)}")
        node[keys[-1]] = value
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def model_config(cfg: Mapping, vocab_size: int) -> ModelConfig:
    d = copy.deepcopy(dict(cfg["model"]))
    if d.get("vocab_size") is None:
        d["vocab_size"] = vocab_size
    return ModelConfig.from_dict(d)


def train_config(cfg: Mapping, **changes) -> TrainConfig:
    d = {k: v for k, v in cfg["train"].items() if k != "tasks"}
    d["seed"] = cfg["seed"]
    d.update(changes)
    return TrainConfig.from_dict(d)


def decode_config(cfg: Mapping) -> DecodeConfig:
    return DecodeConfig(**cfg["eval"])


def synthetic_spec(cfg: Mapping) -> SyntheticSpec:
    return SyntheticSpec(**cfg["tasks"]["spec"])


def dump_yaml(cfg: Mapping) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=True, default_flow_style=False)
