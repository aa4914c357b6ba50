"""Run configuration: a YAML tree with ``model``, ``train``, ``data``, ``eval`` and ``pnp`` sections.

Flat dotted overrides such as ``train.steps=10`` are applied on top of the
file.  Unknown sections or keys are rejected.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import yaml

from .model import ModelConfig
from .pnp import PnPOptions
from .train import TrainConfig

SECTIONS = ("model", "train", "data", "eval", "pnp")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    max_scenes: int = 0   # 0 uses every scene in the dataset


@dataclass(frozen=True)
class EvalConfig:
    views: int = 4
    seed: int = 0
    render_steps: int = 0  # 0 means the model's setting


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pnp: PnPOptions = field(default_factory=PnPOptions)

    def to_dict(self) -> dict:
        d = {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": asdict(self.data),
             "eval": asdict(self.eval), "pnp": asdict(self.pnp)}
        d["pnp"]["fallback_std"] = list(self.pnp.fallback_std)
        if self.pnp.active_dofs is not None:
            d["pnp"]["active_dofs"] = list(self.pnp.active_dofs)
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _check_keys(section: str, values: dict, cls) -> None:
    names = {f.name for f in fields(cls)}
    bad = sorted(set(values) - names)
    if bad:
        raise ConfigError(f"unknown keys in [{section}]: {bad}")


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """``["train.steps=10", "train.weights.pose=0"]`` -> updated copy of ``tree``."""
    tree = copy.deepcopy(tree)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, value = item.split("=", 1)
        keys = path.lstrip("-").split(".")
        if len(keys) < 2 or keys[0] not in SECTIONS:
            raise ConfigError(f"override {item!r} must start with one of {SECTIONS}")
        node = tree.setdefault(keys[0], {})
        for k in keys[1:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[keys[-1]] = _parse_scalar(value)
    return tree


def build(tree: dict | None) -> RunConfig:
    """Validate a config tree and construct the typed sections."""
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ConfigError("config file must hold a mapping of sections")
    bad = sorted(set(tree) - set(SECTIONS))
    if bad:
        raise ConfigError(f"unknown config sections: {bad}")
    sec = {s: dict(tree.get(s) or {}) for s in SECTIONS}
    try:
        _check_keys("model", sec["model"], ModelConfig)
        _check_keys("data", sec["data"], DataConfig)
        _check_keys("eval", sec["eval"], EvalConfig)
        _check_keys("pnp", sec["pnp"], PnPOptions)
        model = ModelConfig(**sec["model"])
        train = TrainConfig.from_dict(sec["train"])
        pnp_kw = dict(sec["pnp"])
        for k in ("fallback_std", "active_dofs"):
            if pnp_kw.get(k) is not None:
                pnp_kw[k] = tuple(pnp_kw[k])
        return RunConfig(model, train, DataConfig(**sec["data"]), EvalConfig(**sec["eval"]), PnPOptions(**pnp_kw))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load(path: str | None, overrides: list[str] = ()) -> RunConfig:
    tree = {}
    if path:
        try:
            with open(path) as fh:
                tree = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    return build(apply_overrides(tree, list(overrides)))
