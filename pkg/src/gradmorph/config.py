"""Experiment configuration: one YAML file, dotted ``--set`` overrides.

Schema (every key optional, defaults shown by ``gradmorph show-config``)::

    seed: 0                  # model init, shuffling
    data_root: null          # existing {train,test}/{images,masks} tree; null = synthetic
    data:        SynthConfig fields
    segnet:      SegNetConfig fields
    seg_train:   {epochs, batch_size, rho, epsilon}
    perturb:     PerturbConfig fields
    translator:  TranslatorConfig fields
    loss:        TranslationLossConfig fields (``lambda`` is accepted for ``lam``)
    translator_train: {epochs, batch_size, rho, epsilon}
    end2end_train:    {epochs, batch_size, rho, epsilon}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SynthConfig
from .metrics import TranslationLossConfig
from .optim import AdadeltaState
from .perturb import PerturbConfig
from .segnet import SegNetConfig
from .tensor_core import ContractViolation
from .translator import TranslatorConfig


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    rho: float = 0.95
    epsilon: float = 1e-6

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation(f"invalid training schedule {self}")
        if not (0.0 < self.rho < 1.0) or self.epsilon <= 0:
            raise ContractViolation(f"invalid Adadelta constants rho={self.rho}, eps={self.epsilon}")

    def optimizer(self) -> AdadeltaState:
        return AdadeltaState(self.rho, self.epsilon)


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_root: str | None = None
    data: SynthConfig = field(default_factory=SynthConfig)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    seg_train: TrainConfig = field(default_factory=TrainConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    loss: TranslationLossConfig = field(default_factory=TranslationLossConfig)
    translator_train: TrainConfig = field(default_factory=TrainConfig)
    end2end_train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        if self.data_root is not None and not isinstance(self.data_root, str):
            raise ContractViolation(f"data_root must be a path string, got {self.data_root!r}")
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if dataclasses.is_dataclass(sub):
                sub.validate()
        if self.translator.input_channels != self.segnet.input_channels:
            raise ContractViolation("translator and segnet must agree on input_channels")
        if self.data_root is None:
            size = self.data.image_size
            for what, mult in (("segnet depth", 2 ** self.segnet.depth),
                               ("translator blocks", 2 ** self.translator.blocks)):
                if size % mult:
                    raise ContractViolation(f"data.image_size {size} not a multiple of {mult} ({what})")
            if size < self.loss.ssim_window:
                raise ContractViolation("data.image_size smaller than the SSIM window")
            if self.segnet.input_channels != 1:
                raise ContractViolation("synthetic data is single-channel; set segnet.input_channels: 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


_ALIASES = {("loss", "lambda"): "lam"}


def _build(cls, values: Any, where: str):
    if not isinstance(values, dict):
        raise ContractViolation(f"config section {where or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        name = _ALIASES.get((where, key), key)
        if name not in fields:
            raise ContractViolation(f"unknown config key {'.'.join(filter(None, [where, key]))!r}")
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), val, name)
        else:
            kwargs[name] = _coerce(val, default, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _coerce(val, default, key):
    if default is None or val is None:
        return val
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ContractViolation(f"{key} must be true or false, got {val!r}")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ContractViolation(f"{key} must be an integer, got {val!r}")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ContractViolation(f"{key} must be a number, got {val!r}")
        return float(val)
    if isinstance(default, str) and not isinstance(val, str):
        raise ContractViolation(f"{key} must be a string, got {val!r}")
    return val


def apply_override(tree: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ContractViolation(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ContractViolation(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ContractViolation(f"override {assignment!r}: {exc}") from None
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ContractViolation(f"override {key!r} descends into a scalar")
    node[parts[-1]] = value


def from_dict(tree: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, tree, "").validate()


def load_config(path: str | Path | None = None, overrides=()) -> ExperimentConfig:
    """Read YAML (``None`` means all defaults), apply overrides, validate."""
    tree: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ContractViolation(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(tree, dict):
            raise ContractViolation(f"{path}: top level must be a mapping")
    for ov in overrides:
        apply_override(tree, ov)
    return from_dict(tree)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
