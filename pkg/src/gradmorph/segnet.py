"""U-Net style segmentation network with pre-softmax logits.

Architecture, with ``c_i = base_channels * 2**i``:

* encoder level ``i`` (``0 <= i < depth``): two 3x3 conv + ReLU, keep skip, 2x2 max pool
* bottleneck: two 3x3 conv + ReLU to ``c_depth`` channels
* decoder level ``i`` (``depth-1 .. 0``): nearest 2x upsample, 3x3 conv + ReLU to
  ``c_i``, concat skip (``2 c_i``), two 3x3 conv + ReLU
* head: 1x1 conv to ``num_classes`` logits, no activation

Parameter count, writing ``k(a, b) = 9ab + b``::

    k(C, c0) + k(c0, c0) + sum_{i=1}^{D-1} [k(c_{i-1}, c_i) + k(c_i, c_i)]
    + k(c_{D-1}, c_D) + k(c_D, c_D)
    + sum_{i=0}^{D-1} [k(c_{i+1}, c_i) + k(2 c_i, c_i) + k(c_i, c_i)]
    + c0 L + L

which is 134130 for the defaults (D=3, base 8, C=1, L=2).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, stack_samples
from .optim import AdadeltaState, adadelta_step, minibatch_train
from .tensor_core import ContractViolation, Tensor

__all__ = [
    "SegNetConfig", "SegModel", "AdadeltaState", "adadelta_step", "build_segnet",
    "seg_logits", "predict", "cross_entropy", "train_segmentation", "param_shapes",
    "save_segnet", "load_segnet",
]

CHECKPOINT_KIND = "segnet"


@dataclass
class SegNetConfig:
    depth: int = 3
    base_channels: int = 8
    num_classes: int = 2
    input_channels: int = 1

    def validate(self) -> None:
        if self.depth < 1 or self.base_channels < 1 or self.input_channels < 1:
            raise ContractViolation(f"invalid segnet config {self}")
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be at least 2")


@dataclass
class SegModel:
    config: SegNetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "SegModel":
        return SegModel(copy.copy(self.config), {k: v.copy() for k, v in self.params.items()})


def param_shapes(cfg: SegNetConfig) -> dict[str, tuple[int, ...]]:
    ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    prev = cfg.input_channels
    for i in range(cfg.depth):
        conv(f"enc{i}.conv1", prev, ch[i])
        conv(f"enc{i}.conv2", ch[i], ch[i])
        prev = ch[i]
    conv("bottleneck.conv1", prev, ch[-1])
    conv("bottleneck.conv2", ch[-1], ch[-1])
    for i in reversed(range(cfg.depth)):
        conv(f"dec{i}.up", ch[i + 1], ch[i])
        conv(f"dec{i}.conv1", 2 * ch[i], ch[i])
        conv(f"dec{i}.conv2", ch[i], ch[i])
    conv("head", ch[0], cfg.num_classes, k=1)
    return shapes


def he_init(shapes: Mapping[str, tuple[int, ...]], seed: int) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights, zero biases, drawn in ``shapes`` order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def build_segnet(config: SegNetConfig | None = None, seed: int = 0) -> SegModel:
    config = config or SegNetConfig()
    config.validate()
    return SegModel(config, he_init(param_shapes(config), seed))


def _check_input(cfg: SegNetConfig, shape: tuple[int, ...]) -> None:
    if len(shape) not in (3, 4):
        raise ContractViolation(f"segnet input must be [C,H,W] or [N,C,H,W], got {shape}")
    c, h, w = shape[-3:]
    if c != cfg.input_channels:
        raise ContractViolation(f"segnet expects {cfg.input_channels} channels, got {c}")
    mult = 2 ** cfg.depth
    if h % mult or w % mult:
        raise ContractViolation(
            f"segnet input spatial dims {(h, w)} must be multiples of {mult} (2**depth)")


def _conv_relu(x, p, name):
    return tc.relu(tc.conv2d(x, p[f"{name}.w"], p[f"{name}.b"]))


def seg_logits(model: SegModel, image, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Pre-softmax logits ``[L,H,W]`` (or ``[N,L,H,W]`` for a batch).

    ``params`` overrides ``model.params`` (pass tape leaves to differentiate
    w.r.t. the weights); pass ``image`` as a tape leaf to differentiate
    w.r.t. the input.
    """
    cfg = model.config
    p = params if params is not None else model.params
    x = tc.as_tensor(image)
    _check_input(cfg, x.shape)
    skips = []
    for i in range(cfg.depth):
        x = _conv_relu(x, p, f"enc{i}.conv1")
        x = _conv_relu(x, p, f"enc{i}.conv2")
        skips.append(x)
        x = tc.maxpool2d(x)
    x = _conv_relu(x, p, "bottleneck.conv1")
    x = _conv_relu(x, p, "bottleneck.conv2")
    for i in reversed(range(cfg.depth)):
        x = _conv_relu(tc.upsample_nearest(x), p, f"dec{i}.up")
        x = tc.concat_channels(skips[i], x)
        x = _conv_relu(x, p, f"dec{i}.conv1")
        x = _conv_relu(x, p, f"dec{i}.conv2")
    return tc.conv2d(x, p["head.w"], p["head.b"])


def predict(model: SegModel, image) -> np.ndarray:
    """Per-pixel argmax label; ties go to the lower label index."""
    logits = seg_logits(model, image).data
    return np.argmax(logits, axis=logits.ndim - 3)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of softmax(logits) against integer labels."""
    return tc.mean(tc.mul(tc.select_labels(tc.log_softmax_channels(logits), labels), -1.0))


def train_segmentation(model: SegModel, dataset: Sequence[Sample], epochs: int,
                       batch_size: int = 8, opt: AdadeltaState | None = None,
                       seed: int = 0) -> tuple[SegModel, list[float]]:
    """Minimize pixel cross-entropy with Adadelta. Returns a new model and per-epoch mean loss."""
    if len(dataset) == 0:
        raise ContractViolation("training dataset is empty")
    cfg = model.config
    images, masks = stack_samples(dataset, cfg.num_classes)
    _check_input(cfg, images.shape)
    opt = opt if opt is not None else AdadeltaState()

    def loss_fn(p, idx):
        return cross_entropy(seg_logits(model, images[idx], p), masks[idx])

    params, curve = minibatch_train({k: v.copy() for k, v in model.params.items()}, loss_fn, len(dataset), epochs,
                                    batch_size, opt, seed)
    return SegModel(copy.copy(cfg), params), curve


def save_segnet(path, model: SegModel) -> None:
    save_checkpoint(path, CHECKPOINT_KIND, asdict(model.config), model.params)


def load_segnet(path) -> SegModel:
    kind, config, params = load_checkpoint(path)
    if kind != CHECKPOINT_KIND:
        raise ContractViolation(f"{path} holds a {kind!r} checkpoint, expected {CHECKPOINT_KIND!r}")
    cfg = SegNetConfig(**config)
    cfg.validate()
    expected = param_shapes(cfg)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise ContractViolation(f"{path}: parameter shapes do not match config {cfg}")
    return SegModel(cfg, params)
