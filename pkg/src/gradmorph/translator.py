"""Dense encoder-decoder mapping an image to its perturbed counterpart.

A small fully-convolutional DenseNet (Tiramisu layout). Every dense layer is a
3x3 conv + ReLU emitting ``growth_channels`` maps from the concatenation of
everything before it in the block.

* stem: 3x3 conv ``C -> stem_channels``
* down ``b``: dense block (keeps its input, adds ``L*g`` maps), skip, then
  1x1 conv + ReLU transition and 2x2 max pool
* bottleneck: dense block, new maps only
* up ``b``: nearest 2x upsample, 3x3 conv + ReLU on ``L*g`` maps, concat skip,
  dense block (new maps only, except the last which keeps its input)
* head: 1x1 conv to ``C``, linear, so outputs are unbounded

With ``residual`` on, the head output is added to the input image. The head
starts at zero, so an untrained translator is the identity.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import MetricsReport, TranslationLossConfig, ssim, translation_loss
from .optim import AdadeltaState, minibatch_train
from .segnet import he_init
from .tensor_core import ContractViolation, Tensor

CHECKPOINT_KIND = "translator"


@dataclass
class TranslatorConfig:
    blocks: int = 2
    growth_channels: int = 8
    layers_per_block: int = 3
    input_channels: int = 1
    stem_channels: int = 16
    residual: bool = True

    def validate(self) -> None:
        if min(self.blocks, self.growth_channels, self.layers_per_block,
               self.input_channels, self.stem_channels) < 1:
            raise ContractViolation(f"invalid translator config {self}")


@dataclass
class TranslatorModel:
    config: TranslatorConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "TranslatorModel":
        return TranslatorModel(copy.copy(self.config), {k: v.copy() for k, v in self.params.items()})


def param_shapes(cfg: TranslatorConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    g, nl = cfg.growth_channels, cfg.layers_per_block

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    def dense(name, cin):
        for j in range(nl):
            conv(f"{name}.layer{j}", cin + j * g, g)

    conv("stem", cfg.input_channels, cfg.stem_channels)
    ch = cfg.stem_channels
    skips = []
    for b in range(cfg.blocks):
        dense(f"down{b}", ch)
        ch += nl * g
        skips.append(ch)
        conv(f"down{b}.transition", ch, ch, k=1)
    dense("bottleneck", ch)
    ch = nl * g
    for b in reversed(range(cfg.blocks)):
        conv(f"up{b}.transition", ch, ch)
        dense(f"up{b}", ch + skips[b])
        ch = nl * g if b else ch + skips[b] + nl * g
    conv("head", ch, cfg.input_channels, k=1)
    return shapes


def build_translator(config: TranslatorConfig | None = None, seed: int = 0) -> TranslatorModel:
    config = config or TranslatorConfig()
    config.validate()
    params = he_init(param_shapes(config), seed)
    params["head.w"] = np.zeros_like(params["head.w"])
    return TranslatorModel(config, params)


def _dense_block(x, p, name, layers, keep_input):
    feats = x
    new = None
    for j in range(layers):
        y = tc.relu(tc.conv2d(feats, p[f"{name}.layer{j}.w"], p[f"{name}.layer{j}.b"]))
        feats = tc.concat_channels(feats, y)
        new = y if new is None else tc.concat_channels(new, y)
    return feats if keep_input else new


def _features(model: TranslatorModel, x: Tensor, p) -> Tensor:
    cfg = model.config
    nl = cfg.layers_per_block
    h = tc.conv2d(x, p["stem.w"], p["stem.b"])
    skips = []
    for b in range(cfg.blocks):
        h = _dense_block(h, p, f"down{b}", nl, keep_input=True)
        skips.append(h)
        h = tc.maxpool2d(tc.relu(tc.conv2d(h, p[f"down{b}.transition.w"], p[f"down{b}.transition.b"])))
    h = _dense_block(h, p, "bottleneck", nl, keep_input=False)
    for b in reversed(range(cfg.blocks)):
        h = tc.upsample_nearest(h)
        h = tc.relu(tc.conv2d(h, p[f"up{b}.transition.w"], p[f"up{b}.transition.b"]))
        h = tc.concat_channels(skips[b], h)
        h = _dense_block(h, p, f"up{b}", nl, keep_input=b == 0)
    return h


def head(features, p, image=None, residual: bool = True) -> Tensor:
    """Linear 1x1 projection; adds ``image`` when ``residual``."""
    out = tc.linear(tc.conv2d(features, p["head.w"], p["head.b"]))
    return out + image if residual and image is not None else out


def translate(model: TranslatorModel, image, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Map ``[C,H,W]`` or ``[N,C,H,W]`` to the same shape."""
    cfg = model.config
    p = params if params is not None else model.params
    x = tc.as_tensor(image)
    if x.ndim not in (3, 4) or x.shape[-3] != cfg.input_channels:
        raise ContractViolation(
            f"translator expects [{cfg.input_channels},H,W] input, got {x.shape}")
    mult = 2 ** cfg.blocks
    if x.shape[-1] % mult or x.shape[-2] % mult:
        raise ContractViolation(
            f"translator input spatial dims {x.shape[-2:]} must be multiples of {mult} (2**blocks)")
    return head(_features(model, x, p), p, x, cfg.residual)


def _stack_pairs(pairs: Sequence[tuple[np.ndarray, np.ndarray]]):
    if not pairs:
        raise ContractViolation("no training pairs")
    inputs = np.stack([np.asarray(a, dtype=np.float64) for a, _ in pairs])
    targets = np.stack([np.asarray(b, dtype=np.float64) for _, b in pairs])
    if inputs.shape != targets.shape:
        raise ContractViolation(f"input batch {inputs.shape} and target batch {targets.shape} differ")
    return inputs, targets


def train_translator(model: TranslatorModel, pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                     epochs: int, batch_size: int = 8, loss_cfg: TranslationLossConfig | None = None,
                     opt: AdadeltaState | None = None,
                     seed: int = 0) -> tuple[TranslatorModel, list[float]]:
    """Fit ``translate(I) ~ I + delta`` on ``(I, I + delta)`` pairs with Adadelta."""
    loss_cfg = loss_cfg or TranslationLossConfig()
    loss_cfg.validate()
    inputs, targets = _stack_pairs(pairs)
    opt = opt if opt is not None else AdadeltaState()

    def loss_fn(p, idx):
        return translation_loss(translate(model, inputs[idx], p), targets[idx], loss_cfg)

    params, curve = minibatch_train({k: v.copy() for k, v in model.params.items()}, loss_fn,
                                    len(inputs), epochs, batch_size, opt, seed)
    return TranslatorModel(copy.copy(model.config), params), curve


def translate_batch(model: TranslatorModel, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    out = [translate(model, images[i:i + chunk]).data for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros_like(images)


def reconstruction_fidelity(model: TranslatorModel, ids: Sequence[str],
                            pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                            loss_cfg: TranslationLossConfig | None = None) -> MetricsReport:
    """Per-pair SSIM between the translated image and its perturbed target."""
    inputs, targets = _stack_pairs(pairs)
    outputs = translate_batch(model, inputs)
    rows = [{"id": sid, "ssim": ssim(o, t, loss_cfg)} for sid, o, t in zip(ids, outputs, targets)]
    return MetricsReport(rows).finalize()


def save_translator(path, model: TranslatorModel) -> None:
    save_checkpoint(path, CHECKPOINT_KIND, asdict(model.config), model.params)


def load_translator(path) -> TranslatorModel:
    kind, config, params = load_checkpoint(path)
    if kind != CHECKPOINT_KIND:
        raise ContractViolation(f"{path} holds a {kind!r} checkpoint, expected {CHECKPOINT_KIND!r}")
    cfg = TranslatorConfig(**config)
    cfg.validate()
    if {k: v.shape for k, v in params.items()} != param_shapes(cfg):
        raise ContractViolation(f"{path}: parameter shapes do not match config {cfg}")
    return TranslatorModel(cfg, params)
