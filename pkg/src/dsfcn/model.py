"""Residual encoder-decoder FCN: strided-conv downsampling mirrored by
transposed-conv upsampling back to input resolution, with additive skip
connections at matching scales.

The stand-in for a large pretrained backbone is a configurable micro
network: ``num_scales`` stride-2 stages, each followed by
``blocks_per_scale`` residual blocks, then the mirrored decoder. No
normalization layers anywhere: training runs at batch size 1, where batch
statistics are degenerate, so plain conv+bias+ReLU with He initialization
is used instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError, Tensor

PROB_CLASSES = ("background", "rim", "cup")


@dataclass(frozen=True)
class FcnConfig:
    """Architecture hyperparameters; parameter shapes are a pure function of these."""

    in_channels: int = 1
    num_classes: int = 3
    base_channels: int = 8
    num_scales: int = 3
    blocks_per_scale: int = 2

    def __post_init__(self) -> None:
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_scales < 1:
            raise ValueError(f"num_scales must be >= 1, got {self.num_scales}")
        if self.blocks_per_scale < 1:
            raise ValueError(f"blocks_per_scale must be >= 1, got {self.blocks_per_scale}")

    def channels_at(self, scale: int) -> int:
        return self.base_channels * (2 ** scale)


class ParamSpec(NamedTuple):
    name: str
    shape: tuple[int, ...]
    fan_in: int | None  # None: zero-initialized bias


def param_specs(config: FcnConfig) -> list[ParamSpec]:
    """Every parameter's name, shape, and He fan-in, in construction order."""

    specs: list[ParamSpec] = []

    def conv(name: str, cout: int, cin: int, k: int) -> None:
        specs.append(ParamSpec(f"{name}.weight", (cout, cin, k, k), cin * k * k))
        specs.append(ParamSpec(f"{name}.bias", (cout,), None))

    def conv_t(name: str, cin: int, cout: int, k: int) -> None:
        # transposed layout is [in, out, kh, kw]; fan-in counts input taps
        specs.append(ParamSpec(f"{name}.weight", (cin, cout, k, k), cin * k * k))
        specs.append(ParamSpec(f"{name}.bias", (cout,), None))

    def block(name: str, ch: int) -> None:
        conv(f"{name}.conv0", ch, ch, 3)
        conv(f"{name}.conv1", ch, ch, 3)

    conv("stem", config.base_channels, config.in_channels, 3)
    for s in range(config.num_scales):
        ch = config.channels_at(s + 1)
        conv(f"enc{s}.down", ch, config.channels_at(s), 3)
        for i in range(config.blocks_per_scale):
            block(f"enc{s}.block{i}", ch)
    for s in reversed(range(config.num_scales)):
        ch = config.channels_at(s)
        conv_t(f"dec{s}.up", config.channels_at(s + 1), ch, 4)
        for i in range(config.blocks_per_scale):
            block(f"dec{s}.block{i}", ch)
    conv("head", config.num_classes, config.base_channels, 1)
    return specs


def parameter_count(config: FcnConfig) -> int:
    return sum(int(np.prod(spec.shape)) for spec in param_specs(config))


@dataclass
class FcnModel:
    config: FcnConfig
    params: ParamSet


def build_fcn(config: FcnConfig, seed: int) -> FcnModel:
    """Deterministic He-initialized model: same (config, seed) gives identical params."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for spec in param_specs(config):
        if spec.fan_in is None:
            data = np.zeros(spec.shape, dtype=np.float32)
        else:
            std = np.sqrt(2.0 / spec.fan_in)
            data = (rng.standard_normal(spec.shape) * std).astype(np.float32)
        params.add(spec.name, Tensor(data, requires_grad=True))
    return FcnModel(config=config, params=params)


def forward(model: FcnModel, batch: Tensor) -> Tensor:
    """Logits [N, num_classes, H, W] for a batch [N, in_channels, H, W].

    H and W must be divisible by 2**num_scales so the decoder lands back on
    the input resolution exactly.
    """
    cfg = model.config
    if batch.ndim != 4:
        raise ShapeError(f"forward: expected 4-D batch, got {batch.shape}")
    n, c, h, w = batch.shape
    if c != cfg.in_channels:
        raise ShapeError(f"forward: model expects {cfg.in_channels} channels, batch has {c} "
                         f"(batch {batch.shape})")
    factor = 2 ** cfg.num_scales
    if h % factor or w % factor or h < factor or w < factor:
        raise ShapeError(f"forward: spatial dims {h}x{w} must be positive multiples of "
                         f"2**num_scales = {factor}")

    p = model.params

    def conv(name: str, t: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
        return ad.conv2d(t, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, pad=pad)

    def block(name: str, t: Tensor) -> Tensor:
        hidden = ad.relu(conv(f"{name}.conv0", t))
        hidden = conv(f"{name}.conv1", hidden)
        return ad.relu(ad.add(hidden, t))

    feats = []
    t = ad.relu(conv("stem", batch))
    feats.append(t)
    for s in range(cfg.num_scales):
        t = ad.relu(conv(f"enc{s}.down", t, stride=2))
        for i in range(cfg.blocks_per_scale):
            t = block(f"enc{s}.block{i}", t)
        feats.append(t)
    for s in reversed(range(cfg.num_scales)):
        t = ad.relu(ad.conv2d_transpose(t, p[f"dec{s}.up.weight"], p[f"dec{s}.up.bias"],
                                        stride=2, pad=1))
        t = ad.add(t, feats[s])
        for i in range(cfg.blocks_per_scale):
            t = block(f"dec{s}.block{i}", t)
    return conv("head", t, pad=0)


def softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class ProbMap:
    """Per-pixel class probabilities [3, H, W], classes fixed as
    (background, rim, cup). ``disk`` is rim+cup: the probability of lying
    anywhere inside the optic disk."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 3 or self.probs.shape[0] != len(PROB_CLASSES):
            raise ShapeError(f"ProbMap: expected [3, H, W], got {self.probs.shape}")
        if self.probs.min() < -1e-5 or self.probs.max() > 1 + 1e-5:
            raise ValueError("ProbMap: probabilities must lie in [0, 1]")
        sums = self.probs.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise ValueError("ProbMap: per-pixel class probabilities must sum to 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[1], self.probs.shape[2]

    @property
    def cup(self) -> np.ndarray:
        return self.probs[2]

    @property
    def disk(self) -> np.ndarray:
        return self.probs[1] + self.probs[2]

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=0).astype(np.uint8)


def predict_probabilities(model: FcnModel, image: Tensor) -> ProbMap:
    """Softmax class probabilities for a single image [1, C, H, W]."""
    if model.config.num_classes != len(PROB_CLASSES):
        raise ValueError(f"predict_probabilities requires a {len(PROB_CLASSES)}-class model, "
                         f"got {model.config.num_classes}")
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"predict_probabilities: expected [1, C, H, W], got {image.shape}")
    with ad.no_grad():
        logits = forward(model, image)
    return ProbMap(softmax(logits.data, axis=1)[0])
