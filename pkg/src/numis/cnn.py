"""Convolutional baseline: conv/ReLU/pool blocks, ReLU FC layers, two raw logits."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import Model, he_normal
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

DEAD_THRESHOLD = 0.99


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2


@dataclass(frozen=True)
class CnnConfig:
    image_size: int = 224
    conv_blocks: tuple[ConvBlock, ...] = (ConvBlock(32), ConvBlock(64), ConvBlock(128))
    fc_widths: tuple[int, ...] = (256, 64)
    num_outputs: int = 2
    final_activation: str | None = None

    def __post_init__(self):
        if self.final_activation is not None:
            raise ValueError("the output layer must not have an activation")
        if self.num_outputs != 2:
            raise ValueError("binary CNN heads emit exactly two logits")
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if not blocks:
            raise ValueError("at least one conv block is required")
        self.feature_shape()

    def feature_shape(self) -> tuple[int, int, int]:
        c, s = 1, self.image_size
        for b in self.conv_blocks:
            pad = b.kernel // 2
            s = (s + 2 * pad - b.kernel) // b.stride + 1
            if b.pool > 1:
                s //= b.pool
            if s < 1:
                raise ValueError(f"image_size {self.image_size} too small for the conv stack")
            c = b.out_channels
        return c, s, s


def tiny_config(image_size: int = 32) -> CnnConfig:
    return CnnConfig(
        image_size=image_size,
        conv_blocks=(ConvBlock(8), ConvBlock(16), ConvBlock(32)),
        fc_widths=(64, 32),
    )


class CnnModel(Model):
    kind = "cnn"

    def __init__(self, config: CnnConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        in_c = 1
        for i, b in enumerate(config.conv_blocks):
            fan_in = in_c * b.kernel * b.kernel
            self._add(f"conv.{i}.weight", he_normal(rng, (b.out_channels, in_c, b.kernel, b.kernel), fan_in))
            self._add(f"conv.{i}.bias", np.zeros(b.out_channels))
            in_c = b.out_channels
        c, h, w = config.feature_shape()
        width = c * h * w
        for i, out in enumerate(config.fc_widths):
            self._add(f"fc.{i}.weight", he_normal(rng, (width, out), width))
            self._add(f"fc.{i}.bias", np.zeros(out))
            width = out
        self._add("out.weight", he_normal(rng, (width, config.num_outputs), width))
        self._add("out.bias", np.zeros(config.num_outputs))
        self.head_names = ("out.weight", "out.bias")
        log.debug("cnn with %d parameters", self.num_parameters())

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["conv_blocks"] = [list(asdict(b).values()) for b in self.config.conv_blocks]
        d["fc_widths"] = list(self.config.fc_widths)
        return d

    def forward(self, images: np.ndarray, activations: list | None = None) -> Tensor:
        """Two logits per image, index 1 being the positive class.

        When ``activations`` is a list, each hidden ReLU output is appended in layer order.
        """
        imgs = np.asarray(images, dtype=np.float32)
        single = imgs.ndim == 2
        if single:
            imgs = imgs[None]
        s = self.config.image_size
        if imgs.ndim != 3 or imgs.shape[1:] != (s, s):
            raise ShapeError(f"expected {s}x{s} images, got {imgs.shape}")
        x = Tensor(imgs[:, None])
        p = self.params
        for i, b in enumerate(self.config.conv_blocks):
            x = T.conv2d(x, p[f"conv.{i}.weight"], p[f"conv.{i}.bias"], stride=b.stride, padding=b.kernel // 2)
            x = T.relu(x)
            if activations is not None:
                activations.append((f"conv.{i}", x.data))
            if b.pool > 1:
                x = T.max_pool2d(x, b.pool)
        x = T.reshape(x, (x.shape[0], -1))
        for i in range(len(self.config.fc_widths)):
            x = T.relu(T.linear(x, p[f"fc.{i}.weight"], p[f"fc.{i}.bias"]))
            if activations is not None:
                activations.append((f"fc.{i}", x.data))
        logits = T.linear(x, p["out.weight"], p["out.bias"])
        return T.take(logits, 0) if single else logits


@dataclass
class LayerDeath:
    layer: str
    dead_fraction: float
    flagged: bool


@dataclass
class DyingReluReport:
    layers: list[LayerDeath] = field(default_factory=list)

    @property
    def any_flagged(self) -> bool:
        return any(l.flagged for l in self.layers)

    def as_rows(self) -> list[dict]:
        return [asdict(l) for l in self.layers]


def detect_dying_relu(model: CnnModel, probe_batch: np.ndarray, threshold: float = DEAD_THRESHOLD) -> DyingReluReport:
    """Fraction of each ReLU layer's units that output zero for every probe image."""
    probe = np.asarray(probe_batch, dtype=np.float32)
    if probe.ndim == 2:
        probe = probe[None]
    if probe.shape[0] == 0:
        raise ValueError("probe batch is empty")
    acts: list = []
    model.forward(probe, activations=acts)
    report = DyingReluReport()
    for name, a in acts:
        dead = np.all(a.reshape(a.shape[0], -1) <= 0, axis=0)
        frac = float(dead.mean())
        report.layers.append(LayerDeath(name, frac, frac >= threshold))
    return report
