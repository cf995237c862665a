"""Zonal segmentation networks.

The proposed network is an improved ResNet50 encoder (no stem max-pool,
stride-1 layer 4 with a basic block followed by dilated bottlenecks), a
feature pyramid attention head, and a two-stage bilinear decoder. A U-Net
with bilinear upsampling serves as the baseline.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.ops import ShapeError
from .nn import BatchNorm2d, Conv2d, Module, Sequential, conv_bn_relu

NUM_CLASSES = 3
ARCHES = ("proposed", "unet_baseline")


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = NUM_CLASSES
    width_multiplier: float = 1.0
    include_initial_maxpool: bool = False
    input_size: int = 192
    arch: str = "proposed"
    layer4_blocks: int = 3
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHES:
            raise ValueError(f"arch must be one of {ARCHES}, got {self.arch!r}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError("num_classes is fixed at 3 (background, PZ, TZ)")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must lie in (0, 1]")
        if round(64 * self.width_multiplier) < 1:
            raise ValueError("width_multiplier too small: stem would have no channels")
        if self.input_size % 8:
            raise ValueError(f"input_size must be divisible by 8, got {self.input_size}")
        needs16 = self.arch == "unet_baseline" or self.include_initial_maxpool
        if needs16 and self.input_size % 16:
            raise ValueError(
                f"input_size must be divisible by 16 for this architecture, got {self.input_size}"
            )
        if self.layer4_blocks not in (2, 3):
            raise ValueError("layer4_blocks must be 2 or 3")
        return self

    @property
    def output_stride(self) -> int:
        return 16 if self.include_initial_maxpool else 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def scaled(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


# ---------------------------------------------------------------------------
# residual blocks


class Bottleneck(Module):
    expansion = 4

    def __init__(self, in_ch, planes, stride=1, dilation=1, rng=None):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = conv_bn_relu(in_ch, planes, 1, rng=rng)
        self.conv2 = conv_bn_relu(planes, planes, 3, stride, dilation, dilation, rng=rng)
        self.conv3 = conv_bn_relu(planes, out_ch, 1, rng=rng, relu=False)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = conv_bn_relu(in_ch, out_ch, 1, stride, rng=rng, relu=False)
        else:
            self.shortcut = None
        self.out_channels = out_ch

    def forward(self, x):
        y = self.conv3(self.conv2(self.conv1(x)))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(ops.add(y, skip))


class BasicBlock(Module):
    """Two 3x3 convs with an identity or 1x1-projected skip."""

    def __init__(self, in_ch, out_ch, stride=1, rng=None):
        super().__init__()
        self.conv1 = conv_bn_relu(in_ch, out_ch, 3, stride, 1, rng=rng)
        self.conv2 = conv_bn_relu(out_ch, out_ch, 3, 1, 1, rng=rng, relu=False)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = conv_bn_relu(in_ch, out_ch, 1, stride, rng=rng, relu=False)
        else:
            self.shortcut = None
        self.out_channels = out_ch

    def forward(self, x):
        y = self.conv2(self.conv1(x))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(ops.add(y, skip))


class MaxPool(Module):
    def __init__(self, kernel=3, stride=2, padding=1):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        return ops.max_pool2d(x, self.kernel, self.stride, self.padding)


def _bottleneck_layer(in_ch, planes, blocks, stride, rng):
    layers = [Bottleneck(in_ch, planes, stride, rng=rng)]
    ch = planes * Bottleneck.expansion
    for _ in range(blocks - 1):
        layers.append(Bottleneck(ch, planes, rng=rng))
    return Sequential(*layers), ch


class ImprovedResNet50(Module):
    """ResNet50 encoder with output stride 8 (16 with the stem max-pool)."""

    def __init__(self, config: ModelConfig, rng=None):
        super().__init__()
        w = config.width_multiplier
        stem = scaled(64, w)
        self.stem = conv_bn_relu(config.in_channels, stem, 7, 2, 3, rng=rng)
        self.maxpool = MaxPool() if config.include_initial_maxpool else None
        self.layer1, ch = _bottleneck_layer(stem, scaled(64, w), 3, 1, rng)
        self.layer2, ch = _bottleneck_layer(ch, scaled(128, w), 4, 2, rng)
        self.layer3, ch = _bottleneck_layer(ch, scaled(256, w), 6, 2, rng)
        planes4 = scaled(512, w)
        blocks = [BasicBlock(ch, ch, 1, rng=rng)]
        blocks.append(Bottleneck(ch, planes4, 1, dilation=2, rng=rng))
        ch4 = planes4 * Bottleneck.expansion
        for _ in range(config.layer4_blocks - 2):
            blocks.append(Bottleneck(ch4, planes4, 1, dilation=2, rng=rng))
        self.layer4 = Sequential(*blocks)
        self.out_channels = ch4
        self.output_stride = config.output_stride

    def forward(self, x):
        x = self.stem(x)
        if self.maxpool is not None:
            x = self.maxpool(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)


class FeaturePyramidAttention(Module):
    """Pyramid attention over encoder features plus a global-pooling prior."""

    MIN_SIZE = 8

    def __init__(self, in_channels, out_channels, rng=None):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ValueError("FPA channel counts must be positive")
        self.main = conv_bn_relu(in_channels, out_channels, 1, rng=rng)
        self.down7 = conv_bn_relu(in_channels, out_channels, 7, 2, 3, rng=rng)
        self.down5 = conv_bn_relu(out_channels, out_channels, 5, 2, 2, rng=rng)
        self.down3 = conv_bn_relu(out_channels, out_channels, 3, 2, 1, rng=rng)
        self.global_conv = Conv2d(in_channels, out_channels, 1, bias=True, rng=rng)
        self.out_channels = out_channels

    def forward(self, x):
        h, w = x.shape[2:]
        if h < self.MIN_SIZE or w < self.MIN_SIZE:
            raise ShapeError(
                f"feature pyramid needs at least {self.MIN_SIZE}x{self.MIN_SIZE} input, got {h}x{w}"
            )
        main = self.main(x)
        l1 = self.down7(x)
        l2 = self.down5(l1)
        l3 = self.down3(l2)
        # Odd sizes do not halve exactly, so each merge resizes to the finer level.
        merged = ops.add(l2, ops.bilinear_resize(l3, l2.shape[2:]))
        merged = ops.add(l1, ops.bilinear_resize(merged, l1.shape[2:]))
        attention = ops.bilinear_resize(merged, (h, w))
        prior = self.global_conv(ops.global_avg_pool2d(x))
        out = ops.add(ops.mul(main, attention), main)
        return ops.add(out, prior)


class Decoder(Module):
    def __init__(self, in_channels, hidden, num_classes=NUM_CLASSES, factors=(4, 2), rng=None):
        super().__init__()
        self.conv1 = conv_bn_relu(in_channels, hidden, 3, 1, 1, rng=rng)
        self.classifier = Conv2d(hidden, num_classes, 3, 1, 1, bias=True, rng=rng)
        self.factors = tuple(factors)

    def forward(self, x):
        x = ops.bilinear_upsample(self.conv1(x), self.factors[0])
        return ops.bilinear_upsample(self.classifier(x), self.factors[1])


class SegmentationModel(Module):
    """Common input checking and the softmax/argmax head."""

    config: ModelConfig

    def check_input(self, x: Tensor) -> None:
        c = self.config
        expected = (c.in_channels, c.input_size, c.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input N x {c.in_channels} x {c.input_size} x "
                             f"{c.input_size}, got {x.shape}")

    def init_running_stats(self) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.init_running_stats()


class ZonalNet(SegmentationModel):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        w = config.width_multiplier
        self.encoder = build_improved_resnet50(config, rng)
        self.fpa = build_fpa(self.encoder.out_channels, scaled(512, w), rng)
        factors = (4, 4) if config.include_initial_maxpool else (4, 2)
        self.decoder = build_decoder(self.fpa.out_channels, NUM_CLASSES, scaled(128, w),
                                     factors, rng)

    def forward(self, x):
        self.check_input(x)
        return self.decoder(self.fpa(self.encoder(x)))


class UNet(SegmentationModel):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        c = scaled(64, config.width_multiplier)
        widths = [c, 2 * c, 4 * c, 8 * c]
        self.down = Sequential(*[
            _double_conv(cin, cout, rng)
            for cin, cout in zip([config.in_channels] + widths[:-1], widths)
        ])
        self.bottleneck = _double_conv(widths[-1], 16 * c, rng)
        ups = []
        ch = 16 * c
        for skip in reversed(widths):
            ups.append(_double_conv(ch + skip, skip, rng))
            ch = skip
        self.up = Sequential(*ups)
        self.head = Conv2d(c, NUM_CLASSES, 1, bias=True, rng=rng)

    def forward(self, x):
        self.check_input(x)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = ops.max_pool2d(x, 2, 2)
        x = self.bottleneck(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = ops.bilinear_upsample(x, 2)
            x = block(ops.concat_channels([x, skip]))
        return self.head(x)


def _double_conv(cin, cout, rng):
    return Sequential(conv_bn_relu(cin, cout, 3, 1, 1, rng=rng),
                      conv_bn_relu(cout, cout, 3, 1, 1, rng=rng))


# ---------------------------------------------------------------------------
# builders


def build_improved_resnet50(config: ModelConfig, rng=None) -> ImprovedResNet50:
    config.validate()
    return ImprovedResNet50(config, rng if rng is not None else np.random.default_rng(config.seed))


def build_fpa(in_channels: int, out_channels: int, rng=None) -> FeaturePyramidAttention:
    return FeaturePyramidAttention(in_channels, out_channels, rng)


def build_decoder(in_channels: int, num_classes: int = NUM_CLASSES, hidden: int = 128,
                  factors=(4, 2), rng=None) -> Decoder:
    if num_classes != NUM_CLASSES:
        raise ValueError("decoder emits exactly 3 classes")
    return Decoder(in_channels, hidden, num_classes, factors, rng)


def build_unet_baseline(config: ModelConfig) -> UNet:
    cfg = ModelConfig(**{**config.to_dict(), "arch": "unet_baseline"})
    if cfg.input_size % 16:
        raise ValueError(f"U-Net input_size must be divisible by 16, got {cfg.input_size}")
    return UNet(cfg)


def build_model(config: ModelConfig) -> SegmentationModel:
    config.validate()
    if config.arch == "unet_baseline":
        return build_unet_baseline(config)
    return ZonalNet(config)


def forward_segment(model: SegmentationModel, image) -> tuple:
    """Class probabilities (N x 3 x S x S) and label masks (N x S x S).

    Runs without recording a tape; the model's train/eval flag is respected.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    with no_grad():
        probs = ops.softmax_channel(model(x))
    labels = np.argmax(probs.data, axis=1).astype(np.uint8)
    return probs.data, labels


def parameter_signature(model: Module) -> dict:
    """name -> shape for every parameter."""
    return {name: tuple(p.shape) for name, p in model.named_parameters()}
