"""Classifier architectures with feature taps at every hidden FC layer.

A classifier is a convolutional feature extractor, a stack of ``H`` hidden
fully-connected layers and a linear output layer over all classes. Level
``n`` is the post-ReLU output of hidden layer ``n``; replayed features are
injected there and only the layers downstream of it are computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from latent_replay.errors import ConfigError, InputError


@dataclass(frozen=True)
class ExtractorSpec:
    """Stack of ``kernel x kernel`` stride-``stride`` convolutions, each followed by ReLU."""

    in_channels: int
    image_size: int
    channels: tuple[int, ...]
    kernel_size: int = 3
    stride: int = 2
    padding: int = 1

    def spatial_sizes(self) -> list[int]:
        sizes = [self.image_size]
        for _ in self.channels:
            sizes.append((sizes[-1] + 2 * self.padding - self.kernel_size) // self.stride + 1)
        return sizes

    @property
    def output_width(self) -> int:
        side = self.spatial_sizes()[-1]
        return self.channels[-1] * side * side

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)


@dataclass(frozen=True)
class ClassifierSpec:
    extractor: ExtractorSpec
    hidden_widths: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        self.validate()

    def validate(self) -> None:
        if len(self.hidden_widths) < 1:
            raise ConfigError("classifier needs at least one hidden FC layer")
        if any(w <= 0 for w in self.hidden_widths):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.num_classes <= 0:
            raise ConfigError("num_classes must be positive")
        ex = self.extractor
        if not ex.channels or any(c <= 0 for c in ex.channels):
            raise ConfigError(f"extractor channels must be non-empty and positive, got {ex.channels}")
        if ex.in_channels <= 0 or ex.image_size <= 0 or ex.spatial_sizes()[-1] <= 0:
            raise ConfigError("extractor reduces the image to nothing")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def depth(self) -> int:
        """Number of hidden FC layers (replay levels)."""
        return len(self.hidden_widths)

    @property
    def extractor_width(self) -> int:
        return self.extractor.output_width

    def fc_shapes(self) -> list[tuple[int, int]]:
        """(in, out) of every FC layer including the output layer."""
        widths = [self.extractor_width, *self.hidden_widths, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))


CIFAR_EXTRACTOR = ExtractorSpec(in_channels=3, image_size=32, channels=(16, 32, 64, 128, 256))
FMNIST_EXTRACTOR = ExtractorSpec(in_channels=1, image_size=28, channels=(16, 32, 64))
TINY_EXTRACTOR = ExtractorSpec(in_channels=1, image_size=8, channels=(4, 8))

ARCH_PRESETS: dict[str, ClassifierSpec] = {
    "ARCH1": ClassifierSpec(CIFAR_EXTRACTOR, (2000, 2000), 100),
    "ARCH2": ClassifierSpec(CIFAR_EXTRACTOR, (1000, 1000, 1000), 100),
    "FMNIST3": ClassifierSpec(FMNIST_EXTRACTOR, (50, 50, 50), 10),
    # smoke-test sized network for the synthetic dataset
    "TINY": ClassifierSpec(TINY_EXTRACTOR, (16, 16), 6),
}


def get_preset(name: str, num_classes: int | None = None) -> ClassifierSpec:
    """Look up an architecture preset, optionally resizing its output layer.

    ARCH1/ARCH2 default to 100 outputs; CIFAR10 runs (pretraining and the
    two-task buffer experiment) use them with ``num_classes=10``.
    """
    try:
        spec = ARCH_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(ARCH_PRESETS)}") from None
    if num_classes is not None and num_classes != spec.num_classes:
        spec = ClassifierSpec(spec.extractor, spec.hidden_widths, num_classes, spec.activation)
    return spec


@dataclass
class FeatureTaps:
    """Features of one forward pass.

    ``levels[n]`` is the post-activation output of hidden layer ``n``;
    ``extractor`` is the flattened extractor output feeding hidden layer 0.
    """

    levels: list[torch.Tensor]
    extractor: torch.Tensor | None = field(default=None)

    def __len__(self):
        return len(self.levels)

    def detach(self) -> FeatureTaps:
        ex = None if self.extractor is None else self.extractor.detach()
        return FeatureTaps([t.detach() for t in self.levels], ex)


def init_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), for weights and biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


class Classifier(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        ex = spec.extractor
        convs: list[nn.Module] = []
        c_in = ex.in_channels
        for c_out in ex.channels:
            convs += [nn.Conv2d(c_in, c_out, ex.kernel_size, ex.stride, ex.padding), nn.ReLU()]
            c_in = c_out
        convs.append(nn.Flatten())
        self.extractor = nn.Sequential(*convs)
        widths = [spec.extractor_width, *spec.hidden_widths]
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.head = nn.Linear(spec.hidden_widths[-1], spec.num_classes)

    @property
    def depth(self) -> int:
        return self.spec.depth

    # -- forward passes -------------------------------------------------

    def _check_images(self, images: torch.Tensor) -> None:
        expected = self.spec.extractor.input_shape
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise InputError(f"expected images of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {tuple(images.shape)}")

    def _check_level(self, features: torch.Tensor, level: int) -> None:
        if not 0 <= level < self.depth:
            raise InputError(f"level {level} outside 0..{self.depth - 1}")
        width = self.spec.hidden_widths[level]
        if features.dim() != 2 or features.shape[1] != width:
            raise InputError(f"level {level} expects features of width {width}, got {tuple(features.shape)}")

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        """Flattened extractor output (width ``D``)."""
        self._check_images(images)
        return self.extractor(images)

    def tail(self, features: torch.Tensor, level: int) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Run hidden layers ``level+1 .. H-1`` and the head.

        Returns the taps of the deeper levels (empty for the last level) and
        the logits. ``level=-1`` means ``features`` are extractor outputs.
        """
        taps = []
        h = features
        for layer in self.hidden[level + 1:]:
            h = F.relu(layer(h))
            taps.append(h)
        return taps, self.head(h)

    def forward_from_level(self, features: torch.Tensor, level: int) -> torch.Tensor:
        """Logits for features injected at the output of hidden layer ``level``."""
        self._check_level(features, level)
        return self.tail(features, level)[1]

    def forward_from_extractor(self, features: torch.Tensor) -> tuple[FeatureTaps, torch.Tensor]:
        if features.dim() != 2 or features.shape[1] != self.spec.extractor_width:
            raise InputError(f"expected extractor features of width {self.spec.extractor_width}, "
                             f"got {tuple(features.shape)}")
        levels, logits = self.tail(features, -1)
        return FeatureTaps(levels, features), logits

    def forward_with_taps(self, images: torch.Tensor) -> tuple[torch.Tensor, FeatureTaps]:
        taps, logits = self.forward_from_extractor(self.extract(images))
        return logits, taps

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(images)[0]

    def predict_proba(self, images: torch.Tensor) -> torch.Tensor:
        return F.softmax(self(images), dim=1)

    # -- freezing -------------------------------------------------------

    def freeze(self, scope: str = "extractor", up_to: int | None = None) -> Classifier:
        """Stop gradient updates for the extractor, optionally with FC layers ``0..up_to``.

        ``scope`` is ``"extractor"`` or ``"extractor_and_fc"`` (needs ``up_to``).
        """
        if scope == "extractor":
            modules: list[nn.Module] = [self.extractor]
        elif scope == "extractor_and_fc":
            if up_to is None or not 0 <= up_to < self.depth:
                raise ConfigError(f"extractor_and_fc needs up_to in 0..{self.depth - 1}")
            modules = [self.extractor, *self.hidden[: up_to + 1]]
        else:
            raise ConfigError(f"unknown freeze scope {scope!r}")
        for m in modules:
            for p in m.parameters():
                p.requires_grad_(False)
        return self

    @property
    def frozen_mask(self) -> dict[str, bool]:
        return {name: not p.requires_grad for name, p in self.named_parameters()}

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_classifier(spec: ClassifierSpec, seed: int) -> Classifier:
    model = Classifier(spec)
    init_uniform_(model, torch.Generator().manual_seed(seed))
    return model


def parameter_blocks(spec: ClassifierSpec, include_biases: bool = False) -> list[int]:
    """Parameter count of every FC layer, first hidden layer through the head."""
    return [i * o + (o if include_biases else 0) for i, o in spec.fc_shapes()]


def widths_of(spec: ClassifierSpec) -> Sequence[int]:
    return [spec.extractor_width, *spec.hidden_widths]
