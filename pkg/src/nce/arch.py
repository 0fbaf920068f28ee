"""Network topology descriptions and the architecture file format.

An :class:`Arch` is a flat, topologically ordered list of layers. Convolutions
carry a *group*: every convolution in a group shares one channel count (the
residual-addition constraint ties the last convolution of each block to its
stage's shortcut). The same description drives the supernet, the standalone
retrained network and the cost model.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from nce.errors import ConfigError, FormatError

ARCH_FORMAT = "nce-arch/1"
LAYER_TYPES = ("conv", "linear", "add", "maxpool", "gap")

VGG16_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
RESNET_DEPTHS = {"resnet8": 1, "resnet20": 3, "resnet32": 5, "resnet56": 9}


@dataclass
class Layer:
    id: str
    type: str
    inputs: list
    channels: Optional[int] = None
    kernel: int = 1
    stride: int = 1
    group: Optional[str] = None
    searchable: bool = False
    quant_excluded: bool = True
    relu: bool = False

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def to_dict(self) -> dict:
        d = {"id": self.id, "type": self.type, "inputs": list(self.inputs)}
        if self.type in ("conv", "linear"):
            d["channels"] = int(self.channels)
            d["kernel"] = [self.kernel, self.kernel] if self.type == "conv" else [1, 1]
            d["quant_excluded"] = bool(self.quant_excluded)
        if self.type == "conv":
            d.update(stride=self.stride, group=self.group, searchable=bool(self.searchable))
        if self.type == "maxpool":
            d.update(kernel=[self.kernel, self.kernel], stride=self.stride)
        if self.type in ("conv", "add"):
            d["relu"] = bool(self.relu)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        d = dict(d)
        kernel = d.pop("kernel", [1, 1])
        if isinstance(kernel, list):
            if len(kernel) != 2 or kernel[0] != kernel[1]:
                raise FormatError(f"layer {d.get('id')!r}: only square kernels are supported, got {kernel}")
            kernel = kernel[0]
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise FormatError(f"layer {d.get('id')!r}: unknown fields {sorted(unknown)}")
        layer = cls(kernel=int(kernel), **d)
        if layer.type not in LAYER_TYPES:
            raise ConfigError(f"layer {layer.id!r}: unknown layer type {layer.type!r}")
        return layer


@dataclass
class Arch:
    """A derived (or seed) architecture: per-layer channel counts plus topology."""

    name: str
    layers: list
    in_channels: int = 3
    input_size: int = 32
    num_classes: int = 10
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {layer.id: layer for layer in self.layers}
        if len(self._index) != len(self.layers):
            raise ConfigError(f"architecture {self.name!r} has duplicate layer ids")

    def __getitem__(self, layer_id: str) -> Layer:
        return self._index[layer_id]

    def __iter__(self):
        return iter(self.layers)

    @property
    def convs(self):
        return [layer for layer in self.layers if layer.type == "conv"]

    def group_members(self, group: str):
        return [layer for layer in self.convs if layer.group == group]

    @property
    def groups(self) -> list:
        seen = []
        for layer in self.convs:
            if layer.group not in seen:
                seen.append(layer.group)
        return seen

    @property
    def searchable_groups(self) -> list:
        return [g for g in self.groups if self.group_members(g)[0].searchable]

    def widths(self) -> dict:
        return {g: self.group_members(g)[0].channels for g in self.groups}

    def with_widths(self, widths: dict, name: Optional[str] = None) -> "Arch":
        unknown = set(widths) - set(self.groups)
        if unknown:
            raise ConfigError(f"unknown width groups {sorted(unknown)}")
        layers = []
        for layer in self.layers:
            layer = copy.copy(layer)
            if layer.type == "conv" and layer.group in widths:
                layer.channels = int(widths[layer.group])
            layers.append(layer)
        return Arch(name or self.name, layers, self.in_channels, self.input_size, self.num_classes)

    def scaled(self, gamma: float) -> "Arch":
        """Uniform width multiplier applied to every convolution group."""
        widths = {g: max(1, int(round(w * gamma))) for g, w in self.widths().items()}
        return self.with_widths(widths, name=f"{self.name}-x{gamma:g}")

    # -- topology queries ---------------------------------------------------
    def width_source(self, layer_id: str) -> Optional[Layer]:
        """The conv/linear layer whose channel count ``layer_id`` outputs (None for the input)."""
        while layer_id != "input":
            layer = self[layer_id]
            if layer.type in ("conv", "linear"):
                return layer
            layer_id = layer.inputs[0]
        return None

    def in_channels_of(self, layer: Layer) -> int:
        src = self.width_source(layer.inputs[0])
        return self.in_channels if src is None else src.channels

    def spatial_sizes(self, resolution: Optional[int] = None) -> dict:
        """Output spatial size of every layer for a square input."""
        size = {"input": resolution or self.input_size}
        for layer in self.layers:
            h = size[layer.inputs[0]]
            if layer.type == "conv":
                h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            elif layer.type == "maxpool":
                h = h // layer.stride
            elif layer.type in ("gap", "linear"):
                h = 1
            if h < 1:
                raise ConfigError(f"input resolution too small for layer {layer.id!r}")
            size[layer.id] = h
        return size

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": ARCH_FORMAT,
            "name": self.name,
            "input": {"channels": self.in_channels, "size": self.input_size},
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        if d.get("format") != ARCH_FORMAT:
            raise FormatError(f"expected architecture format {ARCH_FORMAT!r}, got {d.get('format')!r}")
        layers = [Layer.from_dict(x) for x in d["layers"]]
        inp = d.get("input", {})
        return cls(d["name"], layers, int(inp.get("channels", 3)), int(inp.get("size", 32)),
                   int(d.get("num_classes", 10)))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load(cls, path) -> "Arch":
        path = Path(path)
        if not path.exists():
            raise FormatError(f"architecture file not found: {path}")
        return cls.from_dict(yaml.safe_load(path.read_text()))

    def same_structure(self, other: "Arch") -> bool:
        return [layer.to_dict() for layer in self.layers] == [layer.to_dict() for layer in other.layers]


def resnet_cifar(blocks_per_stage: int, widths=(16, 32, 64), num_classes: int = 10,
                 in_channels: int = 3, input_size: int = 32, name: Optional[str] = None) -> Arch:
    """CIFAR ResNet (3 stages, two 3x3 convs per block, 1x1 projection shortcuts
    at stride-2 stage entries)."""
    layers = [Layer("stem", "conv", ["input"], widths[0], 3, 1, "stem", False, True, True)]
    prev = "stem"
    for s, width in enumerate(widths, start=1):
        stage_group = "stem" if s == 1 else f"s{s}"
        for b in range(1, blocks_per_stage + 1):
            stride = 2 if s > 1 and b == 1 else 1
            base = f"s{s}.b{b}"
            layers.append(Layer(f"{base}.conv1", "conv", [prev], width, 3, stride,
                                f"{base}.conv1", True, False, True))
            layers.append(Layer(f"{base}.conv2", "conv", [f"{base}.conv1"], width, 3, 1,
                                stage_group, s > 1, False, False))
            if stride != 1:
                layers.append(Layer(f"{base}.shortcut", "conv", [prev], width, 1, stride,
                                    stage_group, s > 1, True, False))
                skip = f"{base}.shortcut"
            else:
                skip = prev
            layers.append(Layer(base, "add", [f"{base}.conv2", skip], relu=True))
            prev = base
    layers.append(Layer("pool", "gap", [prev]))
    layers.append(Layer("fc", "linear", ["pool"], num_classes))
    depth = 6 * blocks_per_stage + 2
    return Arch(name or f"resnet{depth}", layers, in_channels, input_size, num_classes)


def vgg16_cifar(widths=None, num_classes: int = 10, in_channels: int = 3, input_size: int = 32,
                name: str = "vgg16") -> Arch:
    plan = VGG16_PLAN if widths is None else widths
    layers = []
    prev, conv_i, pool_i = "input", 0, 0
    for item in plan:
        if item == "M":
            pool_i += 1
            layers.append(Layer(f"pool{pool_i}", "maxpool", [prev], kernel=2, stride=2))
            prev = f"pool{pool_i}"
            continue
        conv_i += 1
        lid = f"conv{conv_i}"
        first = conv_i == 1
        layers.append(Layer(lid, "conv", [prev], int(item), 3, 1, lid, not first, first, True))
        prev = lid
    layers.append(Layer("pool", "gap", [prev]))
    layers.append(Layer("fc", "linear", ["pool"], num_classes))
    return Arch(name, layers, in_channels, input_size, num_classes)


def build_arch(name: str, seed_width: Optional[int] = None, num_classes: int = 10,
               in_channels: int = 3, input_size: int = 32) -> Arch:
    """Named seed architectures. ``seed_width`` overrides the first-stage width
    (later stages double it; VGG widths scale proportionally)."""
    if name in RESNET_DEPTHS:
        w = 16 if seed_width is None else int(seed_width)
        return resnet_cifar(RESNET_DEPTHS[name], (w, 2 * w, 4 * w), num_classes, in_channels, input_size, name)
    if name == "vgg16":
        plan = VGG16_PLAN
        if seed_width is not None:
            plan = [x if x == "M" else max(1, int(round(x * seed_width / 64))) for x in VGG16_PLAN]
        return vgg16_cifar(plan, num_classes, in_channels, input_size)
    raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(RESNET_DEPTHS) + ['vgg16']}")
