"""relureduce/architectures.py

CIFAR-style builders for the supported network families. Stems use stride 1 and
no initial max-pool, so a 32x32 input keeps its resolution through Conv1.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = ["FAMILIES", "ArchitectureSpec", "build_architecture"]

# std library
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

# own
from .errors import ConfigError, GraphError
from .netir import (
    CLASSIFIER,
    CONV1,
    Add,
    AvgPool,
    BatchNorm,
    Conv2d,
    Flatten,
    FullyConnected,
    Input,
    LayerNode,
    MaxPool,
    NetworkGraph,
    ReLU,
    TensorShape,
    infer_shapes,
    strip_residuals,
    validate,
)

logger = logging.getLogger(__name__)

FAMILIES = ("ResNet18", "ResNet34", "ResNet56", "ResNet10", "ResNet9", "ResNet6", "VGG16", "MobileNetV1")
_BY_LOWER = {f.lower(): f for f in FAMILIES}

# blocks per stage and convs per block of the residual families
_RESNETS: dict[str, tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]] = {
    # family: (widths, blocks per stage, convs in every block of that stage)
    "ResNet18": ((64, 128, 256, 512), (2, 2, 2, 2), (2, 2, 2, 2)),
    "ResNet34": ((64, 128, 256, 512), (3, 4, 6, 3), (2, 2, 2, 2)),
    "ResNet10": ((64, 128, 256, 512), (1, 1, 1, 1), (2, 2, 2, 2)),
    "ResNet9": ((64, 128, 256, 512), (1, 1, 1, 1), (1, 2, 2, 2)),
    "ResNet6": ((64, 128, 256, 512), (1, 1, 1, 1), (1, 1, 1, 1)),
    "ResNet56": ((16, 32, 64), (9, 9, 9), (2, 2, 2)),
}

# (out_channels, stride) of each depthwise/pointwise pair
_MOBILENET_PAIRS = (
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1),
)  # fmt: skip

_VGG16_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
_VGG_FC_WIDTH = 4096

Scale = Union[Fraction, float, int, str]


@dataclass(frozen=True)
class ArchitectureSpec:
    """What to build.

    Attributes:
    -> family\t\tone of FAMILIES (case-insensitive)
    -> input_shape\tper-sample input, e.g. TensorShape(3, 32, 32)
    -> num_classes\tclassifier width
    -> strip_residuals\tdrop every residual Add after building
    -> alpha\t\tchannel scale in (0, 1]
    -> rho\t\tfeature-map resolution scale in (0, 1]
    """

    family: str
    input_shape: TensorShape = TensorShape(3, 32, 32)
    num_classes: int = 100
    strip_residuals: bool = False
    alpha: Scale = 1
    rho: Scale = 1

    @property
    def canonical_family(self) -> str:
        try:
            return _BY_LOWER[self.family.lower()]
        except KeyError:
            raise ConfigError(f"unsupported family {self.family!r}, expected one of {', '.join(FAMILIES)}") from None

    def to_dict(self) -> dict:
        return {
            "family": self.canonical_family,
            "input": self.input_shape.as_list(),
            "num_classes": self.num_classes,
            "strip_residuals": self.strip_residuals,
            "alpha": str(Fraction(self.alpha).limit_denominator()),
            "rho": str(Fraction(self.rho).limit_denominator()),
        }


class _Builder:
    """Appends nodes in topological order, tagging each with the current stage"""

    def __init__(self, input_shape: TensorShape) -> None:
        self.nodes: list[LayerNode] = [LayerNode("input", Input(), (), None, CONV1, "input")]
        self.stage = CONV1
        self.prefix = ""
        self.last = "input"
        self.channels = input_shape.channels

    def add(self, name: str, kind, inputs: tuple[str, ...] | None = None, role: str = "") -> str:
        node_id = f"{self.prefix}{name}"
        self.nodes.append(LayerNode(node_id, kind, (self.last,) if inputs is None else inputs, None, self.stage, role))
        self.last = node_id
        if isinstance(kind, Conv2d):
            self.channels = kind.out_channels
        return node_id

    def conv_bn(self, name: str, out: int, kernel: int, stride: int = 1, groups: int = 1, role: str = "", relu: bool = True) -> str:
        pad = kernel // 2
        self.add(name, Conv2d(out, kernel, stride, pad, groups), (self.last,), role)
        self.add(f"{name}.bn", BatchNorm(), (self.last,), role)
        if relu:
            self.add(f"{name}.relu", ReLU(), (self.last,), role)
        return self.last


def _basic_block(b: _Builder, out: int, stride: int, convs: int) -> None:
    x = b.last
    in_channels = b.channels
    for c in range(1, convs + 1):
        last = c == convs
        b.conv_bn(f"conv{c}", out, 3, stride if c == 1 else 1, relu=not last)
    main = b.last

    shortcut = x
    if stride != 1 or in_channels != out:
        b.last = x
        b.add("shortcut", Conv2d(out, 1, stride, 0), (x,), "shortcut")
        b.add("shortcut.bn", BatchNorm(), (b.last,), "shortcut")
        shortcut = b.last
    b.add("add", Add(), (main, shortcut))
    b.add("relu", ReLU(), (b.last,), "block_out")


def _classifier(b: _Builder, num_classes: int) -> None:
    b.stage = CLASSIFIER
    b.prefix = "head."
    b.add("pool", AvgPool(1, 1, global_pool=True), (b.last,))
    b.add("flatten", Flatten(), (b.last,))
    b.add("fc", FullyConnected(num_classes), (b.last,), "classifier")


def _build_resnet(family: str, spec: ArchitectureSpec) -> tuple[list[LayerNode], bool]:
    widths, blocks, convs = _RESNETS[family]
    conv1_in_s1 = family == "ResNet56"
    b = _Builder(spec.input_shape)
    b.stage = "S1" if conv1_in_s1 else CONV1
    b.prefix = "conv1."
    b.conv_bn("conv", widths[0], 3, role="stem")

    for k, (width, n_blocks, n_convs) in enumerate(zip(widths, blocks, convs), start=1):
        b.stage = f"S{k}"
        for j in range(1, n_blocks + 1):
            b.prefix = f"s{k}.b{j}."
            stride = 2 if k > 1 and j == 1 else 1
            _basic_block(b, width, stride, n_convs)

    _classifier(b, spec.num_classes)
    return b.nodes, conv1_in_s1


def _build_mobilenet(spec: ArchitectureSpec) -> tuple[list[LayerNode], bool]:
    b = _Builder(spec.input_shape)
    b.stage = "S1"
    b.prefix = "conv1."
    b.conv_bn("conv", 32, 3, role="stem")

    stage = 1
    for j, (out, stride) in enumerate(_MOBILENET_PAIRS, start=1):
        if stride == 2:
            stage += 1
        b.stage = f"S{stage}"
        b.prefix = f"s{stage}.p{j}."
        b.conv_bn("dw", b.channels, 3, stride, groups=b.channels, role="depthwise")
        b.conv_bn("pw", out, 1, role="pointwise")

    _classifier(b, spec.num_classes)
    return b.nodes, True


def _build_vgg16(spec: ArchitectureSpec) -> tuple[list[LayerNode], bool]:
    b = _Builder(spec.input_shape)
    for k, widths in enumerate(_VGG16_STAGES, start=1):
        b.stage = f"S{k}"
        b.prefix = f"s{k}."
        for j, width in enumerate(widths, start=1):
            b.conv_bn(f"conv{j}", width, 3, role="stem" if k == j == 1 else "")
        b.add("pool", MaxPool(2, 2), (b.last,))

    b.stage = CLASSIFIER
    b.prefix = "head."
    b.add("flatten", Flatten(), (b.last,))
    for j in (1, 2):
        b.add(f"fc{j}", FullyConnected(_VGG_FC_WIDTH), (b.last,), "hidden")
        b.add(f"fc{j}.relu", ReLU(), (b.last,), "hidden")
    b.add("fc", FullyConnected(spec.num_classes), (b.last,), "classifier")
    return b.nodes, True


def _downsamplings(family: str) -> int:
    if family == "VGG16":
        return len(_VGG16_STAGES)
    if family == "MobileNetV1":
        return sum(1 for _, s in _MOBILENET_PAIRS if s == 2)
    return len(_RESNETS[family][0]) - 1


def build_architecture(spec: ArchitectureSpec) -> NetworkGraph:
    """Build, scale and validate the graph of one of the supported families"""
    family = spec.canonical_family
    if spec.num_classes < 1:
        raise ConfigError(f"num_classes must be positive, got {spec.num_classes}")

    if family.startswith("ResNet"):
        nodes, conv1_in_s1 = _build_resnet(family, spec)
    elif family == "MobileNetV1":
        nodes, conv1_in_s1 = _build_mobilenet(spec)
    else:
        nodes, conv1_in_s1 = _build_vgg16(spec)

    g = NetworkGraph(
        nodes=tuple(nodes),
        input_shape=spec.input_shape,
        num_classes=spec.num_classes,
        name=family,
        family=family,
        conv1_in_first_stage=conv1_in_s1,
    )

    # scaling first, so that the size check sees the resolution actually fed in
    if Fraction(spec.alpha) != 1 or Fraction(spec.rho) != 1:
        from .passes import reshape

        g = reshape(g, spec.alpha, spec.rho)

    need = 2 ** _downsamplings(family)
    if min(g.input_shape.spatial) < need:
        raise GraphError(f"{family} input {g.input_shape} too small for {_downsamplings(family)} downsamplings, need >= {need}")

    g = infer_shapes(g)
    if spec.strip_residuals:
        g = strip_residuals(g)

    report = validate(g)
    if not report:
        raise GraphError(f"{family} failed validation: {report}")
    logger.debug("built %s with %d nodes", family, len(g))
    return g
