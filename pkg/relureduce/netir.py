"""relureduce/netir.py

Typed computation-graph IR for CNNs: layer kinds, nodes, graphs, shape inference,
validation, stage partitioning and residual stripping.

Graphs are immutable values. Every operation returns a new graph.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "TensorShape",
    "Input",
    "Conv2d",
    "BatchNorm",
    "ReLU",
    "AvgPool",
    "MaxPool",
    "FullyConnected",
    "Flatten",
    "Add",
    "LayerNode",
    "NetworkGraph",
    "StageView",
    "Violation",
    "ValidationReport",
    "infer_shapes",
    "validate",
    "stage_view",
    "strip_residuals",
    "bypass_nodes",
    "prune_unreachable",
    "count_convs",
]

# std library
import json
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Iterable, Union

# own
from .errors import GraphError

logger = logging.getLogger(__name__)

CONV1 = "Conv1"
CLASSIFIER = "Classifier"
_STAGE_RE = re.compile(r"^S(\d+)$")


@dataclass(frozen=True)
class TensorShape:
    """Channels x height x width of one sample's feature map"""

    channels: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if min(self.channels, self.height, self.width) < 1:
            raise GraphError(f"non-positive dimension in {self}")

    @property
    def numel(self) -> int:
        return self.channels * self.height * self.width

    @property
    def spatial(self) -> tuple[int, int]:
        return self.height, self.width

    def as_list(self) -> list[int]:
        return [self.channels, self.height, self.width]

    def __str__(self) -> str:
        return f"{self.channels}x{self.height}x{self.width}"


# layer kinds


@dataclass(frozen=True)
class Input:
    pass


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False


@dataclass(frozen=True)
class BatchNorm:
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool:
    kernel: int
    stride: int
    global_pool: bool = False


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class FullyConnected:
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Add:
    pass


Kind = Union[Input, Conv2d, BatchNorm, ReLU, AvgPool, MaxPool, FullyConnected, Flatten, Add]
KINDS = {cls.__name__: cls for cls in (Input, Conv2d, BatchNorm, ReLU, AvgPool, MaxPool, FullyConnected, Flatten, Add)}


@dataclass(frozen=True)
class LayerNode:
    """One layer of a NetworkGraph.

    Attributes:
    -> id\t\tunique identifier
    -> kind\t\tlayer kind with its hyper-parameters
    -> inputs\tids of the producing nodes (main path first for Add)
    -> out_shape\tfilled by infer_shapes
    -> stage_tag\t"Conv1", "S1".."SD" or "Classifier"
    -> role\t\tfree-form structural hint ("stem", "shortcut", "depthwise", ...)
    """

    id: str
    kind: Kind
    inputs: tuple[str, ...] = ()
    out_shape: TensorShape | None = None
    stage_tag: str | None = None
    role: str = ""

    def to_dict(self) -> dict:
        kind = {"type": type(self.kind).__name__, **asdict(self.kind)}
        return {
            "id": self.id,
            "kind": kind,
            "inputs": list(self.inputs),
            "out_shape": self.out_shape.as_list() if self.out_shape else None,
            "stage_tag": self.stage_tag,
            "role": self.role,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerNode":
        kind = dict(d["kind"])
        kind_cls = KINDS[kind.pop("type")]
        shape = d.get("out_shape")
        return cls(
            id=d["id"],
            kind=kind_cls(**kind),
            inputs=tuple(d.get("inputs", ())),
            out_shape=TensorShape(*shape) if shape else None,
            stage_tag=d.get("stage_tag"),
            role=d.get("role", ""),
        )


@dataclass(frozen=True)
class NetworkGraph:
    """Directed acyclic graph of layers stored in topological order.

    `provenance` records the passes applied to the graph, oldest first, and takes
    no part in equality.
    `conv1_in_first_stage` is set by families whose stem belongs to S1.
    """

    nodes: tuple[LayerNode, ...]
    input_shape: TensorShape
    num_classes: int
    name: str
    family: str = ""
    conv1_in_first_stage: bool = False
    provenance: tuple[str, ...] = field(default=(), compare=False)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def _consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                if i in out:
                    out[i].append(n.id)
        return out

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def __repr__(self) -> str:
        return f"<NetworkGraph({self.name}, nodes={len(self)})>"

    def node(self, node_id: str) -> LayerNode:
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise GraphError("unknown node", node_id) from None

    def consumers(self, node_id: str) -> list[str]:
        return list(self._consumers.get(node_id, ()))

    def outputs(self) -> list[LayerNode]:
        return [n for n in self.nodes if not self._consumers[n.id]]

    @property
    def output(self) -> LayerNode:
        outs = self.outputs()
        if len(outs) != 1:
            raise GraphError(f"expected exactly one output node, found {[n.id for n in outs]}")
        return outs[0]

    def of_kind(self, *kinds: type) -> list[LayerNode]:
        return [n for n in self.nodes if isinstance(n.kind, kinds)]

    def evolve(self, nodes: Iterable[LayerNode] | None = None, step: str | None = None, **changes) -> "NetworkGraph":
        """Return a copy with new nodes and/or fields, appending `step` to the provenance"""
        if nodes is not None:
            changes["nodes"] = tuple(nodes)
        if step:
            changes["provenance"] = self.provenance + (step,)
        return replace(self, **changes)

    # structured text form

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "num_classes": self.num_classes,
            "input_shape": self.input_shape.as_list(),
            "conv1_in_first_stage": self.conv1_in_first_stage,
            "provenance": list(self.provenance),
            "nodes": [n.to_dict() for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkGraph":
        try:
            return cls(
                nodes=tuple(LayerNode.from_dict(n) for n in d["nodes"]),
                input_shape=TensorShape(*d["input_shape"]),
                num_classes=int(d["num_classes"]),
                name=d["name"],
                family=d.get("family", ""),
                conv1_in_first_stage=bool(d.get("conv1_in_first_stage", False)),
                provenance=tuple(d.get("provenance", ())),
            )
        except (KeyError, TypeError) as e:
            raise GraphError(f"malformed graph document: {e!r}") from None

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True, separators=(",", ":") if indent is None else None)

    @classmethod
    def from_json(cls, text: str) -> "NetworkGraph":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class StageView:
    """Partition of a graph into Conv1, stages S1..SD and the classifier"""

    conv1_nodes: tuple[str, ...]
    stages: tuple[tuple[str, tuple[str, ...]], ...]
    classifier_nodes: tuple[str, ...]

    @property
    def depth(self) -> int:
        return len(self.stages)

    @property
    def stage_ids(self) -> list[str]:
        return [sid for sid, _ in self.stages]

    def nodes_of(self, stage_id: str) -> tuple[str, ...]:
        if stage_id == CONV1:
            return self.conv1_nodes
        if stage_id == CLASSIFIER:
            return self.classifier_nodes
        for sid, ids in self.stages:
            if sid == stage_id:
                return ids
        raise GraphError(f"unknown stage id {stage_id!r}, expected one of {self.stage_ids}")

    def stage_of(self) -> dict[str, str]:
        out = {i: CONV1 for i in self.conv1_nodes}
        out.update({i: CLASSIFIER for i in self.classifier_nodes})
        for sid, ids in self.stages:
            out.update({i: sid for i in ids})
        return out


@dataclass(frozen=True)
class Violation:
    node_id: str | None
    message: str

    def __str__(self) -> str:
        return f"{self.node_id}: {self.message}" if self.node_id else self.message


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "pass"
        return "fail\n" + "\n".join(f"  {v}" for v in self.violations)


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _node_shape(node: LayerNode, ins: list[TensorShape], graph_input: TensorShape) -> TensorShape:
    kind = node.kind
    try:
        if isinstance(kind, Input):
            return graph_input
        x = ins[0]
        if isinstance(kind, Conv2d):
            if x.channels % kind.groups or kind.out_channels % kind.groups:
                raise GraphError(f"groups={kind.groups} does not divide {x.channels}->{kind.out_channels}", node.id)
            return TensorShape(
                kind.out_channels,
                _conv_out(x.height, kind.kernel, kind.stride, kind.padding),
                _conv_out(x.width, kind.kernel, kind.stride, kind.padding),
            )
        if isinstance(kind, (BatchNorm, ReLU)):
            return x
        if isinstance(kind, AvgPool) and kind.global_pool:
            return TensorShape(x.channels, 1, 1)
        if isinstance(kind, (AvgPool, MaxPool)):
            return TensorShape(
                x.channels,
                _conv_out(x.height, kind.kernel, kind.stride, 0),
                _conv_out(x.width, kind.kernel, kind.stride, 0),
            )
        if isinstance(kind, Flatten):
            return TensorShape(x.numel, 1, 1)
        if isinstance(kind, FullyConnected):
            return TensorShape(kind.out_features, 1, 1)
        if isinstance(kind, Add):
            if ins[0] != ins[1]:
                raise GraphError(f"shape mismatch at Add: {ins[0]} vs {ins[1]}", node.id)
            return x
    except GraphError as e:
        if e.node_id is None:
            raise GraphError(str(e), node.id) from None
        raise
    raise GraphError(f"unsupported layer kind {type(kind).__name__}", node.id)


def infer_shapes(g: NetworkGraph) -> NetworkGraph:
    """Fill out_shape of every node. Deterministic and idempotent."""
    shapes: dict[str, TensorShape] = {}
    nodes = []
    for n in g.nodes:
        try:
            ins = [shapes[i] for i in n.inputs]
        except KeyError as e:
            raise GraphError(f"input {e.args[0]!r} is not defined before use", n.id) from None
        shape = _node_shape(n, ins, g.input_shape)
        shapes[n.id] = shape
        nodes.append(n if n.out_shape == shape else replace(n, out_shape=shape))
    return replace(g, nodes=tuple(nodes))


def validate(g: NetworkGraph) -> ValidationReport:
    """Check the graph invariants. Never raises: the violations are the payload."""
    violations: list[Violation] = []
    seen: set[str] = set()
    all_ids = {n.id for n in g.nodes}

    for n in g.nodes:
        if n.id in seen:
            violations.append(Violation(n.id, "duplicate node id"))
        arity = 0 if isinstance(n.kind, Input) else 2 if isinstance(n.kind, Add) else 1
        if len(n.inputs) != arity:
            violations.append(Violation(n.id, f"{type(n.kind).__name__} expects {arity} input(s), has {len(n.inputs)}"))
        for i in n.inputs:
            if i not in all_ids:
                violations.append(Violation(n.id, f"dangling input {i!r}"))
            elif i not in seen:
                violations.append(Violation(n.id, f"input {i!r} violates topological order"))
        seen.add(n.id)

    n_inputs = len(g.of_kind(Input))
    if n_inputs != 1:
        violations.append(Violation(None, f"expected exactly one Input node, found {n_inputs}"))
    outs = [n.id for n in g.nodes if not g.consumers(n.id)]
    if len(outs) != 1:
        violations.append(Violation(None, f"expected exactly one output node, found {outs}"))

    # shape checks only make sense on a structurally sound graph
    if not violations:
        try:
            inferred = infer_shapes(g)
        except GraphError as e:
            violations.append(Violation(e.node_id, str(e).split(": ", 1)[-1]))
        else:
            for a, b in zip(g.nodes, inferred.nodes):
                if a.out_shape is not None and a.out_shape != b.out_shape:
                    violations.append(Violation(a.id, f"stale out_shape {a.out_shape}, expected {b.out_shape}"))

    return ValidationReport(tuple(violations))


def _derive_stage_tags(g: NetworkGraph) -> list[str]:
    """Derive stage tags from spatial resolution for graphs without tags"""
    g = infer_shapes(g)
    tags: list[str] = []
    resolutions: list[tuple[int, int]] = []
    phase = "stem"
    for n in g.nodes:
        kind = n.kind
        if phase == "stem":
            tags.append(CONV1)
            if isinstance(kind, ReLU) or (isinstance(kind, Conv2d) and not isinstance(g.node(g.consumers(n.id)[0]).kind, (BatchNorm, ReLU))):
                phase = "body"
            continue
        if isinstance(kind, (Flatten, FullyConnected)) or (isinstance(kind, AvgPool) and kind.global_pool):
            phase = "head"
        if phase == "head":
            tags.append(CLASSIFIER)
            continue
        res = n.out_shape.spatial  # type: ignore
        if res not in resolutions:
            resolutions.append(res)
        tags.append(f"S{resolutions.index(res) + 1}")
    if phase != "head":
        raise GraphError("untagged graph without a derivable classifier boundary")
    return tags


def stage_view(g: NetworkGraph) -> StageView:
    """Partition `g` into Conv1 + S1..SD + classifier. Stages come ordered by
    decreasing spatial resolution, D must lie in [3, 5].
    """
    tags = [n.stage_tag for n in g.nodes]
    if any(t is None for t in tags):
        logger.debug("deriving stage tags of %s from spatial resolution", g.name)
        tags = _derive_stage_tags(g)  # type: ignore

    conv1: list[str] = []
    classifier: list[str] = []
    stages: dict[int, list[str]] = {}
    for n, tag in zip(g.nodes, tags):
        if tag == CONV1:
            conv1.append(n.id)
        elif tag == CLASSIFIER:
            classifier.append(n.id)
        elif (m := _STAGE_RE.match(tag or "")) is not None:
            stages.setdefault(int(m.group(1)), []).append(n.id)
        else:
            raise GraphError(f"unknown stage tag {tag!r}", n.id)

    order = sorted(stages)
    if order != list(range(1, len(order) + 1)):
        raise GraphError(f"stage tags are not contiguous: {order}")
    if not 3 <= len(order) <= 5:
        raise GraphError(f"expected 3 to 5 stages, found {len(order)}")
    return StageView(
        conv1_nodes=tuple(conv1),
        stages=tuple((f"S{k}", tuple(stages[k])) for k in order),
        classifier_nodes=tuple(classifier),
    )


def bypass_nodes(g: NetworkGraph, node_ids: Iterable[str], step: str | None = None) -> NetworkGraph:
    """Remove single-input nodes, rewiring their consumers to the removed node's
    (main-path) input. Shapes are left untouched.
    """
    drop = set(node_ids)
    if not drop:
        return g
    redirect: dict[str, str] = {}
    for n in g.nodes:
        if n.id in drop:
            if not n.inputs:
                raise GraphError("cannot bypass a source node", n.id)
            src = n.inputs[0]
            redirect[n.id] = redirect.get(src, src)
    nodes = [
        replace(n, inputs=tuple(redirect.get(i, i) for i in n.inputs))
        for n in g.nodes
        if n.id not in drop
    ]
    logger.debug("%s: bypassed %d node(s)", g.name, len(drop))
    return g.evolve(nodes, step=step)


def prune_unreachable(g: NetworkGraph, output_id: str) -> NetworkGraph:
    """Drop every node from which `output_id` cannot be reached"""
    live = {output_id}
    for n in reversed(g.nodes):
        if n.id in live:
            live.update(n.inputs)
    if len(live) == len(g.nodes):
        return g
    return g.evolve(n for n in g.nodes if n.id in live)


def strip_residuals(g: NetworkGraph) -> NetworkGraph:
    """Remove every residual Add, keeping the main path. Projection shortcuts
    left without a consumer are dropped too.
    """
    adds = [n.id for n in g.of_kind(Add)]
    if not adds:
        return g
    output_id = g.output.id
    stripped = bypass_nodes(g, adds)
    stripped = prune_unreachable(stripped, output_id)
    return stripped.evolve(step="strip_residuals")


def count_convs(g: NetworkGraph, include_shortcuts: bool = False) -> int:
    """Number of Conv2d layers, the "#Conv" of a network (projection shortcuts
    excluded unless asked for)
    """
    return sum(1 for n in g.of_kind(Conv2d) if include_shortcuts or n.role != "shortcut")
