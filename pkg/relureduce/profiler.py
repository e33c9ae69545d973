"""relureduce/profiler.py

Exact ReLU, FLOP and parameter accounting per layer, per stage and per network.
FLOPs follow the multiply-accumulate convention: one multiply plus one add is one FLOP.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "FLOP_CONVENTION",
    "CountReport",
    "DistributionReport",
    "count_relus",
    "count_flops",
    "count_params",
    "distribution_report",
    "layer_table",
    "stage_table",
]

# std library
import logging
from dataclasses import dataclass
from typing import Callable

# 3rd party
import pandas as pd

# own
from .errors import GraphError
from .netir import (
    CLASSIFIER,
    CONV1,
    Add,
    AvgPool,
    BatchNorm,
    Conv2d,
    FullyConnected,
    LayerNode,
    MaxPool,
    NetworkGraph,
    ReLU,
    TensorShape,
    stage_view,
)

logger = logging.getLogger(__name__)

FLOP_CONVENTION = "# flops: multiply-accumulate (1 FLOP = 1 multiply + 1 add)"
METRICS = ("relu", "flops", "params")


@dataclass(frozen=True)
class CountReport:
    """One metric counted per layer and per stage. `per_stage` starts with Conv1 and
    ends with the classifier, so it always sums to `total`.
    """

    metric: str
    per_layer: tuple[tuple[str, int], ...]
    per_stage: tuple[tuple[str, int], ...]
    total: int

    def stage(self, stage_id: str) -> int:
        return dict(self.per_stage)[stage_id]

    def layer(self, node_id: str) -> int:
        return dict(self.per_layer)[node_id]

    def __str__(self) -> str:
        stages = ", ".join(f"{s}={c:,}" for s, c in self.per_stage)
        return f"{self.metric}: total={self.total:,} ({stages})"


@dataclass(frozen=True)
class DistributionReport:
    """Percent share of each weighted layer (conv or FC, together with the BN, ReLU
    and residual nodes hanging off its output) in the three metrics
    """

    per_layer_percent: tuple[tuple[str, float, float, float], ...]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.per_layer_percent), columns=["layer", "relu_pct", "flops_pct", "params_pct"])


def _shape(g: NetworkGraph, node_id: str) -> TensorShape:
    shape = g.node(node_id).out_shape
    if shape is None:
        raise GraphError("missing out_shape, run infer_shapes first", node_id)
    return shape


def _relus(g: NetworkGraph, n: LayerNode) -> int:
    return _shape(g, n.id).numel if isinstance(n.kind, ReLU) else 0


def _flops(g: NetworkGraph, n: LayerNode) -> int:
    kind = n.kind
    out = _shape(g, n.id)
    if isinstance(kind, Conv2d):
        in_channels = _shape(g, n.inputs[0]).channels
        return out.numel * (in_channels // kind.groups) * kind.kernel**2
    if isinstance(kind, FullyConnected):
        return _shape(g, n.inputs[0]).numel * kind.out_features
    if isinstance(kind, (BatchNorm, ReLU, AvgPool, MaxPool, Add)):
        return out.numel
    return 0


def _params(g: NetworkGraph, n: LayerNode) -> int:
    kind = n.kind
    if isinstance(kind, Conv2d):
        in_channels = _shape(g, n.inputs[0]).channels
        return kind.out_channels * (in_channels // kind.groups) * kind.kernel**2 + (kind.out_channels if kind.bias else 0)
    if isinstance(kind, BatchNorm):
        return 2 * _shape(g, n.id).channels
    if isinstance(kind, FullyConnected):
        return _shape(g, n.inputs[0]).numel * kind.out_features + (kind.out_features if kind.bias else 0)
    return 0


_COUNTERS: dict[str, Callable[[NetworkGraph, LayerNode], int]] = {"relu": _relus, "flops": _flops, "params": _params}


def _count(g: NetworkGraph, metric: str) -> CountReport:
    counter = _COUNTERS[metric]
    per_layer = tuple((n.id, counter(g, n)) for n in g.nodes)
    view = stage_view(g)
    by_node = dict(per_layer)
    partitions = [(CONV1, view.conv1_nodes), *view.stages, (CLASSIFIER, view.classifier_nodes)]
    per_stage = tuple((sid, sum(by_node[i] for i in ids)) for sid, ids in partitions)
    return CountReport(metric, per_layer, per_stage, sum(by_node.values()))


def count_relus(g: NetworkGraph) -> CountReport:
    """A ReLU node of shape CxHxW contributes C*H*W, every other node 0"""
    return _count(g, "relu")


def count_flops(g: NetworkGraph) -> CountReport:
    """Multiply-accumulates per node. BN, ReLU, pooling and Add count their output elements."""
    return _count(g, "flops")


def count_params(g: NetworkGraph) -> CountReport:
    return _count(g, "params")


def _layer_groups(g: NetworkGraph) -> dict[str, str]:
    """Map every node to the weighted layer whose output it post-processes"""
    group: dict[str, str] = {}
    pending: list[str] = []
    for n in g.nodes:
        if isinstance(n.kind, (Conv2d, FullyConnected)):
            group[n.id] = n.id
        elif n.inputs and n.inputs[0] in group:
            group[n.id] = group[n.inputs[0]]
        else:
            pending.append(n.id)
    weighted = [n.id for n in g.of_kind(Conv2d, FullyConnected)]
    if not weighted:
        raise GraphError("graph has no weighted layer to report on")
    for i in pending:
        group[i] = weighted[0]
    return group


def distribution_report(g: NetworkGraph) -> DistributionReport:
    """Percentage of ReLUs, FLOPs and parameters held by each weighted layer"""
    groups = _layer_groups(g)
    weighted = [n.id for n in g.of_kind(Conv2d, FullyConnected)]
    columns = []
    for metric in METRICS:
        report = _count(g, metric)
        if report.total == 0:
            raise GraphError(f"cannot build a distribution of {metric}: total is zero")
        sums = dict.fromkeys(weighted, 0)
        for node_id, c in report.per_layer:
            sums[groups[node_id]] += c
        columns.append([100.0 * sums[w] / report.total for w in weighted])
    rows = tuple((w, *vals) for w, vals in zip(weighted, zip(*columns)))
    return DistributionReport(rows)  # type: ignore


def layer_table(g: NetworkGraph) -> pd.DataFrame:
    """Per-node table with columns node_id, kind, stage, relus, flops, params"""
    stage_of = stage_view(g).stage_of()
    reports = [dict(_count(g, m).per_layer) for m in METRICS]
    return pd.DataFrame(
        {
            "node_id": [n.id for n in g.nodes],
            "kind": [type(n.kind).__name__ for n in g.nodes],
            "stage": [stage_of[n.id] for n in g.nodes],
            "relus": [reports[0][n.id] for n in g.nodes],
            "flops": [reports[1][n.id] for n in g.nodes],
            "params": [reports[2][n.id] for n in g.nodes],
        }
    )


def stage_table(g: NetworkGraph) -> pd.DataFrame:
    """Per-stage totals plus `relus_with_classifier`, the stage's ReLUs together with
    the classifier's (never culled) ReLUs
    """
    relus, flops, params = (_count(g, m) for m in METRICS)
    fc_relus = relus.stage(CLASSIFIER)
    rows = []
    for (sid, r), (_, f), (_, p) in zip(relus.per_stage, flops.per_stage, params.per_stage):
        with_fc = r + fc_relus if sid not in (CONV1, CLASSIFIER) else r
        rows.append((sid, r, f, p, with_fc))
    rows.append(("total", relus.total, flops.total, params.total, relus.total))
    return pd.DataFrame(rows, columns=["stage", "relus", "flops", "params", "relus_with_classifier"])
