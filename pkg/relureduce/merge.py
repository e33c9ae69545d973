"""relureduce/merge.py

Inference-time merging of adjacent linear layers once ReLUs are gone:
BN folding, conv-conv composition and absorption of residual or parallel
convolution branches into one convolution. Every rewrite returns new
(graph, weights) values; `equivalence_check` verifies the function is unchanged.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = ["EquivalenceReport", "fold_bn", "merge_adjacent_linear", "equivalence_check", "merge_model"]

# std library
import logging
from dataclasses import dataclass, replace
from typing import Optional

# 3rd party
import numpy as np

# own
from .engine import Model, forward, model_from_state
from .errors import EquivalenceError, GraphError
from .netir import (
    CLASSIFIER,
    Add,
    BatchNorm,
    Conv2d,
    FullyConnected,
    LayerNode,
    NetworkGraph,
    count_convs,
    infer_shapes,
    prune_unreachable,
)

logger = logging.getLogger(__name__)

Weights = dict[str, np.ndarray]


@dataclass(frozen=True)
class EquivalenceReport:
    n_samples: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict}: max relative L-inf error {self.max_rel_error:.3e} over {self.n_samples} samples (tolerance {self.tolerance:g})"


def _bias(w: Weights, node: LayerNode, out: int) -> np.ndarray:
    b = w.get(f"{node.id}.bias")
    return np.zeros(out, dtype=np.float64) if b is None else b.astype(np.float64)


def _rewire(g: NetworkGraph, replaced: dict[str, LayerNode], removed: set[str], redirect: dict[str, str], step: str) -> NetworkGraph:
    nodes = []
    for n in g.nodes:
        if n.id in removed:
            continue
        n = replaced.get(n.id, n)
        nodes.append(replace(n, inputs=tuple(redirect.get(i, i) for i in n.inputs), out_shape=None))
    return infer_shapes(g.evolve(nodes, step=step))


def fold_bn(g: NetworkGraph, weights: Weights) -> tuple[NetworkGraph, Weights]:
    """Fold every BatchNorm into the conv or FC feeding it:
    W' = gamma / sqrt(var + eps) * W,  b' = gamma * (b - mean) / sqrt(var + eps) + beta
    """
    bns = g.of_kind(BatchNorm)
    if not bns:
        return g, dict(weights)
    w = dict(weights)
    replaced: dict[str, LayerNode] = {}
    redirect: dict[str, str] = {}
    for bn in bns:
        prev = g.node(bn.inputs[0])
        if not isinstance(prev.kind, (Conv2d, FullyConnected)) or g.consumers(prev.id) != [bn.id]:
            raise GraphError("BatchNorm without a foldable conv/FC predecessor", bn.id)
        scale = w.pop(f"{bn.id}.gamma").astype(np.float64) / np.sqrt(w.pop(f"{bn.id}.running_var").astype(np.float64) + bn.kind.eps)  # type: ignore
        mean = w.pop(f"{bn.id}.running_mean").astype(np.float64)
        beta = w.pop(f"{bn.id}.beta").astype(np.float64)
        weight = w[f"{prev.id}.weight"].astype(np.float64)
        out = weight.shape[0]
        bias = _bias(w, prev, out)
        w[f"{prev.id}.weight"] = (weight * scale.reshape((-1,) + (1,) * (weight.ndim - 1))).astype(np.float32)
        w[f"{prev.id}.bias"] = (scale * (bias - mean) + beta).astype(np.float32)
        replaced[prev.id] = replace(prev, kind=replace(prev.kind, bias=True))
        redirect[bn.id] = prev.id
    logger.debug("folded %d BatchNorm layer(s)", len(bns))
    return _rewire(g, replaced, {b.id for b in bns}, redirect, "fold_bn"), w


def _dense(weight: np.ndarray, groups: int) -> np.ndarray:
    """Expand a grouped kernel (O, C/g, k, k) to its dense (O, C, k, k) equivalent"""
    if groups == 1:
        return weight.astype(np.float64)
    o, cg, k, _ = weight.shape
    og = o // groups
    dense = np.zeros((o, cg * groups, k, k))
    for grp in range(groups):
        dense[grp * og : (grp + 1) * og, grp * cg : (grp + 1) * cg] = weight[grp * og : (grp + 1) * og]
    return dense


def _compose(inner: LayerNode, outer: LayerNode, w: Weights) -> tuple[Conv2d, np.ndarray, np.ndarray]:
    """Single conv equal to outer(inner(x)). Kernel k1 + (k2 - 1) * s1, stride s1 * s2,
    padding p1 + s1 * p2.
    """
    k1: Conv2d = inner.kind  # type: ignore
    k2: Conv2d = outer.kind  # type: ignore
    w1 = _dense(w[f"{inner.id}.weight"], k1.groups)
    w2 = _dense(w[f"{outer.id}.weight"], k2.groups)
    s1 = k1.stride
    size = k1.kernel + (k2.kernel - 1) * s1
    kernel = np.zeros((w2.shape[0], w1.shape[1], size, size))
    for jy in range(k2.kernel):
        for jx in range(k2.kernel):
            kernel[:, :, s1 * jy : s1 * jy + k1.kernel, s1 * jx : s1 * jx + k1.kernel] += np.einsum("oc,cimn->oimn", w2[:, :, jy, jx], w1)
    bias = _bias(w, outer, w2.shape[0]) + w2.sum(axis=(2, 3)) @ _bias(w, inner, w1.shape[0])
    kind = Conv2d(w2.shape[0], size, s1 * k2.stride, k1.padding + s1 * k2.padding, 1, True)
    return kind, kernel, bias


def _composition_exact(inner: LayerNode, outer: LayerNode, w: Weights) -> bool:
    k1: Conv2d = inner.kind  # type: ignore
    k2: Conv2d = outer.kind  # type: ignore
    if k2.padding == 0:
        return True
    # zero padding between the two convs only commutes with a bias-free pointwise conv
    return k1.kernel == 1 and k1.padding == 0 and not np.any(w.get(f"{inner.id}.bias", 0))


def _embed(weight: np.ndarray, size: int, offset: int) -> np.ndarray:
    out = np.zeros(weight.shape[:2] + (size, size))
    k = weight.shape[2]
    out[:, :, offset : offset + k, offset : offset + k] = weight
    return out


@dataclass(frozen=True)
class _Branch:
    """One operand of an Add read as a conv on `source`. Identity operands become a
    1x1 identity conv without a node of their own.
    """

    source: str
    kind: Conv2d
    kernel: np.ndarray
    bias: np.ndarray
    node: Optional[LayerNode] = None


def _readings(g: NetworkGraph, node_id: str, w: Weights) -> list[_Branch]:
    n = g.node(node_id)
    out = []
    if isinstance(n.kind, Conv2d):
        kernel = _dense(w[f"{n.id}.weight"], n.kind.groups)
        out.append(_Branch(n.inputs[0], n.kind, kernel, _bias(w, n, kernel.shape[0]), n))
    if n.out_shape is not None:
        c = n.out_shape.channels
        out.append(_Branch(n.id, Conv2d(c, 1), np.eye(c).reshape(c, c, 1, 1), np.zeros(c)))
    return out


def _absorb_add(g: NetworkGraph, add: LayerNode, w: Weights) -> Optional[tuple[NetworkGraph, Weights]]:
    """Merge Add(conv(X), X) or Add(conv_a(X), conv_b(X)) into one conv on X"""
    for a in _readings(g, add.inputs[0], w):
        for b in _readings(g, add.inputs[1], w):
            merged = _absorb_pair(g, add, a, b, w)
            if merged is not None:
                return merged
    return None


def _absorb_pair(g: NetworkGraph, add: LayerNode, a: _Branch, b: _Branch, w: Weights) -> Optional[tuple[NetworkGraph, Weights]]:
    convs = [br for br in (a, b) if br.node is not None]
    if a.source != b.source or not convs:
        return None
    # each conv branch must feed only this Add
    if any(g.consumers(br.node.id) != [add.id] for br in convs):  # type: ignore
        return None
    big, small = (a, b) if a.kind.kernel >= b.kind.kernel else (b, a)
    offset = big.kind.padding - small.kind.padding
    if big.kind.stride != small.kind.stride or offset < 0 or offset + small.kind.kernel > big.kind.kernel:
        return None
    if big.kernel.shape[:2] != small.kernel.shape[:2]:
        return None

    keep: LayerNode = (big if big.node is not None else small).node  # type: ignore
    kernel = big.kernel + _embed(small.kernel, big.kind.kernel, offset)
    kind = Conv2d(kernel.shape[0], big.kind.kernel, big.kind.stride, big.kind.padding, 1, True)

    w = dict(w)
    for br in convs:
        w.pop(f"{br.node.id}.weight")  # type: ignore
        w.pop(f"{br.node.id}.bias", None)  # type: ignore
    w[f"{keep.id}.weight"] = kernel.astype(np.float32)
    w[f"{keep.id}.bias"] = (big.bias + small.bias).astype(np.float32)
    # the kept conv already precedes every consumer of the Add
    removed = {br.node.id for br in convs if br.node.id != keep.id} | {add.id}  # type: ignore
    try:
        out = _rewire(g, {keep.id: replace(keep, kind=kind, inputs=(a.source,))}, removed, {add.id: keep.id}, "absorb_add")
    except GraphError:
        return None
    if out.node(keep.id).out_shape != add.out_shape:
        return None
    return out, w


def _try_sequential(g: NetworkGraph, outer: LayerNode, w: Weights, allow_border_drift: bool) -> Optional[tuple[NetworkGraph, Weights]]:
    inner = g.node(outer.inputs[0])
    if not isinstance(inner.kind, Conv2d) or g.consumers(inner.id) != [outer.id]:
        return None
    if not allow_border_drift and not _composition_exact(inner, outer, w):
        return None
    kind, kernel, bias = _compose(inner, outer, w)
    in_shape = g.node(inner.inputs[0]).out_shape
    if in_shape is None or kind.kernel > min(in_shape.spatial):
        return None
    w = dict(w)
    for n in (inner, outer):
        w.pop(f"{n.id}.weight")
        w.pop(f"{n.id}.bias", None)
    w[f"{outer.id}.weight"] = kernel.astype(np.float32)
    w[f"{outer.id}.bias"] = bias.astype(np.float32)
    try:
        out = _rewire(g, {outer.id: replace(outer, kind=kind, inputs=inner.inputs)}, {inner.id}, {}, "compose_conv")
    except GraphError:
        return None
    if out.node(outer.id).out_shape != outer.out_shape:
        return None
    return out, w


def merge_adjacent_linear(g: NetworkGraph, weights: Weights, allow_border_drift: bool = False) -> tuple[NetworkGraph, Weights]:
    """Repeatedly compose conv chains and absorb ReLU-free residual or parallel
    conv branches until nothing merges. Expects BatchNorm already folded.

    Composition through a zero-padded intermediate is approximate at the borders,
    such chains are only merged with `allow_border_drift`.
    """
    if g.of_kind(BatchNorm):
        raise GraphError("fold BatchNorm layers before merging")
    g = infer_shapes(g)
    w = dict(weights)
    before = count_convs(g, include_shortcuts=True)
    changed = True
    while changed:
        changed = False
        for n in g.nodes:
            if n.stage_tag == CLASSIFIER:
                continue
            result = None
            if isinstance(n.kind, Conv2d):
                result = _try_sequential(g, n, w, allow_border_drift)
            elif isinstance(n.kind, Add):
                result = _absorb_add(g, n, w)
            if result is not None:
                g, w = result
                logger.debug("merged at %s", n.id)
                changed = True
                break
    g = prune_unreachable(g, g.output.id)
    logger.info("merge: %d -> %d conv layers", before, count_convs(g, include_shortcuts=True))
    return g, w


def equivalence_check(
    g1: NetworkGraph,
    g2: NetworkGraph,
    weights1: Weights,
    weights2: Weights,
    n_samples: int = 100,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> EquivalenceReport:
    """Max over random N(0, 1) inputs of the per-sample relative L-inf output difference,
    both graphs evaluated in float64 inference mode
    """
    if g1.input_shape != g2.input_shape or g1.num_classes != g2.num_classes:
        raise GraphError(f"graphs differ in interface: {g1.input_shape}/{g1.num_classes} vs {g2.input_shape}/{g2.num_classes}")
    m1 = model_from_state(g1, weights1).astype(np.float64)
    m2 = model_from_state(g2, weights2).astype(np.float64)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for start in range(0, n_samples, 25):
        x = rng.normal(size=(min(25, n_samples - start), *g1.input_shape.as_list()))
        o1 = forward(m1, x)
        o2 = forward(m2, x)
        diff = np.abs(o1 - o2).reshape(len(x), -1).max(axis=1)
        scale = np.maximum(np.abs(o1).reshape(len(x), -1).max(axis=1), 1e-12)
        worst = max(worst, float((diff / scale).max()))
    m1._tape = m2._tape = None
    return EquivalenceReport(n_samples, worst, tolerance)


def merge_model(
    model: Model,
    allow_border_drift: bool = False,
    n_samples: int = 100,
    tolerance: float = 1e-4,
) -> tuple[Model, EquivalenceReport]:
    """Fold and merge `model`, then verify it. Raises EquivalenceError on mismatch."""
    state = model.state()
    g, w = fold_bn(model.graph, state)
    g, w = merge_adjacent_linear(g, w, allow_border_drift)
    report = equivalence_check(model.graph, g, state, w, n_samples, tolerance)
    if not report.passed:
        raise EquivalenceError(f"merged {model.graph.name} is not equivalent: {report}")
    return model_from_state(g, w), report
