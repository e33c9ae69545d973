"""relureduce/passes.py

ReLU-reducing rewrite passes: Culling, Thinning and Reshaping.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = ["PARITIES", "ReduceStep", "cull", "thin", "reshape", "apply_step", "as_fraction"]

# std library
import logging
import math
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Union

# own
from .errors import ConfigError, GraphError
from .netir import CONV1, Conv2d, FullyConnected, NetworkGraph, ReLU, bypass_nodes, infer_shapes, stage_view

logger = logging.getLogger(__name__)

PARITIES = ("keep-odd", "keep-even")


def as_fraction(value: Union[Fraction, float, int, str], name: str = "scale") -> Fraction:
    """Parse a scale factor in (0, 1]. Floats are read as the nearest small fraction."""
    try:
        f = Fraction(value).limit_denominator(1 << 16) if isinstance(value, float) else Fraction(value)
    except (ValueError, ZeroDivisionError, TypeError):
        raise ConfigError(f"{name} must be a number in (0, 1], got {value!r}") from None
    if not 0 < f <= 1:
        raise ConfigError(f"{name} must lie in (0, 1], got {value}")
    return f


def _fmt(f: Fraction) -> str:
    return str(float(f)) if f.denominator in (1, 2, 4, 8) else str(f)


@dataclass(frozen=True)
class ReduceStep:
    """One reduction candidate: stages to cull, stages to thin, and the reshape factors.
    Conv1 is culled implicitly. With single_block each thinned stage keeps ReLUs in its last block only.
    """

    culled: frozenset[str] = frozenset()
    thinned: frozenset[str] = frozenset()
    parity: str = "keep-odd"
    alpha: Fraction = field(default=Fraction(1))
    rho: Fraction = field(default=Fraction(1))
    single_block: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "culled", frozenset(self.culled))
        object.__setattr__(self, "thinned", frozenset(self.thinned))
        object.__setattr__(self, "alpha", as_fraction(self.alpha, "alpha"))
        object.__setattr__(self, "rho", as_fraction(self.rho, "rho"))
        if self.parity not in PARITIES:
            raise ConfigError(f"parity must be one of {PARITIES}, got {self.parity!r}")
        if self.culled & self.thinned:
            raise ConfigError(f"stages both culled and thinned: {sorted(self.culled & self.thinned)}")
        if self.single_block and not self.thinned:
            raise ConfigError("single_block thinning needs at least one thinned stage")

    @property
    def label(self) -> str:
        parts = [f"cull[{'+'.join(sorted(self.culled))}]"]
        if self.thinned:
            mark = "*" if self.single_block else ""
            parts.append(f"thin[{'+'.join(s + mark for s in sorted(self.thinned))}]")
        if self.alpha != 1:
            parts.append(f"alpha={_fmt(self.alpha)}")
        if self.rho != 1:
            parts.append(f"rho={_fmt(self.rho)}")
        return " ".join(parts)

    def to_dict(self) -> dict:
        return {
            "culled": sorted(self.culled),
            "thinned": sorted(self.thinned),
            "parity": self.parity,
            "alpha": str(self.alpha),
            "rho": str(self.rho),
            "single_block": self.single_block,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReduceStep":
        unknown = set(d) - {"culled", "thinned", "parity", "alpha", "rho", "single_block"}
        if unknown:
            raise ConfigError(f"unknown reduce-step keys: {sorted(unknown)}")
        return cls(
            culled=frozenset(d.get("culled", ())),
            thinned=frozenset(d.get("thinned", ())),
            parity=d.get("parity", "keep-odd"),
            alpha=d.get("alpha", 1),
            rho=d.get("rho", 1),
            single_block=bool(d.get("single_block", False)),
        )


def _check_stages(g: NetworkGraph, stages: Iterable[str]) -> set[str]:
    stages = set(stages)
    known = set(stage_view(g).stage_ids) | {CONV1}
    unknown = stages - known
    if unknown:
        raise GraphError(f"unknown stage id(s) {sorted(unknown)} for {g.name}, expected a subset of {sorted(known)}")
    return stages


def cull(g: NetworkGraph, stages: Iterable[str]) -> NetworkGraph:
    """Remove every ReLU of the listed stages and of Conv1, rewiring around them"""
    stages = _check_stages(g, stages) | {CONV1}
    stage_of = stage_view(g).stage_of()
    drop = [n.id for n in g.of_kind(ReLU) if stage_of[n.id] in stages]
    logger.debug("cull %s: removing %d ReLU layer(s)", sorted(stages), len(drop))
    if not drop:
        return g
    return bypass_nodes(g, drop, step=f"cull({','.join(sorted(stages))})")


def _block_of(node_id: str) -> str:
    parts = node_id.split(".")
    if len(parts) > 2 and re.fullmatch(r"[bp]\d+", parts[1]):
        return ".".join(parts[:2])
    return parts[0]


def _thin_drop(relus: list, parity: str, single_block: bool = False) -> list[str]:
    depthwise = [n.id for n in relus if n.role == "depthwise"]
    if depthwise:
        drop = depthwise
    else:
        # positions count from the stage's last ReLU backwards, so block outputs come first
        keep_offset = 0 if parity == "keep-odd" else 1
        drop = [n.id for pos, n in enumerate(reversed(relus)) if pos % 2 != keep_offset]
    if not single_block:
        return drop
    last = _block_of(relus[-1].id)
    dropped = set(drop)
    return [n.id for n in relus if n.id in dropped or _block_of(n.id) != last]


def thin(g: NetworkGraph, stages: Iterable[str], parity: str = "keep-odd", single_block: bool = False) -> NetworkGraph:
    """Drop alternate ReLU layers within each listed stage. In depthwise-separable
    stages the ReLUs after depthwise convs are the ones dropped.

    With ``single_block`` only the stage's last block keeps its surviving ReLUs,
    every other block of the stage loses all of them.
    """
    if parity not in PARITIES:
        raise ConfigError(f"parity must be one of {PARITIES}, got {parity!r}")
    stages = _check_stages(g, stages)
    view = stage_view(g)
    drop: list[str] = []
    for sid in sorted(stages):
        ids = set(view.nodes_of(sid))
        relus = [n for n in g.of_kind(ReLU) if n.id in ids]
        if not relus:
            raise GraphError(f"stage {sid} has no ReLU layers to thin")
        stage_drop = _thin_drop(relus, parity, single_block)
        logger.debug("thin %s: %d of %d ReLU layer(s) removed", sid, len(stage_drop), len(relus))
        drop.extend(stage_drop)
    if not drop:
        return g
    mode = f"{parity};single-block" if single_block else parity
    return bypass_nodes(g, drop, step=f"thin({','.join(sorted(stages))};{mode})")


def _scale_channels(c: int, alpha: Fraction, node_id: str) -> int:
    exact = c * alpha
    if exact.denominator != 1:
        logger.warning("%s: %d channels scaled by %s is not integral, rounding half up", node_id, c, alpha)
    return max(1, math.floor(exact + Fraction(1, 2)))


def reshape(g: NetworkGraph, alpha: Union[Fraction, float, int, str] = 1, rho: Union[Fraction, float, int, str] = 1) -> NetworkGraph:
    """Scale every conv and hidden FC width by alpha and the input resolution by rho.
    The final classifier keeps its width.
    """
    alpha = as_fraction(alpha, "alpha")
    rho = as_fraction(rho, "rho")
    if alpha == 1 and rho == 1:
        return g

    output_id = g.output.id
    nodes = []
    for n in g.nodes:
        kind = n.kind
        if alpha != 1 and isinstance(kind, Conv2d):
            out = _scale_channels(kind.out_channels, alpha, n.id)
            groups = kind.groups
            if groups > 1 and groups == kind.out_channels:
                groups = out
            elif groups > 1:
                groups = _scale_channels(groups, alpha, n.id)
            kind = replace(kind, out_channels=out, groups=groups)
        elif alpha != 1 and isinstance(kind, FullyConnected) and n.id != output_id and n.role != "classifier":
            kind = replace(kind, out_features=_scale_channels(kind.out_features, alpha, n.id))
        nodes.append(replace(n, kind=kind, out_shape=None))

    shape = g.input_shape
    if rho != 1:
        h, w = (max(1, math.floor(d * rho)) for d in shape.spatial)
        if (shape.height * rho).denominator != 1 or (shape.width * rho).denominator != 1:
            logger.warning("input %s scaled by rho=%s is not integral, flooring", shape, rho)
        shape = replace(shape, height=h, width=w)

    scaled = g.evolve(nodes, step=f"reshape(alpha={alpha},rho={rho})", input_shape=shape)
    try:
        return infer_shapes(scaled)
    except GraphError as e:
        raise GraphError(f"reshape(alpha={alpha}, rho={rho}) collapses a dimension ({e})") from None


def apply_step(g: NetworkGraph, step: ReduceStep) -> NetworkGraph:
    """Cull, then thin, then reshape"""
    out = cull(g, step.culled)
    if step.thinned:
        out = thin(out, step.thinned, step.parity, step.single_block)
    out = reshape(out, step.alpha, step.rho)
    logger.info("%s: %s", g.name, step.label)
    return out
