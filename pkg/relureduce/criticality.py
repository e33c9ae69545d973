"""relureduce/criticality.py

Stage criticality. A probe network keeps the ReLUs of exactly one stage; its accuracy
gain over the weakest probe, discounted by its ReLU count in thousands to the power w,
is the stage's criticality score:

    C_k = (acc_k - min_i acc_i) / kilo_relus_k ** w

Stages with low scores are culled first; the highest-scoring stage is never culled.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "DEFAULT_W",
    "MEASUREMENT_COLUMNS",
    "StageMeasurement",
    "CriticalityReport",
    "probe_networks",
    "criticality_scores",
    "rank_stages",
    "read_measurements_csv",
    "train_probes",
]

# std library
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Union

# 3rd party
import pandas as pd

# own
from .data import Dataset
from .engine import KDConfig, TrainConfig, evaluate, init_model, train
from .errors import ConfigError
from .functions import parallel_map, parse_relu_count, read_csv_checked
from .netir import NetworkGraph, stage_view
from .passes import cull
from .profiler import count_relus

logger = logging.getLogger(__name__)

DEFAULT_W = 0.07
MEASUREMENT_COLUMNS = ["stage", "relus", "acc_wo_kd", "acc_w_kd"]


def _check_accuracy(value: Optional[float], what: str, stage_id: str) -> None:
    if value is not None and not 0 <= value <= 100:
        raise ConfigError(f"{stage_id}: {what} must be a percentage in [0, 100], got {value}")


@dataclass(frozen=True)
class StageMeasurement:
    """Accuracies of the probe that keeps only `stage_id`'s ReLUs"""

    stage_id: str
    relu_count_kilo: float
    acc_with_kd: Optional[float] = None
    acc_without_kd: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.relu_count_kilo > 0:
            raise ConfigError(f"{self.stage_id}: ReLU count must be positive, got {self.relu_count_kilo}K")
        _check_accuracy(self.acc_with_kd, "accuracy with KD", self.stage_id)
        _check_accuracy(self.acc_without_kd, "accuracy without KD", self.stage_id)


@dataclass(frozen=True)
class CriticalityReport:
    """Scores in measurement order, `order` from least to most critical"""

    w: float
    scores: tuple[tuple[str, float], ...]
    order: tuple[str, ...]
    use_kd: bool = True
    measurements: tuple[StageMeasurement, ...] = field(default=(), compare=False)

    @property
    def never_cull(self) -> str:
        return self.order[-1]

    def score(self, stage_id: str) -> float:
        try:
            return dict(self.scores)[stage_id]
        except KeyError:
            raise ConfigError(f"no criticality score for stage {stage_id!r}") from None

    def to_frame(self) -> pd.DataFrame:
        rank = {sid: i for i, sid in enumerate(self.order)}
        rows = [
            (
                m.stage_id,
                int(round(m.relu_count_kilo * 1000)),
                m.acc_without_kd,
                m.acc_with_kd,
                round(self.score(m.stage_id), 6),
                rank[m.stage_id],
                m.stage_id == self.never_cull,
            )
            for m in self.measurements
        ]
        return pd.DataFrame(rows, columns=MEASUREMENT_COLUMNS + ["c_k", "rank", "never_cull"])

    def __str__(self) -> str:
        scores = ", ".join(f"{s}={c:.2f}" for s, c in self.scores)
        return f"criticality (w={self.w}, {'with' if self.use_kd else 'without'} KD): {' < '.join(self.order)}\n{scores}"


def probe_networks(g: NetworkGraph) -> list[NetworkGraph]:
    """One graph per stage, with the ReLUs of every other stage and of Conv1 culled.
    Classifier ReLUs (VGG's hidden FC layers) stay in every probe.
    """
    view = stage_view(g)
    probes = []
    for sid in view.stage_ids:
        others = [s for s in view.stage_ids if s != sid]
        probe = cull(g, others).evolve(name=f"{g.name}-probe-{sid}")
        logger.debug("probe %s: %d ReLUs", sid, count_relus(probe).total)
        probes.append(probe)
    return probes


def criticality_scores(
    measurements: Iterable[StageMeasurement],
    w: float = DEFAULT_W,
    use_kd: bool = True,
) -> CriticalityReport:
    """Score every measured stage. With `use_kd=False` the accuracies without
    distillation are used instead.
    """
    measurements = tuple(measurements)
    if len(measurements) < 2:
        raise ConfigError(f"criticality needs at least two stage measurements, got {len(measurements)}")
    ids = [m.stage_id for m in measurements]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate stage ids in measurements: {ids}")
    if w < 0:
        raise ConfigError(f"w must be non-negative, got {w}")

    accs = []
    for m in measurements:
        acc = m.acc_with_kd if use_kd else m.acc_without_kd
        if acc is None or math.isnan(acc):
            raise ConfigError(f"{m.stage_id}: missing accuracy {'with' if use_kd else 'without'} KD")
        accs.append(acc)

    lowest = min(accs)
    scores = tuple((m.stage_id, (acc - lowest) / m.relu_count_kilo**w) for m, acc in zip(measurements, accs))
    # ties: the stage with more ReLUs counts as less critical
    ranked = sorted(zip(measurements, scores), key=lambda ms: (ms[1][1], -ms[0].relu_count_kilo, ms[0].stage_id))
    order = tuple(m.stage_id for m, _ in ranked)
    logger.info("criticality order %s", " < ".join(order))
    return CriticalityReport(w, scores, order, use_kd, measurements)


def rank_stages(report: CriticalityReport) -> list[str]:
    """Stage ids from least to most critical; the last one is never culled"""
    return list(report.order)


def _optional_percent(text: str, row: int, column: str) -> Optional[float]:
    raw = str(text).strip().rstrip("%")
    if raw in ("", "-", "NA", "nan"):
        return None
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"row {row}: {column} is not a number: {text!r}") from None


def read_measurements_csv(source: Union[str, Path, io.StringIO]) -> list[StageMeasurement]:
    """Stage measurements from a `stage,relus,acc_wo_kd,acc_w_kd` CSV"""
    df = read_csv_checked(source, MEASUREMENT_COLUMNS)
    out = []
    for i, row in enumerate(df.itertuples(index=False), start=1):
        stage = str(row.stage).strip()
        if not stage:
            raise ConfigError(f"row {i}: empty stage id")
        try:
            kilo = parse_relu_count(row.relus)
        except ConfigError as e:
            raise ConfigError(f"row {i}: {e}") from None
        out.append(
            StageMeasurement(
                stage,
                kilo,
                acc_with_kd=_optional_percent(row.acc_w_kd, i, "acc_w_kd"),
                acc_without_kd=_optional_percent(row.acc_wo_kd, i, "acc_wo_kd"),
            )
        )
    logger.info("read %d stage measurement(s) from %s", len(out), source)
    return out


def train_probes(
    g: NetworkGraph,
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig,
    kd: Optional[KDConfig] = None,
    without_kd: bool = True,
    threads: int = 1,
    progress: bool = False,
) -> list[StageMeasurement]:
    """Train every probe of `g` and measure its test accuracy in percent.
    With a teacher-bearing `kd`, each probe is trained with distillation; with
    `without_kd` it is trained once more from the same initialization without.
    """
    probes = probe_networks(g)
    view = stage_view(g)
    modes = (["kd"] if kd is not None else []) + (["plain"] if without_kd else [])
    jobs = [(k, sid, probe, mode) for k, (sid, probe) in enumerate(zip(view.stage_ids, probes)) for mode in modes]
    if not jobs:
        raise ConfigError("nothing to train: distillation disabled and without_kd=False")

    def run(job: tuple[int, str, NetworkGraph, str]) -> tuple[str, str, float]:
        k, sid, probe, mode = job
        label = f"probe {sid} ({mode})"
        model = init_model(probe, seed=cfg.seed + k)
        # each job distills from its own teacher copy, forward passes record a tape on the model
        job_kd = replace(kd, teacher=kd.teacher.copy()) if mode == "kd" and kd is not None and kd.teacher is not None else None
        if mode == "kd" and job_kd is None:
            raise ConfigError("distillation requested without a teacher model")
        train(model, train_set, replace(cfg, seed=cfg.seed + k), job_kd, progress=progress, label=label)
        acc = 100.0 * evaluate(model, test_set)
        logger.info("%s: %.2f%%", label, acc)
        return sid, mode, acc

    accs = {(sid, mode): acc for sid, mode, acc in parallel_map(run, jobs, threads)}
    return [
        StageMeasurement(
            sid,
            count_relus(probe).total / 1000.0,
            acc_with_kd=accs.get((sid, "kd")),
            acc_without_kd=accs.get((sid, "plain")),
        )
        for sid, probe in zip(view.stage_ids, probes)
    ]
