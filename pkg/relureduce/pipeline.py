"""relureduce/pipeline.py

Search orchestration: train the Full-ReLU teacher, rank stage criticality, then
for each culling iteration emit the culled network, its thinned variant and the
thinned variant under every reshape rung, each retrained with distillation.
Also the Pareto frontier and accuracy per kilo-ReLU of the resulting points.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "DEFAULT_LADDER",
    "PARETO_COLUMNS",
    "CANDIDATE_COLUMNS",
    "CandidatePoint",
    "PipelineConfig",
    "PipelineRun",
    "acc_per_kilorelu",
    "dominates",
    "pareto_front",
    "check_override",
    "culling_plan",
    "candidate_steps",
    "execute_pipeline",
    "run_deepreduce",
    "points_from_csv",
    "candidates_frame",
    "pareto_frame",
]

# std library
import io
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

# 3rd party
import pandas as pd

# own
from .architectures import ArchitectureSpec, build_architecture
from .criticality import DEFAULT_W, CriticalityReport, criticality_scores, rank_stages, train_probes
from .data import Dataset, DatasetDescriptor, ingest_dataset
from .engine import KDConfig, TrainConfig, evaluate, init_model, train
from .errors import ConfigError, TrainingError
from .functions import parallel_map, parse_relu_count, read_csv_checked
from .latency import LatencyModel, default_latency_model, estimate_latency
from .netir import NetworkGraph, stage_view
from .passes import PARITIES, ReduceStep, apply_step, as_fraction
from .profiler import count_relus

logger = logging.getLogger(__name__)

# (alpha, rho) rungs applied on top of the thinned network
DEFAULT_LADDER = ((Fraction(1, 2), Fraction(1)), (Fraction(1), Fraction(1, 2)), (Fraction(1, 2), Fraction(1, 2)))
PARETO_COLUMNS = ["culled", "thinned", "alpha", "rho", "relus", "accuracy", "latency_s", "acc_per_kilorelu"]
CANDIDATE_COLUMNS = ["iteration", "variant"] + PARETO_COLUMNS + ["loss_initial", "loss_final", "pareto"]

_NA = ("", "NA", "N/A", "-", "nan")


@dataclass(frozen=True)
class CandidatePoint:
    """One reduced network with its measured accuracy (percent) and estimated latency"""

    step: ReduceStep
    relu_count: int
    accuracy: float
    latency_est: float
    iteration: int = 0
    variant: int = 0
    loss_initial: float = field(default=math.nan, compare=False)
    loss_final: float = field(default=math.nan, compare=False)

    @property
    def acc_per_kilorelu(self) -> float:
        return acc_per_kilorelu(self)

    @property
    def label(self) -> str:
        return self.step.label

    def as_row(self) -> dict:
        return {
            "culled": "+".join(sorted(self.step.culled)),
            "thinned": "+".join(s + ("*" if self.step.single_block else "") for s in sorted(self.step.thinned)),
            "alpha": float(self.step.alpha),
            "rho": float(self.step.rho),
            "relus": self.relu_count,
            "accuracy": round(self.accuracy, 4),
            "latency_s": round(self.latency_est, 4),
            "acc_per_kilorelu": round(self.acc_per_kilorelu, 6),
        }


def acc_per_kilorelu(point: CandidatePoint) -> float:
    """Accuracy divided by the ReLU count in thousands"""
    if point.relu_count <= 0:
        raise ConfigError(f"accuracy per kilo-ReLU undefined for {point.relu_count} ReLUs ({point.label})")
    return point.accuracy / (point.relu_count / 1000.0)


def dominates(a: CandidatePoint, b: CandidatePoint) -> bool:
    """`a` uses no more ReLUs and is no less accurate than `b`, and is strictly better in one"""
    no_worse = a.relu_count <= b.relu_count and a.accuracy >= b.accuracy
    better = a.relu_count < b.relu_count or a.accuracy > b.accuracy
    return no_worse and better


def pareto_front(points: Iterable[CandidatePoint]) -> list[CandidatePoint]:
    """Non-dominated points, by descending ReLU count"""
    points = list(points)
    front = [p for p in points if not any(dominates(q, p) for q in points)]
    return sorted(front, key=lambda p: (-p.relu_count, -p.accuracy, p.label))


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one reduction run depends on.

    Attributes:
    -> arch\t\tbase network
    -> dataset\t\twhere the samples come from (None: synthetic data matching arch)
    -> train\t\tschedule of every training run
    -> kd\t\tdistillation settings, the teacher is the trained baseline
    -> w\t\tcriticality exponent
    -> ladder\t\t(alpha, rho) rungs applied to the thinned network
    -> parity\t\twhich alternate ReLU layers thinning keeps
    -> single_block\talso emit one single-block thinning candidate per iteration
    -> use_kd\t\tretrain candidates (and score probes) with distillation
    -> probe_without_kd\talso train every probe without distillation
    -> teacher_epochs\tepochs of the baseline run (None: train.epochs)
    -> stages_override\tcull exactly these stages in a single iteration
    -> keep_going\tskip candidates whose training fails
    """

    arch: ArchitectureSpec
    dataset: Optional[DatasetDescriptor] = None
    train: TrainConfig = TrainConfig()
    kd: KDConfig = KDConfig()
    w: float = DEFAULT_W
    ladder: tuple[tuple[Fraction, Fraction], ...] = DEFAULT_LADDER
    parity: str = "keep-odd"
    single_block: bool = False
    use_kd: bool = True
    probe_without_kd: bool = False
    teacher_epochs: Optional[int] = None
    stages_override: Optional[tuple[str, ...]] = None
    keep_going: bool = False

    def __post_init__(self) -> None:
        if self.dataset is None:
            shape = self.arch.input_shape
            object.__setattr__(self, "dataset", DatasetDescriptor(resolution=shape.height, classes=self.arch.num_classes))
        ladder = []
        for rung in self.ladder:
            try:
                alpha, rho = rung
            except (TypeError, ValueError):
                raise ConfigError(f"ladder rungs are (alpha, rho) pairs, got {rung!r}") from None
            ladder.append((as_fraction(alpha, "alpha"), as_fraction(rho, "rho")))
        object.__setattr__(self, "ladder", tuple(ladder))
        if self.stages_override is not None:
            object.__setattr__(self, "stages_override", tuple(sorted(set(self.stages_override))))
        if self.parity not in PARITIES:
            raise ConfigError(f"parity must be one of {PARITIES}, got {self.parity!r}")
        if self.w < 0:
            raise ConfigError(f"w must be non-negative, got {self.w}")
        if self.teacher_epochs is not None and self.teacher_epochs < 0:
            raise ConfigError(f"teacher_epochs must be >= 0, got {self.teacher_epochs}")
        if self.arch.num_classes != self.dataset.classes:
            raise ConfigError(f"architecture has {self.arch.num_classes} classes but the dataset {self.dataset.classes}")

    @property
    def candidates_per_iteration(self) -> int:
        return 2 + len(self.ladder) + int(self.single_block)


@dataclass
class PipelineRun:
    """Everything a run produced, candidates in emission order"""

    graph: NetworkGraph
    criticality: CriticalityReport
    candidates: list[CandidatePoint]
    teacher_accuracy: float = math.nan
    histories: dict[str, pd.DataFrame] = field(default_factory=dict, repr=False)

    @property
    def pareto(self) -> list[CandidatePoint]:
        return pareto_front(self.candidates)


def check_override(g: NetworkGraph, override: Sequence[str]) -> set[str]:
    """Stages of a culling override, refusing unknown ids and the full stage set"""
    stage_ids = stage_view(g).stage_ids
    chosen = set(override)
    unknown = chosen - set(stage_ids)
    if unknown:
        raise ConfigError(f"unknown stage id(s) in stages override: {sorted(unknown)}")
    if not chosen:
        raise ConfigError("stages override is empty")
    if chosen == set(stage_ids):
        raise ConfigError(f"refusing to cull every stage of {g.name}")
    return chosen


def culling_plan(g: NetworkGraph, report: CriticalityReport, override: Optional[Sequence[str]] = None) -> list[frozenset[str]]:
    """Stage sets culled in each iteration: the i least critical stages for i in 1..D-1,
    or the override as a single iteration. The most critical stage is never culled.
    """
    stage_ids = stage_view(g).stage_ids
    if set(report.order) != set(stage_ids):
        raise ConfigError(f"criticality covers {sorted(report.order)} but {g.name} has stages {stage_ids}")
    if override is None:
        order = rank_stages(report)
        return [frozenset(order[:i]) for i in range(1, len(order))]

    chosen = check_override(g, override)
    if report.never_cull in chosen:
        raise ConfigError(f"refusing to cull {report.never_cull}, the most critical stage")
    return [frozenset(chosen)]


def candidate_steps(
    g: NetworkGraph,
    plan: Iterable[frozenset[str]],
    ladder: Sequence[tuple[Fraction, Fraction]] = DEFAULT_LADDER,
    parity: str = "keep-odd",
    single_block: bool = False,
) -> list[list[ReduceStep]]:
    """Per iteration: culled, culled+thinned, then culled+thinned on every ladder rung.
    Every stage not culled is thinned. With `single_block` a last candidate thins
    down to the last block of each stage, on the smallest rung.
    """
    stage_ids = stage_view(g).stage_ids
    grid = []
    for culled in plan:
        rest = frozenset(stage_ids) - culled
        steps = [ReduceStep(culled), ReduceStep(culled, rest, parity)]
        steps += [ReduceStep(culled, rest, parity, alpha, rho) for alpha, rho in ladder]
        if single_block and rest:
            alpha, rho = ladder[-1] if ladder else (1, 1)
            steps.append(ReduceStep(culled, rest, parity, alpha, rho, single_block=True))
        grid.append(steps)
    return grid


def _load_data(cfg: PipelineConfig, train_set: Optional[Dataset], test_set: Optional[Dataset]) -> tuple[Dataset, Dataset]:
    if train_set is None or test_set is None:
        train_set, test_set = ingest_dataset(cfg.dataset)
    if train_set.num_classes != cfg.arch.num_classes:
        raise ConfigError(f"dataset has {train_set.num_classes} classes, the architecture {cfg.arch.num_classes}")
    return train_set, test_set


def execute_pipeline(
    cfg: PipelineConfig,
    train_set: Optional[Dataset] = None,
    test_set: Optional[Dataset] = None,
    criticality: Optional[CriticalityReport] = None,
    latency_model: Optional[LatencyModel] = None,
    threads: int = 1,
    progress: bool = False,
) -> PipelineRun:
    """Run the whole reduction search. A given `criticality` report skips the probe training.
    Candidates of one iteration train concurrently on `threads` workers.
    """
    g = build_architecture(cfg.arch)
    # refuse a bad override before anything is trained
    if cfg.stages_override is not None:
        check_override(g, cfg.stages_override)
        if criticality is not None:
            culling_plan(g, criticality, cfg.stages_override)
    train_set, test_set = _load_data(cfg, train_set, test_set)
    latency_model = latency_model or default_latency_model()
    histories: dict[str, pd.DataFrame] = {}

    teacher_cfg = cfg.train if cfg.teacher_epochs is None else replace(cfg.train, epochs=cfg.teacher_epochs)
    teacher = init_model(g, seed=cfg.train.seed)
    _, histories["teacher"] = train(teacher, train_set, teacher_cfg, progress=progress, label="teacher")
    teacher_acc = 100.0 * evaluate(teacher, test_set)
    logger.info("teacher %s: %.2f%% with %d ReLUs", g.name, teacher_acc, count_relus(g).total)
    kd = replace(cfg.kd, teacher=teacher) if cfg.use_kd else None

    if criticality is None:
        measurements = train_probes(
            g, train_set, test_set, cfg.train, kd, without_kd=cfg.probe_without_kd or not cfg.use_kd, threads=threads, progress=progress
        )
        criticality = criticality_scores(measurements, cfg.w, use_kd=cfg.use_kd)
    logger.info("%s", criticality)

    plan = culling_plan(g, criticality, cfg.stages_override)
    grid = candidate_steps(g, plan, cfg.ladder, cfg.parity, cfg.single_block)

    def run(job: tuple[int, int, ReduceStep]) -> Optional[tuple[CandidatePoint, pd.DataFrame]]:
        iteration, variant, step = job
        reduced = apply_step(g, step)
        relus = count_relus(reduced).total
        seed = cfg.train.seed + 1000 * iteration + variant + 1
        model = init_model(reduced, seed=seed)
        job_kd = replace(kd, teacher=teacher.copy()) if kd is not None else None
        try:
            _, history = train(model, train_set, replace(cfg.train, seed=seed), job_kd, progress=progress, label=step.label)
        except TrainingError as e:
            if not cfg.keep_going:
                raise
            logger.error("skipping %s: %s", step.label, e)
            return None
        acc = 100.0 * evaluate(model, test_set)
        point = CandidatePoint(
            step,
            relus,
            acc,
            estimate_latency(latency_model, relus),
            iteration,
            variant,
            float(history["train_loss"].iloc[0]),
            float(history["train_loss"].iloc[-1]),
        )
        logger.info("candidate %d.%d %s: %d ReLUs, %.2f%%", iteration, variant, step.label, relus, acc)
        return point, history

    candidates: list[CandidatePoint] = []
    for iteration, steps in enumerate(grid, start=1):
        jobs = [(iteration, variant, step) for variant, step in enumerate(steps)]
        for result in parallel_map(run, jobs, threads):
            if result is not None:
                candidates.append(result[0])
                histories[result[0].label] = result[1]

    return PipelineRun(g, criticality, candidates, teacher_acc, histories)


def run_deepreduce(cfg: PipelineConfig, **kwargs) -> list[CandidatePoint]:
    """Candidates of a full run, see `execute_pipeline` for the keyword arguments"""
    return execute_pipeline(cfg, **kwargs).candidates


def _stages_cell(text: str) -> frozenset[str]:
    raw = str(text).strip()
    if raw in _NA:
        return frozenset()
    return frozenset(s.strip().rstrip("*") for s in raw.replace(",", "+").split("+") if s.strip())


def _starred(text: str) -> bool:
    return "*" in str(text)


def _scale_cell(text: str, name: str) -> Fraction:
    raw = str(text).strip().rstrip("x×")
    return Fraction(1) if raw in _NA else as_fraction(float(raw), name)


def points_from_csv(
    source: Union[str, Path, io.StringIO],
    g: Optional[NetworkGraph] = None,
    latency_model: Optional[LatencyModel] = None,
) -> list[CandidatePoint]:
    """Candidate points with externally measured accuracies, from a CSV with the
    `culled,thinned,alpha,rho,relus,accuracy` columns (`latency_s` optional).
    Missing ReLU counts are computed on `g`, missing latencies estimated.
    """
    df = read_csv_checked(source, ["culled", "thinned", "alpha", "rho", "relus", "accuracy"])
    latency_model = latency_model or default_latency_model()
    points = []
    for i, row in enumerate(df.to_dict("records"), start=1):
        try:
            step = ReduceStep(
                _stages_cell(row["culled"]),
                _stages_cell(row["thinned"]),
                alpha=_scale_cell(row["alpha"], "alpha"),
                rho=_scale_cell(row["rho"], "rho"),
                single_block=_starred(row["thinned"]),
            )
            if str(row["relus"]).strip() in _NA:
                if g is None:
                    raise ConfigError("no ReLU count and no architecture to compute it on")
                relus = count_relus(apply_step(g, step)).total
            else:
                relus = int(round(parse_relu_count(row["relus"]) * 1000))
            accuracy = float(row["accuracy"])
            latency = row.get("latency_s", "")
            latency = estimate_latency(latency_model, relus) if str(latency).strip() in _NA else float(latency)
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"row {i}: {e}") from None
        points.append(CandidatePoint(step, relus, accuracy, latency, variant=i - 1))
    logger.info("read %d candidate point(s) from %s", len(points), source)
    return points


def pareto_frame(points: Iterable[CandidatePoint]) -> pd.DataFrame:
    return pd.DataFrame([p.as_row() for p in pareto_front(points)], columns=PARETO_COLUMNS)


def candidates_frame(points: Sequence[CandidatePoint]) -> pd.DataFrame:
    """Every candidate in emission order with a flag marking the Pareto points"""
    front = {id(p) for p in pareto_front(points)}
    rows = []
    for p in points:
        row = {"iteration": p.iteration, "variant": p.variant, **p.as_row()}
        row.update(
            loss_initial=round(p.loss_initial, 6),
            loss_final=round(p.loss_final, 6),
            pareto=id(p) in front,
        )
        rows.append(row)
    return pd.DataFrame(rows, columns=CANDIDATE_COLUMNS)
