"""relureduce/config.py

Run configuration: a JSON document with the sections `arch`, `train`, `kd`, `pipeline`
and `io`, plus top-level `seed` and `threads`. Unknown keys are rejected everywhere.
The normalized configuration, dumped with sorted keys, is the run manifest; loading a
manifest reproduces it byte for byte.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "ArchSection",
    "KDSection",
    "PipelineSection",
    "IOSection",
    "RunConfig",
    "load_config",
]

# std library
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional, Union

# own
from .architectures import ArchitectureSpec
from .criticality import DEFAULT_W
from .data import DATASET_KINDS, DatasetDescriptor
from .engine import KDConfig, TrainConfig
from .errors import ConfigError
from .netir import TensorShape
from .passes import PARITIES, as_fraction
from .pipeline import DEFAULT_LADDER, PipelineConfig

logger = logging.getLogger(__name__)


def _from_dict(cls, d: Any, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"section {section!r}: {e}") from None


def _fraction_str(value: Any, name: str) -> str:
    return str(as_fraction(value, name))


@dataclass(frozen=True)
class ArchSection:
    family: str = "ResNet18"
    input: int = 32
    channels: int = 3
    num_classes: int = 100
    strip_residuals: bool = False
    alpha: str = "1"
    rho: str = "1"

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", ArchitectureSpec(self.family).canonical_family)
        object.__setattr__(self, "alpha", _fraction_str(self.alpha, "alpha"))
        object.__setattr__(self, "rho", _fraction_str(self.rho, "rho"))
        if self.input < 1 or self.channels < 1 or self.num_classes < 1:
            raise ConfigError("arch: input, channels and num_classes must be positive")

    def spec(self) -> ArchitectureSpec:
        return ArchitectureSpec(
            self.family,
            TensorShape(self.channels, self.input, self.input),
            self.num_classes,
            self.strip_residuals,
            Fraction(self.alpha),
            Fraction(self.rho),
        )


@dataclass(frozen=True)
class KDSection:
    enabled: bool = True
    temperature: float = 4.0
    hard_weight: float = 0.9

    def __post_init__(self) -> None:
        self.config()

    def config(self) -> KDConfig:
        return KDConfig(self.temperature, self.hard_weight)


@dataclass(frozen=True)
class PipelineSection:
    w: float = DEFAULT_W
    ladder: tuple = tuple((str(a), str(r)) for a, r in DEFAULT_LADDER)
    parity: str = "keep-odd"
    single_block: bool = False
    probe_without_kd: bool = False
    teacher_epochs: Optional[int] = None
    stages_override: Optional[tuple] = None
    keep_going: bool = False

    def __post_init__(self) -> None:
        try:
            ladder = tuple((_fraction_str(a, "alpha"), _fraction_str(r, "rho")) for a, r in self.ladder)
        except (TypeError, ValueError):
            raise ConfigError(f"pipeline.ladder must be a list of [alpha, rho] pairs, got {self.ladder!r}") from None
        object.__setattr__(self, "ladder", ladder)
        if self.stages_override is not None:
            object.__setattr__(self, "stages_override", tuple(sorted(set(self.stages_override))))
        if self.parity not in PARITIES:
            raise ConfigError(f"pipeline.parity must be one of {PARITIES}, got {self.parity!r}")
        if self.w < 0:
            raise ConfigError(f"pipeline.w must be non-negative, got {self.w}")


@dataclass(frozen=True)
class IOSection:
    dataset: str = "synthetic-blobs"
    dataset_path: str = ""
    train_size: Optional[int] = None
    test_size: Optional[int] = None
    noise: float = 1.0
    out_dir: str = "out"

    def __post_init__(self) -> None:
        if self.dataset not in DATASET_KINDS:
            raise ConfigError(f"io.dataset must be one of {DATASET_KINDS}, got {self.dataset!r}")


@dataclass(frozen=True)
class RunConfig:
    arch: ArchSection = field(default_factory=ArchSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    kd: KDSection = field(default_factory=KDSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    io: IOSection = field(default_factory=IOSection)
    seed: int = 0
    threads: Optional[int] = None

    def __post_init__(self) -> None:
        # the run seed is the single source of randomness
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    @classmethod
    def from_dict(cls, d: Any) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("a configuration must be a JSON object")
        sections = {"arch": ArchSection, "kd": KDSection, "pipeline": PipelineSection, "io": IOSection}
        unknown = set(d) - set(sections) - {"train", "seed", "threads"}
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        train = d.get("train", {})
        if isinstance(train, dict) and "seed" in train:
            raise ConfigError("the train section takes no seed, set the top-level seed instead")
        kwargs = {name: _from_dict(cls_, d[name], name) for name, cls_ in sections.items() if name in d}
        if "train" in d:
            kwargs["train"] = _from_dict(TrainConfig, train, "train")
        return cls(seed=int(d.get("seed", 0)), threads=d.get("threads"), **kwargs)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        del train["seed"]
        pipeline = asdict(self.pipeline)
        pipeline["ladder"] = [list(r) for r in self.pipeline.ladder]
        if self.pipeline.stages_override is not None:
            pipeline["stages_override"] = list(self.pipeline.stages_override)
        return {
            "arch": asdict(self.arch),
            "train": train,
            "kd": asdict(self.kd),
            "pipeline": pipeline,
            "io": asdict(self.io),
            "seed": self.seed,
            "threads": self.threads,
        }

    def manifest(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def override(self, **flags: Any) -> "RunConfig":
        """Copy with flag values applied. Section keys are passed as `section__key`,
        top-level keys by name; None leaves a value untouched.
        """
        d = self.to_dict()
        for key, value in flags.items():
            if value is None:
                continue
            section, _, name = key.partition("__")
            if not name:
                d[section] = value
            else:
                d[section][name] = value
        return RunConfig.from_dict(d)

    def check_paths(self) -> None:
        """Fail early on inputs that cannot be read"""
        if self.io.dataset != "synthetic-blobs":
            if not self.io.dataset_path or not Path(self.io.dataset_path).is_dir():
                raise ConfigError(f"dataset directory {self.io.dataset_path!r} does not exist")
        out = Path(self.io.out_dir)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"output path {out} exists and is not a directory")

    def dataset_descriptor(self) -> DatasetDescriptor:
        return DatasetDescriptor(
            kind=self.io.dataset,
            resolution=self.arch.input,
            classes=self.arch.num_classes,
            train_size=self.io.train_size,
            test_size=self.io.test_size,
            path=self.io.dataset_path,
            seed=self.seed,
            noise=self.io.noise,
        )

    def pipeline_config(self) -> PipelineConfig:
        p = self.pipeline
        return PipelineConfig(
            arch=self.arch.spec(),
            dataset=self.dataset_descriptor(),
            train=self.train,
            kd=self.kd.config(),
            w=p.w,
            ladder=tuple((Fraction(a), Fraction(r)) for a, r in p.ladder),
            parity=p.parity,
            single_block=p.single_block,
            use_kd=self.kd.enabled,
            probe_without_kd=p.probe_without_kd,
            teacher_epochs=p.teacher_epochs,
            stages_override=p.stages_override,
            keep_going=p.keep_going,
        )


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """RunConfig from a JSON file, the defaults for None"""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such config file: {p}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from None
    logger.debug("loaded config %s", p)
    return RunConfig.from_dict(d)
