"""relureduce/latency.py

Linear private-inference latency model: seconds = slope * kilo-ReLUs + intercept.
Linear layers are treated as free, so ReLU count is the only regressor.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "WEIGHTINGS",
    "CIFAR100_RESNET18_POINTS",
    "TINYIMAGENET_RESNET18_POINTS",
    "LatencyModel",
    "fit_latency_model",
    "estimate_latency",
    "default_latency_model",
    "read_latency_points",
]

# std library
import io
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Union

# 3rd party
import numpy as np
import pandas as pd
from uncertainties import correlated_values
from uncertainties.unumpy import uarray

# own
from .errors import ConfigError
from .functions import parse_relu_count, read_csv_checked, separate_uarray

logger = logging.getLogger(__name__)

WEIGHTINGS = ("ols", "relative")

# (kilo-ReLUs, seconds) of ReLU-reduced ResNet18 networks
CIFAR100_RESNET18_POINTS = (
    (229.38, 4.61),
    (196.61, 3.94),
    (114.69, 2.38),
    (57.34, 1.37),
    (49.15, 1.19),
    (28.67, 0.74),
    (24.57, 0.56),
    (14.33, 0.52),
    (12.28, 0.45),
    (7.17, 0.21),
)
TINYIMAGENET_RESNET18_POINTS = (
    (917.52, 17.16),
    (458.76, 8.87),
    (393.24, 7.77),
    (229.38, 4.61),
    (196.62, 4.16),
    (114.69, 2.47),
    (98.31, 2.64),
    (57.35, 1.85),
    (49.16, 1.325),
    (28.67, 0.678),
    (24.58, 0.579),
    (12.29, 0.455),
)


@dataclass(frozen=True)
class LatencyModel:
    """A fitted latency line.

    Attributes:
    -> slope\tseconds per kilo-ReLU
    -> intercept\tseconds at zero ReLUs (never negative)
    -> r_squared\tcoefficient of determination of the fit points, in [0, 1]
    -> fit_points\t(kilo-ReLU, seconds) pairs the line was fitted on
    -> weighting\t"ols" or "relative" (residuals weighted by 1/seconds)
    -> covariance\t2x2 covariance of (slope, intercept)

    Properties:
    -> p\tnominal parameters
    -> u\tstandard errors of the parameters
    -> pu\tcorrelated ufloats of the parameters
    -> df\tpandas.DataFrame with parameter names, nominal values and uncertainties
    """

    slope: float
    intercept: float
    r_squared: float
    fit_points: tuple[tuple[float, float], ...] = ()
    weighting: str = "ols"
    covariance: tuple[tuple[float, float], tuple[float, float]] = field(default=((0.0, 0.0), (0.0, 0.0)), compare=False)

    _p_names = ("slope", "intercept")

    def __call__(self, kilo_relus):
        """Estimated seconds for ReLU counts given in thousands"""
        return np.maximum(0.0, self.slope * np.asarray(kilo_relus, dtype=float) + self.intercept)

    def __len__(self) -> int:
        return len(self.fit_points)

    @property
    def p(self) -> np.ndarray:
        return np.array([self.slope, self.intercept])

    @property
    def u(self) -> np.ndarray:
        return np.sqrt(np.diag(np.array(self.covariance)))

    @property
    def pu(self) -> tuple:
        cov = np.array(self.covariance)
        if not cov.any():
            return tuple(uarray(self.p, self.u))
        return tuple(correlated_values(self.p, cov))

    @property
    def df(self) -> pd.DataFrame:
        n, s = separate_uarray(self.pu)
        return pd.DataFrame({"n": n, "s": s}, index=self._p_names)  # type: ignore

    def predict_u(self, kilo_relus: float):
        """Estimate with the propagated fit uncertainty, as a ufloat"""
        slope, intercept = self.pu
        return slope * kilo_relus + intercept

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "weighting": self.weighting,
            "fit_points": [list(p) for p in self.fit_points],
        }

    def __str__(self) -> str:
        precise_df = pd.DataFrame({"n": self.p, "s": self.u}, index=self._p_names)  # type: ignore
        return f"Latency fit ({self.weighting}, R^2={self.r_squared:.4f}):\n\nufloats:\n{self.df}\n\nprecisely:\n{precise_df}"

    def __repr__(self) -> str:
        return f"<LatencyModel(slope={self.slope:.6g}, intercept={self.intercept:.6g}, n={len(self)})>"


def _weighted_line(x: np.ndarray, y: np.ndarray, wt: np.ndarray, through_origin: bool) -> tuple[float, float]:
    if through_origin:
        return float((wt * x * y).sum() / (wt * x * x).sum()), 0.0
    xm = (wt * x).sum() / wt.sum()
    ym = (wt * y).sum() / wt.sum()
    sxx = (wt * (x - xm) ** 2).sum()
    slope = (wt * (x - xm) * (y - ym)).sum() / sxx
    return float(slope), float(ym - slope * xm)


def fit_latency_model(points: Iterable[tuple[float, float]], weighting: str = "ols") -> LatencyModel:
    """Least-squares line through (kilo-ReLU, seconds) points.

    "relative" weights each squared residual by 1/seconds**2, so small networks are
    fitted as tightly as large ones. A negative intercept is clamped by refitting
    the line through the origin.
    """
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    pts = tuple((float(a), float(b)) for a, b in points)
    if len(pts) < 2:
        raise ConfigError(f"a latency fit needs at least two points, got {len(pts)}")
    x, y = np.array(pts).T
    if np.ptp(x) == 0:
        raise ConfigError(f"degenerate latency fit: every point has {x[0]} kilo-ReLUs")
    if weighting == "relative" and (y <= 0).any():
        raise ConfigError("relative weighting needs positive latencies")
    wt = np.ones_like(x) if weighting == "ols" else 1.0 / y**2

    slope, intercept = _weighted_line(x, y, wt, through_origin=False)
    clamped = intercept < 0
    if clamped:
        logger.warning("latency fit intercept %.4g < 0, refitting through the origin", intercept)
        slope, intercept = _weighted_line(x, y, wt, through_origin=True)

    fitted = slope * x + intercept
    ss_res = float(((y - fitted) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))

    # parameter covariance: scaled inverse of the weighted normal matrix
    dof = len(x) - (1 if clamped else 2)
    cov = np.zeros((2, 2))
    if dof > 0:
        sigma2 = float((wt * (y - fitted) ** 2).sum()) / dof
        if clamped:
            cov[0, 0] = sigma2 / float((wt * x * x).sum())
        else:
            design = np.column_stack([x, np.ones_like(x)])
            cov = sigma2 * np.linalg.inv(design.T @ (wt[:, None] * design))

    model = LatencyModel(slope, intercept, r2, pts, weighting, tuple(map(tuple, cov.tolist())))  # type: ignore
    logger.info("latency fit over %d points: %r, R^2=%.4f", len(pts), model, r2)
    return model


def estimate_latency(model: LatencyModel, relu_count: float) -> float:
    """Seconds for a network with `relu_count` ReLUs (a raw count, not thousands)"""
    return float(model(relu_count / 1000.0))


@lru_cache(maxsize=None)
def default_latency_model() -> LatencyModel:
    """Fitted on the bundled CIFAR-100 ResNet18 points, relative residuals"""
    return fit_latency_model(CIFAR100_RESNET18_POINTS, weighting="relative")


def read_latency_points(source: Union[str, Path, io.StringIO]) -> list[tuple[float, float]]:
    """(kilo-ReLU, seconds) points from a CSV with `relus` and `latency_s` columns.
    `relus` is a raw count or carries a K suffix.
    """
    df = read_csv_checked(source, ["relus", "latency_s"])
    points = []
    for i, row in enumerate(df.itertuples(index=False), start=1):
        try:
            points.append((parse_relu_count(row.relus), float(row.latency_s)))
        except (ConfigError, ValueError):
            raise ConfigError(f"row {i}: malformed latency point ({row.relus!r}, {row.latency_s!r})") from None
    return points
