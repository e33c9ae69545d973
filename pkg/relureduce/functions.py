"""relureduce/functions.py"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "pd_format",
    "separate_uarray",
    "parse_relu_count",
    "resolve_threads",
    "parallel_map",
    "atomic_write_bytes",
    "atomic_write_text",
    "write_csv",
    "read_csv_checked",
]

# std library
import io
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Optional, TypeVar, Union

# 3rd party
import numpy as np
import pandas as pd

# own
from .errors import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "RELUREDUCE_THREADS"


def pd_format(format_spec: str) -> Callable[[float], str]:
    """Float formatter for pandas.DataFrame.to_string."""
    return f"{{:{format_spec}}}".format


def separate_uarray(uarr: Iterable) -> tuple[np.ndarray, np.ndarray]:
    """Seperate an uncertainties.unumpy.uarray in n and s parts."""
    n = np.array([x.n for x in uarr])
    s = np.array([x.s for x in uarr])
    return n, s


def parse_relu_count(text: str) -> float:
    """ReLU count in thousands from '262144', '262.1K' or '262k'. Counts without
    the K suffix are whole ReLUs and must be integral.
    """
    raw = str(text).strip().replace(",", "").replace("_", "")
    scale = 1.0
    if raw[-1:] in ("K", "k"):
        raw, scale = raw[:-1], 1000.0
    try:
        count = float(raw) * scale
    except ValueError:
        raise ConfigError(f"not a ReLU count: {text!r}") from None
    if count < 0 or count != count or count == float("inf"):
        raise ConfigError(f"not a ReLU count: {text!r}")
    if scale == 1.0 and not count.is_integer():
        raise ConfigError(f"not a whole ReLU count: {text!r} (use the K suffix for thousands)")
    return count / 1000.0


def resolve_threads(flag: Optional[int] = None) -> int:
    """Worker count: explicit flag, then $RELUREDUCE_THREADS, then 1"""
    if flag is not None:
        value, source = flag, "--threads"
    elif os.environ.get(THREADS_ENV, "").strip():
        raw = os.environ[THREADS_ENV].strip()
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        source = THREADS_ENV
    else:
        return 1
    if value < 1:
        raise ConfigError(f"{source} must be >= 1, got {value}")
    return value


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map `fn` over `items` on a thread pool. Results keep the input order and
    the first exception raised by a job propagates.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """Write to a temporary file next to `path`, then rename it into place"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.debug("wrote %s (%d bytes)", path, len(data))
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(df: pd.DataFrame, path: Union[str, Path], comment: Optional[str] = None) -> Path:
    """Deterministic CSV without index and with "\\n" line endings. A `comment` line
    goes first, so read such files with `comment="#"`.
    """
    head = f"{comment}\n" if comment else ""
    return atomic_write_text(path, head + df.to_csv(index=False, lineterminator="\n"))


def read_csv_checked(source: Union[str, Path, io.StringIO], columns: Iterable[str]) -> pd.DataFrame:
    """Read a CSV as strings and insist on the given header columns"""
    columns = list(columns)
    if isinstance(source, (str, Path)) and not Path(source).is_file():
        raise ConfigError(f"no such file: {source}")
    try:
        df = pd.read_csv(source, dtype=str, keep_default_na=False, skipinitialspace=True, comment="#")
    except pd.errors.EmptyDataError:
        raise ConfigError(f"empty CSV {source}") from None
    except pd.errors.ParserError as e:
        raise ConfigError(f"malformed CSV {source}: {e}") from None
    df.columns = [str(c).strip() for c in df.columns]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ConfigError(f"CSV {source} lacks column(s) {missing}, expected {columns}")
    if df.empty:
        raise ConfigError(f"CSV {source} has a header but no rows")
    return df
