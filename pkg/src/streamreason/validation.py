"""Input checks shared by the estimator facade and the command line."""

from __future__ import annotations

import numbers
from os import PathLike
from pathlib import Path
from typing import Iterable

from sklearn.utils.validation import check_scalar

from .core import StreamScript, load_stream_script
from .errors import ConfigError


def check_scripts(X) -> list[StreamScript]:
    """Accept one script, a path, or an iterable of either; return a non-empty list of scripts."""
    if isinstance(X, (StreamScript, str, PathLike)):
        X = [X]
    if not isinstance(X, Iterable):
        raise ConfigError(f"expected stream scripts or paths, got {type(X).__name__}")
    out = []
    for item in X:
        if isinstance(item, StreamScript):
            out.append(item)
        elif isinstance(item, (str, PathLike)):
            out.append(load_stream_script(Path(item)))
        else:
            raise ConfigError(f"expected a StreamScript or a path, got {type(item).__name__}")
    if not out:
        raise ConfigError("no stream scripts given")
    return out


def check_positive_int(value, name: str, min_val: int = 1) -> int:
    try:
        check_scalar(value, name, numbers.Integral, min_val=min_val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return int(value)


def check_unit_interval(value, name: str, include_zero: bool = False) -> float:
    try:
        check_scalar(value, name, numbers.Real, min_val=0.0, max_val=1.0,
                     include_boundaries="both" if include_zero else "right")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return float(value)


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)
