"""Temperature / top-k / top-p sampling with deterministic tie-breaking."""

from __future__ import annotations

import numpy as np

from .errors import ParamError


def check_sampling_params(top_k: int, top_p: float, temperature: float) -> None:
    if not top_k >= 1:
        raise ParamError(f"top_k must be >= 1, got {top_k}")
    if not 0.0 < top_p <= 1.0:
        raise ParamError(f"top_p must lie in (0, 1], got {top_p}")
    if not temperature > 0.0:
        raise ParamError(f"temperature must be > 0, got {temperature}")


def truncated_distribution(logits, top_k: int, top_p: float, temperature: float):
    """Return (kept ids, renormalized probabilities) in sampling order.

    Candidates are ranked by descending logit, ties broken by ascending id.
    Top-k is applied first, then the smallest prefix whose mass reaches top_p.
    """
    check_sampling_params(top_k, top_p, temperature)
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ParamError("logits must be finite")
    ids = np.arange(logits.size)
    order = np.lexsort((ids, -logits))[:top_k]
    scaled = logits[order] / temperature
    p = np.exp(scaled - scaled[0])
    p /= p.sum()
    if top_p < 1.0:
        cut = int(np.searchsorted(np.cumsum(p), top_p, side="left")) + 1
        order, p = order[:cut], p[:cut]
        p = p / p.sum()
    return order, p


def sample_token(logits, top_k: int, top_p: float, temperature: float, rng: np.random.Generator) -> int:
    order, p = truncated_distribution(logits, top_k, top_p, temperature)
    if order.size == 1:
        rng.random()  # keep the stream aligned regardless of truncation
        return int(order[0])
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return int(order[min(idx, order.size - 1)])
