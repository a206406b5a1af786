"""Nucleus, random and repetition-aware sampling over code distributions.

All draws come from a counter-based Philox stream so that a (seed, stream)
pair fully determines a decode. Every sampling call consumes exactly one
uniform variate; the repetition-aware fallback consumes one more.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PROB_TOL = 1e-5
# Absorbs float summation error when the cumulative mass should hit top_p exactly.
CUMSUM_SLACK = 1e-12


@dataclass(frozen=True)
class SamplingConfig:
    top_p: float = 0.0
    window: int = 10
    threshold: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.top_p <= 1.0:
            raise ValueError(f"top_p must be in [0, 1], got {self.top_p}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")


class RngStream:
    """Philox generator keyed by ``seed ^ stream``."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed ^ self.stream))

    def uniform(self) -> float:
        return float(self._gen.random())

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        return int(self._gen.integers(lo, hi))

    def split(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probabilities must be a non-empty vector")
    if not np.all(np.isfinite(p)) or p.min() < 0:
        raise ValueError("probabilities must be finite and non-negative")
    total = p.sum()
    if abs(total - 1.0) > PROB_TOL:
        raise ValueError(f"probabilities sum to {total}, not 1")
    return p / total


def _draw(p: np.ndarray, order: np.ndarray, u: float) -> int:
    cdf = np.cumsum(p[order])
    k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    k = min(k, order.size - 1)
    # skip zero-mass entries that searchsorted can land on at the boundary
    while p[order[k]] == 0.0 and k > 0:
        k -= 1
    return int(order[k])


def nucleus_support(probs, top_p: float) -> np.ndarray:
    """Token ids kept by top-p truncation, most probable first.

    Tokens are ordered by probability descending, then index ascending, and
    the minimal prefix whose mass reaches ``top_p`` is kept (never empty).
    """
    p = _check_probs(probs)
    order = np.lexsort((np.arange(p.size), -p))
    cdf = np.cumsum(p[order])
    k = int(np.searchsorted(cdf, top_p - CUMSUM_SLACK, side="left")) + 1
    return order[: min(max(k, 1), p.size)]


def nucleus_sample(probs, top_p: float, rng: RngStream) -> int:
    p = _check_probs(probs)
    keep = nucleus_support(p, top_p)
    return _draw(p, keep, rng.uniform())


def random_sample(probs, rng: RngStream) -> int:
    p = _check_probs(probs)
    return _draw(p, np.arange(p.size), rng.uniform())


def repetition_ratio(history: Sequence[int], window: int) -> float:
    """Matches of the last element against itself and its ``window`` predecessors, over ``window``.

    The self-match is counted, so the result lies in [1/window, (window+1)/window].
    """
    if len(history) == 0:
        raise ValueError("history must contain the candidate token")
    cand = history[-1]
    tail = history[-(window + 1):]
    return sum(1 for c in tail if c == cand) / window


def ras_sample(probs, history: Sequence[int], cfg: SamplingConfig, rng: RngStream) -> int:
    """Nucleus draw, replaced by a full-distribution draw when it repeats too often."""
    p = _check_probs(probs)
    token = _draw(p, nucleus_support(p, cfg.top_p), rng.uniform())
    window = list(history[-cfg.window:]) + [token]
    if repetition_ratio(window, cfg.window) > cfg.threshold:
        token = _draw(p, np.arange(p.size), rng.uniform())
    return token
