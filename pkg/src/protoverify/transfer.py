"""Aging rates, Arrhenius transferability scores, source weights and the
chain-of-degradation extrapolation."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SourceHorizonExhausted, WindowOutOfRange, ZeroSourceRate

AT_EPS = 1e-9
RATE_SMOOTHING = 5
DEFAULT_WINDOW = (100, 200, 50)


@dataclass(frozen=True)
class RateWindow:
    start: int = 100
    end: int = 200
    n: int = 50

    def __post_init__(self):
        if self.end <= self.start:
            raise WindowOutOfRange(f"window end {self.end} must exceed start {self.start}")
        if self.n < 1:
            raise WindowOutOfRange("window needs n >= 1")
        if self.start < 0:
            raise WindowOutOfRange("window start must be non-negative")

    @property
    def last(self) -> int:
        """Largest offset read from the series."""
        return self.end + self.n - 1

    @classmethod
    def fit(cls, available: int, start: int = 100, end: int = 200, n: int = 50) -> "RateWindow":
        """Scale the default window proportionally so it fits a series of
        ``available`` points (offsets 0..available-1)."""
        need = end + n
        if available >= need:
            return cls(start, end, n)
        scale = available / need
        s = int(math.floor(start * scale))
        e = int(math.floor(end * scale))
        m = max(1, available - e)
        if e <= s:
            raise WindowOutOfRange(f"{available} points are too few for a rate window")
        return cls(s, e, m)


def aging_rate(series: Sequence[float], start: int = 100, end: int = 200, n: int = 50) -> float:
    """Mean slope between the windows [start, start+n) and [end, end+n).

    ``series`` is indexed by offset (element k is cycle k of the series).
    The sum runs over n pairs i = 0..n-1 so a linear series returns its
    slope exactly.
    """
    f = np.asarray(series, float)
    w = RateWindow(start, end, n)
    if w.last >= len(f):
        raise WindowOutOfRange(f"window needs {w.last + 1} points, series has {len(f)}")
    return float(np.sum(f[end:end + n] - f[start:start + n]) / (n * (end - start)))


def aging_rates(matrix: np.ndarray, window: RateWindow) -> np.ndarray:
    """Column-wise aging rates of a (cycles x features) array."""
    m = np.asarray(matrix, float)
    if window.last >= len(m):
        raise WindowOutOfRange(f"window needs {window.last + 1} rows, have {len(m)}")
    s, e, n = window.start, window.end, window.n
    return (m[e:e + n] - m[s:s + n]).sum(axis=0) / (n * (e - s))


def at_score(r_source, r_target):
    """Rate ratio r_target / r_source (element-wise for arrays)."""
    rs = np.asarray(r_source, float)
    if np.any(rs == 0):
        raise ZeroSourceRate("source aging rate is zero")
    out = np.asarray(r_target, float) / rs
    return float(out) if out.ndim == 0 else out


def at_score_known_alpha(t_source: float, t_target: float, alpha: float) -> float:
    """exp((-1/T_s + 1/T_t) * alpha)."""
    if t_source <= 0 or t_target <= 0:
        raise ValueError("temperatures must be positive")
    return math.exp((-1.0 / t_source + 1.0 / t_target) * alpha)


def arrhenius_at_score(t_source: float, t_target: float, alpha: float) -> float:
    """Rate ratio implied by k ~ exp(-alpha/T), i.e. >1 for hotter targets."""
    return 1.0 / at_score_known_alpha(t_source, t_target, alpha)


def source_weights(at_scores: Sequence[float]) -> np.ndarray:
    """W_i = (|AT_i - 1| * sum_j 1/|AT_j - 1|)^-1. Sources with |AT - 1| below
    1e-9 share the full weight uniformly."""
    at = np.asarray(at_scores, float)
    if at.ndim != 1 or len(at) == 0:
        raise ValueError("need a non-empty 1-D sequence of AT scores")
    d = np.abs(at - 1.0)
    exact = d < AT_EPS
    if exact.any():
        return exact / exact.sum()
    inv = 1.0 / d
    return inv / inv.sum()


def source_weights_columns(at: np.ndarray) -> np.ndarray:
    """Weights per feature column for a (sources x features) AT array."""
    at = np.atleast_2d(np.asarray(at, float))
    return np.column_stack([source_weights(at[:, j]) for j in range(at.shape[1])])


@dataclass(frozen=True, eq=False)
class SourcePlan:
    temperature: float
    rates: np.ndarray
    at_score: np.ndarray
    weight: np.ndarray


@dataclass(frozen=True, eq=False)
class TransferPlan:
    sources: tuple[SourcePlan, ...]
    target_temperature: float
    window: RateWindow = field(default_factory=RateWindow)
    alpha: float | None = None

    def __post_init__(self):
        w = np.stack([np.atleast_1d(s.weight) for s in self.sources])
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=0) - 1.0) > 1e-12):
            raise ValueError("source weights must be non-negative and sum to 1")

    @property
    def coefficients(self) -> np.ndarray:
        """W_j * AT_j per source and feature."""
        return np.stack([np.atleast_1d(s.weight * s.at_score) for s in self.sources])

    def to_dict(self) -> dict:
        return {
            "target_temperature": self.target_temperature,
            "alpha": self.alpha,
            "window": {"start": self.window.start, "end": self.window.end, "n": self.window.n},
            "sources": [
                {"temperature": s.temperature,
                 "rates": np.atleast_1d(s.rates).tolist(),
                 "at_score": np.atleast_1d(s.at_score).tolist(),
                 "weight": np.atleast_1d(s.weight).tolist()}
                for s in self.sources
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_plan(source_rates: dict[float, np.ndarray], target_rates: np.ndarray | None,
               target_temperature: float, window: RateWindow | None = None,
               alpha: float | None = None) -> TransferPlan:
    """AT scores from measured target rates, or from ``alpha`` when target
    rates are None (rate-ratio convention, hotter target -> AT > 1)."""
    temps = sorted(source_rates)
    rates = np.stack([np.atleast_1d(np.asarray(source_rates[t], float)) for t in temps])
    if target_rates is None:
        if alpha is None:
            raise ValueError("need target rates or alpha")
        at = np.stack([np.full(rates.shape[1], arrhenius_at_score(t, target_temperature, alpha)) for t in temps])
    else:
        at = np.stack([np.atleast_1d(at_score(r, target_rates)) for r in rates])
    w = source_weights_columns(at)
    return TransferPlan(
        tuple(SourcePlan(t, rates[k], at[k], w[k]) for k, t in enumerate(temps)),
        target_temperature, window or RateWindow(), alpha,
    )


# ---------------------------------------------------------------------------
# per-cycle rates and the chain
# ---------------------------------------------------------------------------

def per_cycle_rates(series: np.ndarray, window: int = RATE_SMOOTHING) -> np.ndarray:
    """Per-cycle rate of a (cycles x features) array: centered moving mean
    followed by centered first differences (one-sided at the ends).
    Element k is the rate carrying cycle k to cycle k+1."""
    f = np.asarray(series, float)
    if f.ndim == 1:
        f = f[:, None]
    n = len(f)
    if n < 2:
        raise WindowOutOfRange("need at least 2 cycles for per-cycle rates")
    k = np.arange(n)
    # symmetric window that shrinks near the ends, so linear series keep their slope
    half = np.minimum(window // 2, np.minimum(k, n - 1 - k))
    c = np.cumsum(np.vstack([np.zeros((1, f.shape[1])), f]), axis=0)
    lo = k - half
    hi = k + half + 1
    smooth = (c[hi] - c[lo]) / (hi - lo)[:, None]
    return np.gradient(smooth, axis=0)


@dataclass(frozen=True, eq=False)
class SourceRates:
    """Per-cycle rates of one source, row k holding the rate from cycle
    ``first_cycle + k`` to the next."""

    temperature: float
    first_cycle: int
    rates: np.ndarray

    def at_cycles(self, cycles: np.ndarray) -> np.ndarray:
        k = np.asarray(cycles) - self.first_cycle
        if np.any(k < 0):
            raise WindowOutOfRange("requested cycles precede the source data")
        over = k >= len(self.rates)
        if over.any():
            warnings.warn(
                f"source at {self.temperature:.2f} K ends at cycle {self.first_cycle + len(self.rates) - 1}; "
                "holding its last rate", SourceHorizonExhausted, stacklevel=3)
        return self.rates[np.minimum(k, len(self.rates) - 1)]


def chain_extrapolate(f_seed: np.ndarray, sources: Sequence[SourceRates], plan: TransferPlan,
                      horizon: int, c0: int) -> np.ndarray:
    """Rows for cycles c0..c0+horizon: row 0 is the seed and each next row
    adds sum_j W_j * AT_j * r_j(c-1) per feature."""
    seed = np.atleast_1d(np.asarray(f_seed, float))
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if horizon == 0:
        return seed[None].copy()
    if len(sources) != len(plan.sources):
        raise ValueError("one rate series per plan source is required")
    coef = plan.coefficients
    cycles = np.arange(c0, c0 + horizon)
    steps = np.zeros((horizon, len(seed)))
    for j, src in enumerate(sources):
        steps += coef[j] * src.at_cycles(cycles)
    return np.vstack([seed, seed + np.cumsum(steps, axis=0)])


def chain_extrapolate_loop(f_seed: np.ndarray, sources: Sequence[SourceRates], plan: TransferPlan,
                           horizon: int, c0: int) -> np.ndarray:
    """Literal cycle-by-cycle recursion, kept as an independent reference."""
    rows = [np.atleast_1d(np.asarray(f_seed, float))]
    coef = plan.coefficients
    for c in range(c0 + 1, c0 + horizon + 1):
        nxt = rows[-1].copy()
        for j, src in enumerate(sources):
            nxt = nxt + coef[j] * src.at_cycles(np.array([c - 1]))[0]
        rows.append(nxt)
    return np.vstack(rows)
