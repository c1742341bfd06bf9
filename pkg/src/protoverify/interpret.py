"""Windowed SAGE importance, loss-type dominance, Wasserstein window traces
and Arrhenius diagnostics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import AllZeroImportance, EmptySample, EmptyWindow, NonPositiveRate, TooFewCycles, TooFewSamples

EXACT_MAX_FEATURES = 10
SAGE_WINDOW = 20

THERMODYNAMIC = ("Q1", "Q9")
KINETIC = tuple(f"Q{k}" for k in range(2, 9))
CONCENTRATION = ("VD9", "ReVD")
OTHER_POLARIZATION = ("VC89", "ReVC")

Predictor = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# SAGE
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SageResult:
    values: np.ndarray
    std_errors: np.ndarray
    exact: bool
    permutations: int
    base_loss: float
    full_loss: float


def _as_predictor(model) -> Predictor:
    if callable(model) and not hasattr(model, "forward"):
        return model
    return lambda x: np.asarray(model.forward(x)).reshape(len(x), -1)[:, 0]


def _masked_losses(f: Predictor, x: np.ndarray, y: np.ndarray, masks: np.ndarray, fill: np.ndarray,
                   chunk_rows: int = 200_000) -> np.ndarray:
    """Mean squared error for each feature mask (True = feature known);
    unknown features take the window mean."""
    n = len(x)
    per = max(1, chunk_rows // n)
    out = np.empty(len(masks))
    for s in range(0, len(masks), per):
        m = masks[s:s + per]
        stacked = np.where(m[:, None, :], x[None], fill[None, None, :]).reshape(-1, x.shape[1])
        pred = np.asarray(f(stacked)).reshape(len(m), n)
        out[s:s + per] = np.mean((pred - y[None]) ** 2, axis=1)
    return out


def _sage_exact(f, x, y, fill):
    d = x.shape[1]
    masks = ((np.arange(2 ** d)[:, None] >> np.arange(d)[None]) & 1).astype(bool)
    losses = _masked_losses(f, x, y, masks, fill)
    size = masks.sum(axis=1)
    fact = [math.factorial(k) for k in range(d + 1)]
    phi = np.zeros(d)
    index = masks @ (1 << np.arange(d))
    for j in range(d):
        without = ~masks[:, j]
        s = index[without]
        w = np.array([fact[k] * fact[d - k - 1] for k in size[without]]) / fact[d]
        # adding j lowers the loss; SAGE value is the loss reduction
        phi[j] = np.sum(w * (losses[s] - losses[s | (1 << j)]))
    return phi, np.zeros(d), losses[0], losses[-1]


def _sage_sampled(f, x, y, fill, permutations, rng, batch=64):
    d = x.shape[1]
    contrib = np.empty((permutations, d))
    base = full = None
    for s in range(0, permutations, batch):
        p = min(batch, permutations - s)
        orders = np.stack([rng.permutation(d) for _ in range(p)])
        masks = np.zeros((p, d + 1, d), bool)
        for k in range(1, d + 1):
            masks[np.arange(p), k] = masks[np.arange(p), k - 1]
            masks[np.arange(p), k, orders[:, k - 1]] = True
        losses = _masked_losses(f, x, y, masks.reshape(-1, d), fill).reshape(p, d + 1)
        gains = losses[:, :-1] - losses[:, 1:]
        contrib[s:s + p][np.arange(p)[:, None], orders] = gains
        base, full = losses[0, 0], losses[0, -1]
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(permutations) if permutations > 1 else np.full(d, np.inf)
    return phi, se, base, full


def sage_window(model, x: np.ndarray, y: np.ndarray, permutations: int = 256, seed: int = 0,
                method: str = "auto") -> SageResult:
    """Shapley attribution of the squared-error loss reduction over features.

    Unknown features are imputed with the window mean. ``method`` "auto"
    enumerates all subsets when there are at most 10 features and samples
    permutations otherwise.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float).reshape(-1)
    if x.ndim != 2 or len(x) < 2:
        raise EmptyWindow("a SAGE window needs at least 2 rows")
    if len(y) != len(x):
        raise ValueError("x and y differ in length")
    f = _as_predictor(model)
    fill = x.mean(axis=0)
    d = x.shape[1]
    exact = method == "exact" or (method == "auto" and d <= EXACT_MAX_FEATURES)
    if exact:
        phi, se, base, full = _sage_exact(f, x, y, fill)
        return SageResult(phi, se, True, 0, float(base), float(full))
    phi, se, base, full = _sage_sampled(f, x, y, fill, permutations, np.random.default_rng(seed))
    return SageResult(phi, se, False, permutations, float(base), float(full))


@dataclass(frozen=True, eq=False)
class SageReport:
    windows: np.ndarray
    window_starts: np.ndarray
    window: int
    average: np.ndarray
    permutations: int
    seed: int

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        return {
            "window": self.window,
            "window_starts": self.window_starts.tolist(),
            "windows": self.windows.tolist(),
            "average": self.average.tolist() if names is None else dict(zip(names, self.average.tolist())),
            "sampling": {"permutations": self.permutations, "seed": self.seed},
        }


def sage_average(windows: Sequence[np.ndarray]) -> np.ndarray:
    w = np.atleast_2d(np.asarray(windows, float))
    if len(w) == 0:
        raise EmptyWindow("no windows to average")
    return w.mean(axis=0)


def sage_over_lifetime(model, x: np.ndarray, y: np.ndarray, cycles: np.ndarray, window: int = SAGE_WINDOW,
                       permutations: int = 256, seed: int = 0, method: str = "auto") -> SageReport:
    """SAGE per window of ``window`` consecutive cycles (rows of every battery
    in the cycle range share a window), then the mean over ceil(C/window)
    windows. Windows with fewer than 2 rows are skipped."""
    cycles = np.asarray(cycles)
    c0 = int(cycles.min())
    n_win = int(math.ceil((int(cycles.max()) - c0 + 1) / window))
    rows, starts = [], []
    for k in range(n_win):
        sel = (cycles >= c0 + k * window) & (cycles < c0 + (k + 1) * window)
        if sel.sum() < 2:
            continue
        res = sage_window(model, x[sel], y[sel], permutations, seed + k, method)
        rows.append(res.values)
        starts.append(c0 + k * window)
    if not rows:
        raise EmptyWindow("no window has 2 or more rows")
    w = np.stack(rows)
    return SageReport(w, np.array(starts), window, sage_average(w), permutations, seed)


# ---------------------------------------------------------------------------
# dominance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DominanceReport:
    thermodynamic_share: float
    kinetic_share: float
    concentration_share: float
    other_polarization_share: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def dominance(sage_avg, names: Sequence[str] | None = None) -> DominanceReport:
    """Group sums of |SAGE|: thermodynamic (Q1, Q9) against kinetic (Q2-Q8),
    and concentration (VD9, ReVD) against other polarization (VC89, ReVC)."""
    if isinstance(sage_avg, Mapping):
        lookup = {k: abs(float(v)) for k, v in sage_avg.items()}
    else:
        if names is None:
            raise ValueError("names are required for an array of SAGE values")
        lookup = {k: abs(float(v)) for k, v in zip(names, np.asarray(sage_avg, float))}
    try:
        th = sum(lookup[k] for k in THERMODYNAMIC)
        ki = sum(lookup[k] for k in KINETIC)
        co = sum(lookup[k] for k in CONCENTRATION)
        ot = sum(lookup[k] for k in OTHER_POLARIZATION)
    except KeyError as exc:
        raise ValueError(f"SAGE values lack feature {exc.args[0]}") from None
    if th + ki == 0 or co + ot == 0:
        raise AllZeroImportance("a dominance pairing has zero total importance")
    return DominanceReport(th / (th + ki), ki / (th + ki), co / (co + ot), ot / (co + ot))


# ---------------------------------------------------------------------------
# Wasserstein
# ---------------------------------------------------------------------------

def wasserstein2_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """2-Wasserstein distance between two empirical distributions on the line.

    Integrates the squared difference of the two step quantile functions
    over the merged breakpoints {k/n} and {k/m}; for equal sizes this is the
    sorted pairing sqrt(mean((a_(i) - b_(i))^2)).
    """
    a = np.sort(np.asarray(a, float).ravel())
    b = np.sort(np.asarray(b, float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise EmptySample("both samples must be non-empty")
    n, m = len(a), len(b)
    if n == m:
        return float(math.sqrt(np.mean((a - b) ** 2)))
    # breakpoints as exact integer fractions over n*m
    ticks = np.union1d(np.arange(n + 1) * m, np.arange(m + 1) * n)
    mid = (ticks[:-1] + ticks[1:])
    # quantile index for u in (t_k, t_{k+1}): ceil(u*n) - 1, evaluated at the midpoint
    ia = (mid * n) // (2 * n * m)
    ib = (mid * m) // (2 * n * m)
    width = np.diff(ticks) / (n * m)
    return float(math.sqrt(np.sum(width * (a[ia] - b[ib]) ** 2)))


def wasserstein2_bruteforce(a: Sequence[float], b: Sequence[float]) -> float:
    """Minimum over all pairings of equal-size samples (reference for small n)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if len(a) != len(b):
        raise ValueError("brute force needs equal sizes")
    best = min(np.mean((a - b[list(p)]) ** 2) for p in itertools.permutations(range(len(b))))
    return float(math.sqrt(best))


@dataclass(frozen=True, eq=False)
class CorrelationTrace:
    window_starts: np.ndarray
    values: np.ndarray
    minima: np.ndarray

    def to_dict(self) -> dict:
        return {"window_starts": self.window_starts.tolist(), "values": self.values.tolist(),
                "minima": self.minima.tolist()}


def _minmax(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    return (x - x.min()) / span if span > 0 else np.zeros_like(x)


def degradation_correlation(thermo: Sequence[float], conc: Sequence[float], window: int = SAGE_WINDOW
                            ) -> CorrelationTrace:
    """Per-window W2 dissimilarity between the increments of two min-max
    normalized series, with interior local minima flagged."""
    a = np.asarray(thermo, float)
    b = np.asarray(conc, float)
    if len(a) != len(b):
        raise ValueError("series must be aligned")
    if window < 2 or len(a) < window + 1:
        raise TooFewCycles(f"{len(a)} cycles are too few for window {window}")
    da, db = np.diff(_minmax(a)), np.diff(_minmax(b))
    starts = np.arange(0, len(da) - window + 1, window)
    vals = np.array([wasserstein2_1d(da[s:s + window], db[s:s + window]) for s in starts])
    minima = np.array([k for k in range(1, len(vals) - 1) if vals[k] < vals[k - 1] and vals[k] < vals[k + 1]],
                      dtype=int)
    return CorrelationTrace(starts, vals, minima)


# ---------------------------------------------------------------------------
# Arrhenius
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArrheniusFit:
    slope: float
    intercept: float
    r_squared: float

    @property
    def alpha(self) -> float:
        return -self.slope

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared, "alpha": self.alpha}


def arrhenius_diagnostic(rates: Mapping[float, float]) -> ArrheniusFit:
    """Least squares of ln(rate) against 1/T."""
    if len(rates) < 3:
        raise TooFewSamples("an Arrhenius fit needs at least 3 temperatures")
    t = np.array(sorted(rates), float)
    r = np.array([rates[k] for k in sorted(rates)], float)
    if np.any(r <= 0) or np.any(~np.isfinite(r)):
        raise NonPositiveRate("aging rates must be positive")
    x, y = 1.0 / t, np.log(r)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return ArrheniusFit(float(slope), float(intercept), float(r2))


def threshold_rate(cycles: Sequence[float], capacity: Sequence[float], fade: float) -> float:
    """1 / (cycles until the capacity first falls ``fade`` below its first
    value), with linear interpolation between the bracketing cycles."""
    c = np.asarray(cycles, float)
    q = np.asarray(capacity, float)
    level = q[0] * (1.0 - fade)
    below = np.flatnonzero(q <= level)
    if len(below) == 0:
        raise TooFewCycles(f"capacity never fell by {fade:.1%}")
    k = below[0]
    if k == 0:
        raise TooFewCycles("threshold reached at the first cycle")
    w = (q[k - 1] - level) / (q[k - 1] - q[k])
    return 1.0 / (c[k - 1] + w * (c[k] - c[k - 1]) - c[0])


def parabolic_rate(cycles: Sequence[float], capacity: Sequence[float]) -> float:
    """Rate constant b**2 from the least-squares fit capacity = a - b*sqrt(cycle).

    Diffusion-limited film growth makes the fade proportional to
    sqrt(k * cycle), so b**2 tracks the growth constant k independently of
    any offset in the starting capacity.
    """
    c = np.asarray(cycles, float)
    q = np.asarray(capacity, float)
    if len(c) < 3:
        raise TooFewCycles("a parabolic fit needs at least 3 cycles")
    if np.any(c < 0):
        raise ValueError("cycle numbers must be non-negative")
    b = -np.polyfit(np.sqrt(c), q, 1)[0]
    if b <= 0:
        raise NonPositiveRate("capacity does not fade")
    return float(b * b)
