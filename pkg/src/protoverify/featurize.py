"""The 52-feature charging taxonomy, min-max normalization and ICA curves.

Feature IDs (1-based):

    1        T (kelvin)
    2-10     U1..U9 cut-off voltages
    11-16    VC89, VD9, tVD9, ReVC, ReVD, tReVD
    17-25    Vg1..Vg9 mean voltage gradient (V/s)
    26       RVg = Vg2 / Vg1
    27-35    Q1..Q9 cumulative charge at the end of each step (Ah)
    36-44    RL1..RL9 lumped in-step resistance (ohm)
    45-52    RO1..RO8 step-switch resistance (ohm)
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import (
    BatteryDataset,
    ChargingProtocol,
    CycleRecord,
    IMVVector,
    Segment,
    StepSegments,
    probe_imv,
    segment_cycle,
)
from .errors import DegenerateSegment, EmptyFitSet, TooFewSamples, ZeroCurrentDelta

N_FEATURES = 52
FEATURE_NAMES: tuple[str, ...] = (
    ("T",)
    + tuple(f"U{k}" for k in range(1, 10))
    + ("VC89", "VD9", "tVD9", "ReVC", "ReVD", "tReVD")
    + tuple(f"Vg{k}" for k in range(1, 10))
    + ("RVg",)
    + tuple(f"Q{k}" for k in range(1, 10))
    + tuple(f"RL{k}" for k in range(1, 10))
    + tuple(f"RO{k}" for k in range(1, 9))
)
FEATURE_ID = {name: k + 1 for k, name in enumerate(FEATURE_NAMES)}
IN_CYCLE_IDS = tuple(range(11, 53))
IMV_IDS = tuple(range(2, 11))
RECOVERY_FRACTION = 0.8
CONSTANT_SPAN = 1e-12


def feature_index(name: str) -> int:
    """Zero-based column of a named feature."""
    return FEATURE_ID[name] - 1


# ---------------------------------------------------------------------------
# per-cycle features
# ---------------------------------------------------------------------------

def voltage_gradient(seg: Segment) -> float:
    """Mean dV/dt over the segment after resampling on a uniform time grid
    whose spacing is the median sample interval."""
    if len(seg) < 2:
        raise DegenerateSegment(f"segment has {len(seg)} sample(s), need 2")
    t, v = seg.t, seg.v
    dt = float(np.median(np.diff(t)))
    n = int(np.floor((t[-1] - t[0]) / dt * (1 + 1e-12))) + 1
    if n < 2:
        return float((v[-1] - v[0]) / (t[-1] - t[0]))
    tu = t[0] + dt * np.arange(n)
    vu = np.interp(tu, t, v)
    return float(np.mean(np.gradient(vu, dt)))


def intra_step_features(segments: StepSegments) -> dict[str, np.ndarray]:
    """Vg, Q and RL for each of the 9 charge steps."""
    vg, q, rl = np.empty(9), np.empty(9), np.empty(9)
    for k, seg in enumerate(segments.charge):
        if len(seg) < 2:
            raise DegenerateSegment(f"step {k + 1} has {len(seg)} sample(s), need 2")
        vg[k] = voltage_gradient(seg)
        q[k] = seg.q[-1]
        rl[k] = (seg.v[-1] - seg.v[0]) / seg.current
    return {"Vg": vg, "Q": q, "RL": rl}


def _drop_time(t: np.ndarray, v: np.ndarray, fraction: float = 1.0) -> tuple[float, float]:
    """Return (drop, time) where drop = v[0] - min(v). For ``fraction`` < 1 the
    time is the interpolated first crossing of ``fraction`` of the drop,
    otherwise the time of the minimum. Times are relative to t[0]."""
    drop = float(v[0] - v.min())
    if drop <= 0:
        return 0.0, 0.0
    if fraction >= 1.0:
        return drop, float(t[int(np.argmin(v))] - t[0])
    level = v[0] - fraction * drop
    k = int(np.argmax(v <= level))
    if k == 0:
        return drop, 0.0
    w = (v[k - 1] - level) / (v[k - 1] - v[k])
    return drop, float(t[k - 1] + w * (t[k] - t[k - 1]) - t[0])


def inter_step_features(segments: StepSegments) -> dict[str, float | np.ndarray]:
    """Relaxation, switching and ratio features between steps."""
    ch = segments.charge
    s8, s9, rest = ch[7], ch[8], segments.rest
    if len(rest) < 2:
        raise DegenerateSegment("rest segment has fewer than 2 samples")
    vd9, tvd9 = _drop_time(s9.t, s9.v)
    revd, trevd = _drop_time(rest.t, rest.v, RECOVERY_FRACTION)
    ro = np.empty(8)
    for k in range(8):
        di = ch[k + 1].current - ch[k].current
        if abs(di) < 1e-12:
            raise ZeroCurrentDelta(f"steps {k + 1} and {k + 2} share the current {ch[k].current:g} A")
        ro[k] = (ch[k + 1].v[0] - ch[k].v[-1]) / di
    vg1, vg2 = voltage_gradient(ch[0]), voltage_gradient(ch[1])
    return {
        "VC89": float(s9.v[0] - s8.v[-1]),
        "VD9": vd9,
        "tVD9": tvd9,
        "ReVC": float(s9.v[-1] - rest.v[0]),
        "ReVD": revd,
        "tReVD": trevd,
        "RVg": vg2 / vg1 if vg1 != 0 else float("nan"),
        "RO": ro,
    }


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    cycle_index: int
    battery_id: str

    def __post_init__(self):
        if self.values.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} values, got {self.values.shape}")

    def __getitem__(self, name: str) -> float:
        return float(self.values[feature_index(name)])


def in_cycle_features(segments: StepSegments) -> np.ndarray:
    """The 42 in-cycle features (IDs 11-52) in ID order."""
    intra = intra_step_features(segments)
    inter = inter_step_features(segments)
    return np.concatenate([
        [inter[k] for k in ("VC89", "VD9", "tVD9", "ReVC", "ReVD", "tReVD")],
        intra["Vg"], [inter["RVg"]], intra["Q"], intra["RL"], inter["RO"],
    ])


def extract_features(cycle: CycleRecord, imv: IMVVector, battery_id: str = "",
                     protocol: ChargingProtocol | None = None) -> FeatureVector:
    segments = segment_cycle(cycle, protocol)
    values = np.concatenate([[cycle.temperature], imv.as_array(), in_cycle_features(segments)])
    return FeatureVector(values, cycle.cycle_index, battery_id)


# ---------------------------------------------------------------------------
# matrices and normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NormStats:
    lo: np.ndarray
    hi: np.ndarray
    constant: np.ndarray
    meta: dict = field(default_factory=lambda: {"gradient_unit": "V/s", "time_unit": "s"})

    def transform(self, x: np.ndarray) -> np.ndarray:
        span = np.where(self.constant, 1.0, self.hi - self.lo)
        shift = np.where(self.constant, 0.0, self.lo)
        return (x - shift) / span

    def inverse(self, z: np.ndarray) -> np.ndarray:
        span = np.where(self.constant, 1.0, self.hi - self.lo)
        shift = np.where(self.constant, 0.0, self.lo)
        return z * span + shift

    def to_dict(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist(),
                "constant": self.constant.tolist(), "meta": dict(self.meta)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["min"], float), np.asarray(d["max"], float),
                   np.asarray(d["constant"], bool), dict(d.get("meta", {})))


def fit_norm(x: np.ndarray, columns: Sequence[str] | None = None) -> NormStats:
    if x.shape[0] == 0:
        raise EmptyFitSet("no rows to fit normalization on")
    lo, hi = np.nanmin(x, axis=0), np.nanmax(x, axis=0)
    constant = ~(hi - lo >= CONSTANT_SPAN)
    if constant.any():
        names = [columns[k] if columns else str(k) for k in np.flatnonzero(constant)]
        warnings.warn(f"constant columns carried through unscaled: {', '.join(names)}", stacklevel=2)
    return NormStats(lo, hi, constant)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    battery_ids: np.ndarray
    cycles: np.ndarray
    values: np.ndarray
    columns: tuple[str, ...] = FEATURE_NAMES
    norm_stats: NormStats | None = None

    def __len__(self) -> int:
        return len(self.cycles)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def rows(self, mask: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(self.battery_ids[mask], self.cycles[mask], self.values[mask],
                             self.columns, self.norm_stats)

    def battery(self, battery_id: str) -> "FeatureMatrix":
        return self.rows(self.battery_ids == battery_id)

    @classmethod
    def from_vectors(cls, vectors: Iterable[FeatureVector]) -> "FeatureMatrix":
        vectors = list(vectors)
        if not vectors:
            return cls(np.array([], dtype=object), np.array([], dtype=int), np.empty((0, N_FEATURES)))
        return cls(
            np.array([v.battery_id for v in vectors], dtype=object),
            np.array([v.cycle_index for v in vectors]),
            np.stack([v.values for v in vectors]),
        )

    @classmethod
    def concat(cls, parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        return cls(np.concatenate([p.battery_ids for p in parts]),
                   np.concatenate([p.cycles for p in parts]),
                   np.concatenate([p.values for p in parts]), parts[0].columns)

    def to_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["battery_id", "cycle"] + [f"f{k}" for k in range(1, len(self.columns) + 1)])
        for b, c, row in zip(self.battery_ids, self.cycles, self.values):
            w.writerow([b, int(c)] + [repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, stream) -> "FeatureMatrix":
        r = csv.reader(stream)
        header = next(r)
        rows = list(r)
        return cls(np.array([x[0] for x in rows], dtype=object),
                   np.array([int(x[1]) for x in rows]),
                   np.array([[float(v) for v in x[2:]] for x in rows]).reshape(len(rows), len(header) - 2))


def normalize(matrix: FeatureMatrix, fit_rows: np.ndarray | None = None) -> FeatureMatrix:
    """Min-max scale every column with statistics from ``fit_rows`` (a boolean
    mask or index array; all rows when None). No clamping is applied."""
    fit = matrix.values if fit_rows is None else matrix.values[fit_rows]
    stats = fit_norm(fit, matrix.columns)
    return FeatureMatrix(matrix.battery_ids, matrix.cycles, stats.transform(matrix.values),
                         matrix.columns, stats)


def denormalize(matrix: FeatureMatrix) -> FeatureMatrix:
    if matrix.norm_stats is None:
        return matrix
    return FeatureMatrix(matrix.battery_ids, matrix.cycles, matrix.norm_stats.inverse(matrix.values),
                         matrix.columns, None)


def norm_sidecar(stats: NormStats) -> str:
    return json.dumps(stats.to_dict(), indent=2, sort_keys=True)


def chemical_inputs(imv: np.ndarray, cycles: np.ndarray) -> np.ndarray:
    """Broadcast the cut-off vector over cycle indexes: rows are
    [U1..U9, cycle_index]."""
    imv = np.atleast_2d(imv)
    cycles = np.asarray(cycles, float)
    if imv.shape[0] == 1:
        imv = np.repeat(imv, len(cycles), axis=0)
    return np.column_stack([imv, cycles])


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def featurize_cycles(cycles: Iterable[CycleRecord], imv: IMVVector, battery_id: str,
                     protocol: ChargingProtocol | None = None, first_cycle: int = 4) -> FeatureMatrix:
    """Features for every cycle at or after ``first_cycle`` (the first three
    cycles are the SOC-terminated probe cycles)."""
    return FeatureMatrix.from_vectors(
        extract_features(c, imv, battery_id, protocol) for c in cycles if c.cycle_index >= first_cycle
    )


def featurize_dataset(ds: BatteryDataset, protocol: ChargingProtocol | None = None,
                      first_cycle: int = 4) -> FeatureMatrix:
    imv = ds.imv if ds.imv is not None else probe_imv(ds.cycles[:3], protocol)
    return featurize_cycles(ds.cycles, imv, ds.battery_id, protocol, first_cycle)


def matrix_to_csv_text(matrix: FeatureMatrix) -> str:
    buf = io.StringIO()
    matrix.to_csv(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# incremental capacity
# ---------------------------------------------------------------------------

def _moving_mean(x: np.ndarray, window: int) -> np.ndarray:
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


def ica_curve(discharge: Segment, window: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed dQ/dV of a discharge segment, returned as (v, dq_dv). Charge is
    counted as delivered charge so dQ/dV is positive on discharge."""
    if window < 1:
        raise ValueError("window must be positive")
    n = len(discharge)
    if n < 2 * window:
        raise TooFewSamples(f"{n} samples, need at least {2 * window} for window {window}")
    v = _moving_mean(discharge.v, window)
    q = _moving_mean(discharge.q, window)
    dv = v[2:] - v[:-2]
    dq = q[2:] - q[:-2]
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(dv != 0, dq / dv, np.nan)
    return v[1:-1], g
