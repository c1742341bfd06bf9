"""Data model for the 9-step charging protocol, cycling records and IMV probing.

Also handles CSV ingestion/serialization and splitting a cycle into its
charge plateaus, rest and discharge.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    MalformedRow,
    NonMonotonicTime,
    NonPositiveNominal,
    SegmentationFailure,
)

CSV_HEADER = ("battery_id", "cycle", "t", "i", "v", "q", "temp_k")

DEFAULT_C_RATES = (0.33, 3.00, 2.90, 2.80, 2.40, 2.00, 1.80, 1.40, 0.33)
DEFAULT_SOC_INCREMENTS = (0.08, 0.12, 0.10, 0.10, 0.10, 0.111, 0.10, 0.10, 0.159)
N_STEPS = 9
FINAL_SOC = 0.97

# plateau detection: |i - plateau mean| > max(REL * mean, ABS) for RUN samples
PLATEAU_REL_TOL = 0.01
PLATEAU_ABS_TOL = 0.005
PLATEAU_RUN = 2
ZERO_CURRENT = 0.005


@dataclass(frozen=True)
class ChargingProtocol:
    """The multi-step constant-current charging scheme.

    ``c_rates`` are multiples of ``nominal_capacity`` per hour; ``soc_increments``
    are the fraction of nominal capacity charged in each step.
    """

    c_rates: tuple[float, ...] = DEFAULT_C_RATES
    soc_increments: tuple[float, ...] = DEFAULT_SOC_INCREMENTS
    nominal_capacity: float = 1.1
    rest_s: float = 7200.0
    discharge_c_rate: float = 1.0
    discharge_cutoff_v: float = 2.5

    def __post_init__(self):
        if len(self.c_rates) != N_STEPS or len(self.soc_increments) != N_STEPS:
            raise ValueError("protocol must have exactly 9 steps")
        if self.nominal_capacity <= 0:
            raise NonPositiveNominal("nominal capacity must be positive")
        if any(c <= 0 for c in self.c_rates) or any(s <= 0 for s in self.soc_increments):
            raise ValueError("C-rates and SOC increments must be positive")
        if not math.isclose(sum(self.soc_increments), FINAL_SOC, abs_tol=1e-9):
            raise ValueError(f"SOC increments must sum to {FINAL_SOC}")

    @property
    def soc_targets(self) -> np.ndarray:
        return np.cumsum(self.soc_increments)

    @property
    def step_currents(self) -> np.ndarray:
        return np.asarray(self.c_rates) * self.nominal_capacity

    @property
    def discharge_current(self) -> float:
        return self.discharge_c_rate * self.nominal_capacity


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CycleRecord:
    """One cycle of samples. Current is signed, positive on charge; ``q`` is
    the net charge (Ah) accumulated since the start of the cycle."""

    cycle_index: int
    t: np.ndarray
    i: np.ndarray
    v: np.ndarray
    q: np.ndarray
    temperature: float
    discharge_capacity: float

    def __post_init__(self):
        for name in ("t", "i", "v", "q"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = len(self.t)
        if not (len(self.i) == len(self.v) == len(self.q) == n):
            raise ValueError("sample arrays must have equal length")
        if self.cycle_index < 1:
            raise ValueError("cycle_index must be positive")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise NonMonotonicTime(self.cycle_index)
        if not self.discharge_capacity > 0:
            raise ValueError("discharge capacity must be positive")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_samples(cls, cycle_index, t, i, v, q, temperature) -> "CycleRecord":
        q = np.asarray(q, dtype=float)
        return cls(cycle_index, t, i, v, q, temperature, discharged_charge(q))


def discharged_charge(q: np.ndarray) -> float:
    """Charge removed after the end-of-charge peak."""
    if len(q) == 0:
        return 0.0
    k = int(np.argmax(q))
    return float(q[k] - np.min(q[k:]))


@dataclass(frozen=True)
class IMVVector:
    """Step cut-off voltages U1..U9 probed before cycling."""

    u: tuple[float, ...]
    temperature: float

    def __post_init__(self):
        u = tuple(float(x) for x in self.u)
        if len(u) != N_STEPS:
            raise ValueError("IMV vector must have 9 entries")
        if any(not (2.5 <= x <= 4.4) for x in u):
            raise ValueError(f"cut-off voltages outside [2.5, 4.4] V: {u}")
        object.__setattr__(self, "u", u)

    def as_array(self) -> np.ndarray:
        return np.array(self.u)

    @property
    def healthy(self) -> bool:
        return all(b >= a for a, b in zip(self.u, self.u[1:]))


@dataclass(frozen=True)
class BatteryDataset:
    battery_id: str
    temperature: float
    cycles: tuple[CycleRecord, ...]
    imv: IMVVector | None = None

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))
        for k, c in enumerate(self.cycles, start=1):
            if c.cycle_index != k:
                raise ValueError(f"cycle indexes must be contiguous from 1; got {c.cycle_index} at {k}")
            if c.temperature != self.temperature:
                raise ValueError("all cycles must share the battery temperature")

    def capacities(self) -> np.ndarray:
        return np.array([c.discharge_capacity for c in self.cycles])


def soh(discharge_capacity: float, nominal: float) -> float:
    if not nominal > 0:
        raise NonPositiveNominal(f"nominal capacity must be positive, got {nominal}")
    return discharge_capacity / nominal


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _text_stream(source) -> io.TextIOBase:
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif hasattr(source, "read"):
        raw = source.read()
        if isinstance(raw, str):
            return io.StringIO(raw)
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return io.StringIO(raw.decode("utf-8"))


def parse_cycling_csv(source: BinaryIO | bytes | str, protocol: ChargingProtocol | None = None) -> BatteryDataset:
    """Read one battery's cycling CSV (plain or gzip) into a validated dataset.

    ``source`` is a byte stream, raw bytes or a file path.
    """
    protocol = protocol or ChargingProtocol()
    reader = csv.reader(_text_stream(source))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyDataset("empty file") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise MalformedRow(1, f"header must be {','.join(CSV_HEADER)}")

    battery_id = None
    temperature = None
    cols: dict[int, list[list[float]]] = {}
    last_line: dict[int, int] = {}
    prev_cycle = 0
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise MalformedRow(line, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
        bid = row[0]
        try:
            cyc = int(row[1])
            vals = [float(x) for x in row[2:]]
        except ValueError:
            raise MalformedRow(line, "non-numeric field") from None
        if any(math.isnan(x) or math.isinf(x) for x in vals):
            raise MalformedRow(line, "NaN or infinite value")
        if battery_id is None:
            battery_id, temperature = bid, vals[4]
        elif bid != battery_id:
            raise MalformedRow(line, "a file must hold a single battery")
        elif vals[4] != temperature:
            raise MalformedRow(line, "temperature differs from the battery's temperature")
        if cyc < prev_cycle:
            raise MalformedRow(line, "rows must be sorted by cycle")
        prev_cycle = cyc
        cols.setdefault(cyc, []).append(vals[:4])
        last_line[cyc] = line

    if not cols:
        raise EmptyDataset("no data rows")

    cycles = []
    for expected, cyc in enumerate(sorted(cols), start=1):
        if cyc != expected:
            raise MalformedRow(last_line[cyc], f"cycle indexes must be contiguous from 1 (got {cyc})")
        arr = np.array(cols[cyc])
        t, i, v, q = arr.T
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise NonMonotonicTime(cyc)
        cap = discharged_charge(q)
        if not 0 < cap <= 1.2 * protocol.nominal_capacity:
            raise MalformedRow(last_line[cyc], f"discharge capacity {cap:.4g} Ah out of range")
        cycles.append(CycleRecord(cyc, t, i, v, q, temperature, cap))
    return BatteryDataset(battery_id, temperature, tuple(cycles))


def write_cycling_csv(dataset: BatteryDataset, stream) -> None:
    """Serialize with ``repr`` floats so that parsing round-trips exactly."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_HEADER)
    temp = repr(float(dataset.temperature))
    for c in dataset.cycles:
        for row in zip(c.t.tolist(), c.i.tolist(), c.v.tolist(), c.q.tolist()):
            w.writerow((dataset.battery_id, c.cycle_index, *map(repr, row), temp))


def dataset_to_csv_bytes(dataset: BatteryDataset) -> bytes:
    buf = io.StringIO()
    write_cycling_csv(dataset, buf)
    return buf.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Segment:
    t: np.ndarray
    i: np.ndarray
    v: np.ndarray
    q: np.ndarray
    current: float

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True, eq=False)
class StepSegments:
    charge: tuple[Segment, ...]
    rest: Segment
    discharge: Segment | None
    charge_samples: int
    charge_start: int = 0

    @property
    def charge_t(self) -> np.ndarray:
        return np.concatenate([s.t for s in self.charge])

    @property
    def charge_v(self) -> np.ndarray:
        return np.concatenate([s.v for s in self.charge])

    @property
    def charge_q(self) -> np.ndarray:
        return np.concatenate([s.q for s in self.charge])


def _plateau_starts(i: np.ndarray) -> list[int]:
    """Indexes where a new constant-current plateau begins."""
    starts = [0]
    s = 0
    n = len(i)
    while True:
        seg = i[s:]
        csum = np.cumsum(seg)
        mean_before = np.empty_like(seg)
        mean_before[0] = seg[0]
        mean_before[1:] = csum[:-1] / np.arange(1, len(seg))
        tol = np.maximum(PLATEAU_REL_TOL * np.abs(mean_before), PLATEAU_ABS_TOL)
        dev = np.abs(seg - mean_before) > tol
        run = dev.copy()
        for k in range(1, PLATEAU_RUN):
            run[:-k] &= dev[k:]
            run[len(run) - k:] = False
        hits = np.flatnonzero(run)
        if len(hits) == 0:
            return starts
        s = s + int(hits[0])
        if s >= n:
            return starts
        starts.append(s)


def segment_cycle(cycle: CycleRecord, protocol: ChargingProtocol | None = None) -> StepSegments:
    """Split a cycle into its 9 charge plateaus, the rest and the discharge."""
    i = cycle.i
    pos = np.flatnonzero(i > ZERO_CURRENT)
    if len(pos) == 0:
        raise SegmentationFailure(f"cycle {cycle.cycle_index}: no charge phase")
    c0 = int(pos[0])
    # charge phase ends at the first non-positive sample after it starts
    after = np.flatnonzero(i[c0:] <= ZERO_CURRENT)
    c1 = c0 + int(after[0]) if len(after) else len(i)
    if c1 >= len(i) or abs(i[c1]) > ZERO_CURRENT:
        raise SegmentationFailure(f"cycle {cycle.cycle_index}: no rest after charge")
    rest_after = np.flatnonzero(np.abs(i[c1:]) > ZERO_CURRENT)
    r1 = c1 + int(rest_after[0]) if len(rest_after) else len(i)
    if r1 - c1 < 2:
        raise SegmentationFailure(f"cycle {cycle.cycle_index}: rest too short")

    starts = _plateau_starts(i[c0:c1])
    if len(starts) != 9:
        raise SegmentationFailure(
            f"cycle {cycle.cycle_index}: found {len(starts)} charge plateaus, expected 9"
        )
    bounds = [c0 + s for s in starts] + [c1]
    charge = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        charge.append(Segment(cycle.t[a:b], i[a:b], cycle.v[a:b], cycle.q[a:b], float(np.mean(i[a:b]))))
    rest = Segment(cycle.t[c1:r1], i[c1:r1], cycle.v[c1:r1], cycle.q[c1:r1], 0.0)

    discharge = None
    neg = np.flatnonzero(i[r1:] < -ZERO_CURRENT)
    if len(neg):
        d0 = r1 + int(neg[0])
        stop = np.flatnonzero(i[d0:] >= -ZERO_CURRENT)
        d1 = d0 + int(stop[0]) if len(stop) else len(i)
        discharge = Segment(cycle.t[d0:d1], i[d0:d1], cycle.v[d0:d1], cycle.q[d0:d1],
                            float(np.mean(i[d0:d1])))
    return StepSegments(tuple(charge), rest, discharge, c1 - c0, c0)


# ---------------------------------------------------------------------------
# IMV probing
# ---------------------------------------------------------------------------

def charge_soc(segments: StepSegments) -> np.ndarray:
    """Within-cycle SOC of charge samples, renormalized so the end of charge is 0.97."""
    q = segments.charge_q
    q = q - q[0] if q[0] != 0 else q
    q_end = q[-1]
    if q_end <= 0:
        raise SegmentationFailure("charge phase accumulates no charge")
    return q / q_end * FINAL_SOC


def voltage_at_soc(soc: np.ndarray, v: np.ndarray, targets: Iterable[float]) -> np.ndarray:
    """Voltage at the first sample where SOC reaches each target, interpolated
    linearly between the bracketing samples."""
    out = []
    for target in targets:
        k = min(int(np.searchsorted(soc, target - 1e-12, side="left")), len(soc) - 1)
        if k == 0 or abs(soc[k] - target) <= 1e-12 or soc[k] <= soc[k - 1]:
            out.append(float(v[k]))
            continue
        w = (target - soc[k - 1]) / (soc[k] - soc[k - 1])
        out.append(float(v[k - 1] + w * (v[k] - v[k - 1])))
    return np.array(out)


def probe_imv(initial_cycles: Sequence[CycleRecord], protocol: ChargingProtocol | None = None) -> IMVVector:
    """Cut-off voltages from the 3 probe cycles: for each step, the mean over
    cycles of the voltage at which cumulative SOC hits the step's target."""
    protocol = protocol or ChargingProtocol()
    if len(initial_cycles) != 3:
        raise ValueError("IMV probing needs exactly 3 cycles")
    per_cycle = []
    for c in initial_cycles:
        seg = segment_cycle(c, protocol)
        per_cycle.append(voltage_at_soc(charge_soc(seg), seg.charge_v, protocol.soc_targets))
    # sorting each column first makes the mean bitwise independent of cycle order
    u = np.sort(np.array(per_cycle), axis=0).sum(axis=0) / len(per_cycle)
    return IMVVector(tuple(u.tolist()), initial_cycles[0].temperature)
