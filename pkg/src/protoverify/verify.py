"""End-to-end prototype verification.

Sources are fully cycled batteries at known temperatures; a target is a
battery with only its early cycles observed. The pipeline

    featurize -> chemical-process model -> rates / AT / weights
             -> chain extrapolation -> trajectory model -> MAPE

predicts the target's full capacity trajectory.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dataset import BatteryDataset, ChargingProtocol, CycleRecord, IMVVector, probe_imv
from .errors import (
    ConfigError,
    IllConditionedFit,
    InsufficientSourceData,
    LengthMismatch,
    ProtoVerifyError,
    StageError,
    WindowOutOfRange,
    ZeroDenominator,
)
from .featurize import (
    FEATURE_NAMES,
    IMV_IDS,
    IN_CYCLE_IDS,
    NormStats,
    chemical_inputs,
    extract_features,
    fit_norm,
)
from .neural import MLPModel, TrainConfig, mlp_new, mlp_train
from .transfer import (
    RateWindow,
    SourcePlan,
    SourceRates,
    TransferPlan,
    aging_rates,
    chain_extrapolate,
    per_cycle_rates,
    source_weights_columns,
)

IN_COLS = np.array(IN_CYCLE_IDS) - 1
IMV_COLS = np.array(IMV_IDS) - 1
FIRST_CYCLE = 4
STAGE_FRACTION = 0.10
AT_RATE_FLOOR = 1e-6
AT_MAX = 10.0


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BatteryData:
    """Featurized battery: one row per protocol cycle (cycle >= 4)."""

    battery_id: str
    temperature: float
    imv: np.ndarray
    cycles: np.ndarray
    features: np.ndarray
    capacity: np.ndarray
    nominal: float = 1.1

    def __post_init__(self):
        if not (len(self.cycles) == len(self.features) == len(self.capacity)):
            raise LengthMismatch(f"{self.battery_id}: cycles, features and capacity differ in length")
        if len(self.cycles) and np.any(np.diff(self.cycles) != 1):
            raise InsufficientSourceData(f"{self.battery_id}: cycles must be contiguous")

    @property
    def soh(self) -> np.ndarray:
        return self.capacity / self.nominal

    def lifetime(self, eol_fraction: float) -> int:
        """Cycle index of the first cycle below ``eol_fraction``; the last
        recorded cycle when the battery never crosses it."""
        below = np.flatnonzero(self.soh < eol_fraction)
        return int(self.cycles[below[0]]) if len(below) else int(self.cycles[-1])

    def upto(self, cycle: int) -> "BatteryData":
        keep = self.cycles <= cycle
        return replace(self, cycles=self.cycles[keep], features=self.features[keep], capacity=self.capacity[keep])

    @classmethod
    def from_cycles(cls, battery_id: str, temperature: float, imv: IMVVector, cycles: Iterable[CycleRecord],
                    nominal: float = 1.1, protocol: ChargingProtocol | None = None) -> "BatteryData":
        idx, rows, caps = [], [], []
        for c in cycles:
            if c.cycle_index < FIRST_CYCLE:
                continue
            idx.append(c.cycle_index)
            rows.append(extract_features(c, imv, battery_id, protocol).values)
            caps.append(c.discharge_capacity)
        if not rows:
            raise InsufficientSourceData(f"{battery_id}: no protocol cycles")
        return cls(battery_id, float(temperature), imv.as_array(), np.array(idx), np.stack(rows),
                   np.array(caps), nominal)

    @classmethod
    def from_dataset(cls, ds: BatteryDataset, nominal: float = 1.1,
                     protocol: ChargingProtocol | None = None) -> "BatteryData":
        imv = ds.imv if ds.imv is not None else probe_imv(ds.cycles[:3], protocol)
        return cls.from_cycles(ds.battery_id, ds.temperature, imv, ds.cycles, nominal, protocol)


def simulate_battery_data(sim, n_cycles: int, stop_soh: float | None = None) -> BatteryData:
    """Run a CellSimulator and featurize on the fly without keeping raw cycles."""
    idx, rows, caps = [], [], []
    nominal = sim.protocol.nominal_capacity
    for rec in sim.run(n_cycles):
        if rec.cycle_index < FIRST_CYCLE:
            continue
        idx.append(rec.cycle_index)
        rows.append(extract_features(rec, sim.imv, sim.battery_id, sim.protocol).values)
        caps.append(rec.discharge_capacity)
        if stop_soh is not None and rec.discharge_capacity / nominal < stop_soh:
            break
    return BatteryData(sim.battery_id, sim.temperature, sim.imv.as_array(), np.array(idx), np.stack(rows),
                       np.array(caps), nominal)


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerificationConfig:
    source_temperatures: tuple[float, ...] = (298.15, 328.15)
    target_temperature: float = 318.15
    early_fraction: float | None = 0.2
    early_cycles: int | None = None
    eol_fraction: float = 0.75
    no_imv: bool = False
    no_transfer: bool = False
    seed: int = 0
    chemical: TrainConfig = TrainConfig(epochs=30, learning_rate=1e-4, lam=1e-5, batch_size=32)
    trajectory: TrainConfig = TrainConfig(epochs=100, learning_rate=1e-3, lam=1e-5, batch_size=64)
    window: tuple[int, int, int] = (100, 200, 50)
    rate_basis: str = "measured"
    train_split: float = 0.75
    trajectory_pooling: str = "battery"
    lifetime_basis: str = "eol"

    def __post_init__(self):
        if (self.early_fraction is None) == (self.early_cycles is None):
            raise ConfigError("set exactly one of early_fraction and early_cycles")
        if self.early_fraction is not None and not 0 < self.early_fraction <= 1:
            raise ConfigError("early_fraction must lie in (0, 1]")
        if self.early_cycles is not None and self.early_cycles <= FIRST_CYCLE:
            raise ConfigError(f"early_cycles must exceed {FIRST_CYCLE}")
        if not 0.5 < self.eol_fraction < 1:
            raise ConfigError("eol_fraction must lie in (0.5, 1)")
        if self.rate_basis not in ("measured", "model"):
            raise ConfigError("rate_basis must be 'measured' or 'model'")
        if self.trajectory_pooling not in ("battery", "domain"):
            raise ConfigError("trajectory_pooling must be 'battery' or 'domain'")
        if self.lifetime_basis not in ("eol", "data"):
            raise ConfigError("lifetime_basis must be 'eol' or 'data'")
        if not self.source_temperatures:
            raise ConfigError("at least one source temperature is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_temperatures"] = list(self.source_temperatures)
        d["window"] = list(self.window)
        return d


@dataclass(frozen=True, eq=False)
class TrajectoryPrediction:
    battery_id: str
    cycles: np.ndarray
    y: np.ndarray
    yhat: np.ndarray
    lifetime: int
    early_budget: int
    mape_overall: float
    mape_extrapolated: float
    mape_by_stage: dict
    predicted_eol_cycle: int | None
    true_eol_cycle: int | None

    def to_dict(self) -> dict:
        return {
            "battery_id": self.battery_id,
            "lifetime": self.lifetime,
            "early_budget": self.early_budget,
            "mape_overall": self.mape_overall,
            "mape_extrapolated": self.mape_extrapolated,
            "mape_by_stage": dict(self.mape_by_stage),
            "predicted_eol_cycle": self.predicted_eol_cycle,
            "true_eol_cycle": self.true_eol_cycle,
        }


def mape(y: Sequence[float], yhat: Sequence[float]) -> float:
    """sum|y - yhat| / sum(y) * 100."""
    y = np.asarray(y, float)
    yhat = np.asarray(yhat, float)
    if y.shape != yhat.shape:
        raise LengthMismatch(f"lengths differ: {y.shape} vs {yhat.shape}")
    denom = float(np.sum(y))
    if not denom > 0:
        raise ZeroDenominator("sum of ground truth must be positive")
    return float(np.sum(np.abs(y - yhat)) / denom * 100.0)


def stage_slices(n: int, fraction: float = STAGE_FRACTION) -> dict[str, slice]:
    """First, middle and last ``fraction`` of n points (disjoint, equal size)."""
    m = max(1, int(round(fraction * n)))
    mid0 = (n - m) // 2
    return {"early": slice(0, m), "mid": slice(mid0, mid0 + m), "late": slice(n - m, n)}


def first_crossing(cycles: np.ndarray, soh: np.ndarray, eol: float) -> int | None:
    below = np.flatnonzero(soh < eol)
    return int(cycles[below[0]]) if len(below) else None


# ---------------------------------------------------------------------------
# chemical-process model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChemicalModel:
    model: MLPModel
    in_stats: NormStats
    out_stats: NormStats
    heldout_rmse: np.ndarray

    def predict(self, imv: np.ndarray, cycles: np.ndarray) -> np.ndarray:
        """Raw-unit in-cycle features (IDs 11-52) for an IMV vector over cycles."""
        x = self.in_stats.transform(chemical_inputs(imv, cycles))
        return self.out_stats.inverse(self.model.forward(x))


def train_chemical_process(sources: Sequence[BatteryData], cfg: TrainConfig, split: float = 0.75,
                           seed: int = 0) -> ChemicalModel:
    """Map [U1..U9, cycle] to the 42 in-cycle features on pooled sources, with
    a per-temperature random row split for held-out RMSE (normalized units)."""
    if not sources:
        raise InsufficientSourceData("no source batteries")
    x = np.vstack([chemical_inputs(b.imv, b.cycles) for b in sources])
    y = np.vstack([b.features[:, IN_COLS] for b in sources])
    temps = np.concatenate([np.full(len(b.cycles), b.temperature) for b in sources])
    if len(x) < 8:
        raise InsufficientSourceData(f"only {len(x)} source rows")
    rng = np.random.default_rng(seed)
    train = np.zeros(len(x), bool)
    for t in np.unique(temps):
        rows = np.flatnonzero(temps == t)
        pick = rng.permutation(rows)[: int(round(split * len(rows)))]
        train[pick] = True
    in_stats = fit_norm(x[train])
    out_stats = fit_norm(y[train], FEATURE_NAMES[10:])
    xn, yn = in_stats.transform(x), out_stats.transform(y)
    model, _ = mlp_train(mlp_new(x.shape[1], y.shape[1], seed), xn[train], yn[train], cfg)
    test = ~train
    if test.any():
        rmse = np.sqrt(np.mean((model.forward(xn[test]) - yn[test]) ** 2, axis=0))
    else:
        rmse = np.full(y.shape[1], np.nan)
    return ChemicalModel(model, in_stats, out_stats, rmse)


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

def domain_mean(batteries: Sequence[BatteryData], cols=IN_COLS) -> tuple[np.ndarray, np.ndarray]:
    """Mean feature trajectory over the batteries of one domain, truncated to
    the shortest battery."""
    first = max(int(b.cycles[0]) for b in batteries)
    last = min(int(b.cycles[-1]) for b in batteries)
    if last <= first:
        raise InsufficientSourceData("source batteries share no cycle range")
    cycles = np.arange(first, last + 1)
    stack = [b.features[(b.cycles >= first) & (b.cycles <= last)][:, cols] for b in batteries]
    return cycles, np.mean(stack, axis=0)


def source_trajectories(sources: Sequence[BatteryData], chem: ChemicalModel | None, basis: str,
                        horizon_cycle: int) -> dict[float, tuple[np.ndarray, np.ndarray]]:
    """Per source temperature: (cycles, raw in-cycle features)."""
    out = {}
    for t in sorted({b.temperature for b in sources}):
        group = [b for b in sources if b.temperature == t]
        if basis == "measured":
            out[t] = domain_mean(group)
        else:
            cycles = np.arange(FIRST_CYCLE, horizon_cycle + 1)
            out[t] = (cycles, np.mean([chem.predict(b.imv, cycles) for b in group], axis=0))
    return out


def _robust_at(r_src: np.ndarray, r_tgt: np.ndarray) -> np.ndarray:
    """Per-feature AT = r_t / r_s. Features whose source rate is below the
    floor, or whose ratio falls outside [1/AT_MAX, AT_MAX], take the median
    of the reliable ratios (1 when none is reliable)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        at = r_tgt / r_src
    # quantized features (whole-second times) can give wild ratios over a short window
    ok = (np.abs(r_src) >= AT_RATE_FLOOR) & np.isfinite(at) & (at >= 1.0 / AT_MAX) & (at <= AT_MAX)
    fill = float(np.median(at[ok])) if ok.any() else 1.0
    return np.where(ok, at, fill)


@dataclass(frozen=True, eq=False)
class TargetTransfer:
    plan: TransferPlan
    sources: tuple[SourceRates, ...]
    window: RateWindow


def plan_transfer(target: BatteryData, early_cycle: int, trajectories: dict, stats: NormStats,
                  window: tuple[int, int, int], no_transfer: bool) -> TargetTransfer:
    """Rates, AT scores and weights for one target in normalized units."""
    early = target.upto(early_cycle)
    tgt = stats.transform(early.features)[:, IN_COLS]
    win = RateWindow.fit(len(tgt), *window)
    offset = int(early.cycles[0])
    r_tgt = aging_rates(tgt, win)
    temps = sorted(trajectories)
    if no_transfer:
        temps = [min(temps, key=lambda t: (abs(t - target.temperature), t))]
    src_rates, per_cycle = {}, []
    for t in temps:
        cycles, raw = trajectories[t]
        full = np.zeros((len(raw), len(FEATURE_NAMES)))
        full[:, IN_COLS] = raw
        norm = stats.transform(full)[:, IN_COLS]
        k0 = offset - int(cycles[0])
        if k0 < 0 or k0 + win.last >= len(norm):
            raise WindowOutOfRange(f"source at {t:.2f} K does not cover the rate window")
        src_rates[t] = aging_rates(norm[k0:], win)
        per_cycle.append(SourceRates(t, int(cycles[0]), per_cycle_rates(norm)))
    if no_transfer:
        t = temps[0]
        ones = np.ones(len(IN_COLS))
        plan = TransferPlan((SourcePlan(t, src_rates[t], ones, ones),), target.temperature, win)
    else:
        ats = np.stack([_robust_at(src_rates[t], r_tgt) for t in temps])
        w = source_weights_columns(ats)
        plan = TransferPlan(tuple(SourcePlan(t, src_rates[t], ats[k], w[k]) for k, t in enumerate(temps)),
                            target.temperature, win)
    return TargetTransfer(plan, tuple(per_cycle), win)


def predict_target_features(target: BatteryData, early_cycle: int, transfer: TargetTransfer,
                            stats: NormStats, horizon_cycle: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized feature rows for cycles FIRST_CYCLE..horizon_cycle: measured
    up to ``early_cycle``, chain-extrapolated from the last measured row
    afterwards. IMV and T columns are carried unchanged."""
    early = target.upto(early_cycle)
    norm = stats.transform(early.features)
    c0 = int(early.cycles[-1])
    horizon = max(0, horizon_cycle - c0)
    chain = chain_extrapolate(norm[-1, IN_COLS], transfer.sources, transfer.plan, horizon, c0)
    ext = np.repeat(norm[-1:], horizon, axis=0)
    ext[:, IN_COLS] = chain[1:]
    cycles = np.concatenate([early.cycles, np.arange(c0 + 1, c0 + horizon + 1)])
    return cycles, np.vstack([norm, ext])


# ---------------------------------------------------------------------------
# trajectory model
# ---------------------------------------------------------------------------

def trajectory_columns(no_imv: bool) -> np.ndarray:
    return IN_COLS if no_imv else np.concatenate([IMV_COLS, IN_COLS])


@dataclass(frozen=True, eq=False)
class TrajectoryModel:
    model: MLPModel
    columns: np.ndarray
    y_lo: float
    y_hi: float

    def predict(self, normalized_rows: np.ndarray) -> np.ndarray:
        z = self.model.forward(normalized_rows[:, self.columns])[:, 0]
        return self.y_lo + z * (self.y_hi - self.y_lo)

    def predict_columns(self, x: np.ndarray) -> np.ndarray:
        """Prediction from rows that already hold only ``columns``."""
        return self.y_lo + self.model.forward(x)[:, 0] * (self.y_hi - self.y_lo)

    def to_dict(self) -> dict:
        return {"mlp": self.model.to_dict(), "columns": self.columns.tolist(),
                "y_lo": self.y_lo, "y_hi": self.y_hi}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryModel":
        return cls(MLPModel.from_dict(d["mlp"]), np.asarray(d["columns"], int), float(d["y_lo"]), float(d["y_hi"]))


def train_trajectory(features: np.ndarray, soh: np.ndarray, cfg: TrainConfig, no_imv: bool = False,
                     seed: int = 0) -> TrajectoryModel:
    """Fit SOH from normalized feature rows (42 in-cycle columns, plus the 9
    IMV columns unless ``no_imv``)."""
    if len(features) < 2:
        raise InsufficientSourceData("trajectory model needs at least 2 rows")
    cols = trajectory_columns(no_imv)
    lo, hi = float(np.min(soh)), float(np.max(soh))
    if hi - lo < 1e-12:
        hi = lo + 1.0
    y = (np.asarray(soh) - lo) / (hi - lo)
    model, _ = mlp_train(mlp_new(len(cols), 1, seed), features[:, cols], y[:, None], cfg)
    return TrajectoryModel(model, cols, lo, hi)


# ---------------------------------------------------------------------------
# empirical benchmark
# ---------------------------------------------------------------------------

def benchmark_empirical(source_curves: Sequence[tuple[np.ndarray, np.ndarray]],
                        target_early: tuple[np.ndarray, np.ndarray], degree: int,
                        eval_cycles: np.ndarray, cond_limit: float = 1e12) -> np.ndarray:
    """Polynomial capacity-vs-cycle fit on the pooled source curves, shifted by
    the mean early-cycle difference of the target."""
    if degree < 0:
        raise ValueError("degree must be non-negative")
    ce, ye = (np.asarray(a, float) for a in target_early)
    if len(ce) == 0:
        raise InsufficientSourceData("target early data is empty")
    c = np.concatenate([np.asarray(s[0], float) for s in source_curves])
    y = np.concatenate([np.asarray(s[1], float) for s in source_curves])
    lo, hi = c.min(), c.max()
    scale = (hi - lo) / 2 or 1.0
    u = (c - (lo + hi) / 2) / scale
    vander = np.vander(u, degree + 1)
    if np.linalg.cond(vander) > cond_limit:
        raise IllConditionedFit(f"degree-{degree} fit is ill-conditioned")
    coef, *_ = np.linalg.lstsq(vander, y, rcond=None)

    def poly(x):
        return np.vander((np.asarray(x, float) - (lo + hi) / 2) / scale, degree + 1) @ coef

    shift = float(np.mean(ye - poly(ce)))
    return poly(eval_cycles) + shift


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def early_budget(target: BatteryData, cfg: VerificationConfig) -> tuple[int, int]:
    """(lifetime cycle, last early cycle)."""
    life = target.lifetime(cfg.eol_fraction) if cfg.lifetime_basis == "eol" else int(target.cycles[-1])
    if cfg.early_cycles is not None:
        early = cfg.early_cycles
    else:
        early = int(math.ceil(cfg.early_fraction * life))
    early = min(max(early, FIRST_CYCLE + 1), int(target.cycles[-1]))
    return life, early


def score(target: BatteryData, cycles: np.ndarray, soh_hat: np.ndarray, life: int, early: int,
          eol: float) -> TrajectoryPrediction:
    keep = (target.cycles <= life)
    y = target.soh[keep]
    tc = target.cycles[keep]
    pos = np.searchsorted(cycles, tc)
    yhat = soh_hat[pos]
    stages = {k: mape(y[s], yhat[s]) for k, s in stage_slices(len(y)).items()}
    ext = tc > early
    return TrajectoryPrediction(
        target.battery_id, tc, y * target.nominal, yhat * target.nominal, life, early,
        mape(y, yhat), mape(y[ext], yhat[ext]) if ext.any() else 0.0, stages,
        first_crossing(cycles, soh_hat, eol), first_crossing(target.cycles, target.soh, eol),
    )


@dataclass
class VerificationResult:
    config: VerificationConfig
    predictions: list[TrajectoryPrediction]
    plans: dict[str, TransferPlan]
    chemical_rmse: np.ndarray | None
    benchmark: list[TrajectoryPrediction] = field(default_factory=list)

    @property
    def mape_overall(self) -> float:
        return float(np.mean([p.mape_overall for p in self.predictions]))

    def stage_mape(self, stage: str) -> float:
        return float(np.mean([p.mape_by_stage[stage] for p in self.predictions]))

    def to_dict(self) -> dict:
        d = {
            "config": self.config.to_dict(),
            "mape_overall": self.mape_overall,
            "mape_by_stage": {k: self.stage_mape(k) for k in ("early", "mid", "late")},
            "batteries": [p.to_dict() for p in self.predictions],
            "transfer_plans": {k: v.to_dict() for k, v in self.plans.items()},
        }
        if self.chemical_rmse is not None:
            d["chemical_heldout_rmse"] = dict(zip(FEATURE_NAMES[10:], map(float, self.chemical_rmse)))
        if self.benchmark:
            d["benchmark_model4"] = {
                "mape_overall": float(np.mean([p.mape_overall for p in self.benchmark])),
                "batteries": [p.to_dict() for p in self.benchmark],
            }
        return d


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except ProtoVerifyError as exc:
        raise StageError(name, exc) from exc


def verify_prototype(cfg: VerificationConfig, sources: Sequence[BatteryData], targets: Sequence[BatteryData],
                     benchmark_degree: int | None = 3, chem: ChemicalModel | None = None) -> VerificationResult:
    """Run the full pipeline for every target battery."""
    srcs = [b for b in sources if any(abs(b.temperature - t) < 1e-6 for t in cfg.source_temperatures)]
    if not srcs:
        raise StageError("select", InsufficientSourceData("no batteries at the source temperatures"))
    tgts = [b for b in targets if abs(b.temperature - cfg.target_temperature) < 1e-6]
    if not tgts:
        raise StageError("select", InsufficientSourceData("no batteries at the target temperature"))

    stats = _stage("normalize", fit_norm, np.vstack([b.features for b in srcs]), FEATURE_NAMES)
    if chem is None and cfg.rate_basis == "model":
        chem = _stage("chemical", train_chemical_process, srcs, cfg.chemical, cfg.train_split, cfg.seed)
    horizon_cycle = max(int(b.cycles[-1]) for b in tgts)
    trajectories = _stage("rates", source_trajectories, srcs, chem, cfg.rate_basis, horizon_cycle)

    src_rows = np.vstack([stats.transform(b.features) for b in srcs])
    src_soh = np.concatenate([b.soh for b in srcs])

    budgets = {b.battery_id: early_budget(b, cfg) for b in tgts}
    shared = None
    if cfg.trajectory_pooling == "domain":
        rows = [src_rows] + [stats.transform(b.upto(budgets[b.battery_id][1]).features) for b in tgts]
        ys = [src_soh] + [b.upto(budgets[b.battery_id][1]).soh for b in tgts]
        shared = _stage("trajectory", train_trajectory, np.vstack(rows), np.concatenate(ys), cfg.trajectory,
                        cfg.no_imv, cfg.seed)

    preds, plans, bench = [], {}, []
    for b in tgts:
        life, early = budgets[b.battery_id]
        transfer = _stage("transfer", plan_transfer, b, early, trajectories, stats, cfg.window, cfg.no_transfer)
        plans[b.battery_id] = transfer.plan
        cycles, rows = _stage("extrapolate", predict_target_features, b, early, transfer, stats,
                              max(life, int(b.cycles[-1])))
        if shared is None:
            e = b.upto(early)
            traj = _stage("trajectory", train_trajectory,
                          np.vstack([src_rows, stats.transform(e.features)]),
                          np.concatenate([src_soh, e.soh]), cfg.trajectory, cfg.no_imv, cfg.seed)
        else:
            traj = shared
        soh_hat = traj.predict(rows)
        preds.append(_stage("score", score, b, cycles, soh_hat, life, early, cfg.eol_fraction))
        if benchmark_degree is not None:
            nearest = min({s.temperature for s in srcs}, key=lambda t: (abs(t - b.temperature), t))
            curves = [(s.cycles, s.soh) for s in srcs if s.temperature == nearest]
            e = b.upto(early)
            est = _stage("benchmark", benchmark_empirical, curves, (e.cycles, e.soh), benchmark_degree, cycles)
            bench.append(_stage("score", score, b, cycles, est, life, early, cfg.eol_fraction))
    return VerificationResult(cfg, preds, plans, None if chem is None else chem.heldout_rmse, bench)
