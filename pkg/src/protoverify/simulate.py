"""Reduced-order synthetic cell and fleet generator.

A lumped zero-D cell runs the 9-step protocol:

    V = OCV(x) + I*R_ohm + eta_act + eta_con

``eta_act`` relaxes toward ``a*asinh(I / 2 i0)`` with the double-layer time
constant and ``eta_con`` toward ``I*R_diff`` with the diffusion time constant.
Both relaxations are integrated exactly for piecewise-constant current, so a
whole constant-current segment is evaluated in one vectorized pass.

Aging is SEI growth with parabolic (diffusion-limited) kinetics,
d(delta^2)/dc = 2 k0 exp(-alpha/T), which consumes lithium inventory (lowers
the effective capacity) and adds film resistance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .dataset import (
    BatteryDataset,
    ChargingProtocol,
    CycleRecord,
    IMVVector,
    probe_imv,
)
from .errors import SocOutOfRange

FARADAY = 96485.33212
GAS_CONSTANT = 8.314462618

# 21-point OCV table with steep ends
DEFAULT_OCV_SOC = tuple(np.round(np.linspace(0.0, 1.0, 21), 10).tolist())
DEFAULT_OCV_VOLTS = (
    2.50, 3.25, 3.42, 3.51, 3.57, 3.61, 3.645, 3.675, 3.705, 3.735, 3.765,
    3.795, 3.83, 3.865, 3.90, 3.935, 3.97, 4.01, 4.06, 4.13, 4.35,
)

CHARGE_DT = 1.0
REST_DT = 10.0
SWITCH_DT = 0.01
MIN_STEP_SAMPLES = 3


@dataclass(frozen=True)
class SEIParams:
    """Lumped SEI-growth coefficients.

    ``k_sei_0`` is the Arrhenius prefactor of the parabolic growth constant
    (thickness^2 per cycle), ``alpha`` the activation temperature E_a/k_B.
    Each unit of thickness removes ``gamma_lli * lli_per_thickness`` Ah of
    cyclable lithium and adds ``beta_r`` ohm of film resistance.
    """

    k_sei_0: float = 1300.0
    alpha: float = 4000.0
    gamma_lli: float = 0.8
    lli_per_thickness: float = 0.25
    beta_r: float = 0.02
    beta_diff: float = 0.004
    delta_min: float = 1e-6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.gamma_lli <= 1:
            raise ValueError("gamma_lli must lie in (0, 1]")

    def growth_constant(self, temperature: float) -> float:
        if math.isinf(self.alpha):
            return 0.0
        return self.k_sei_0 * math.exp(-self.alpha / temperature)


@dataclass(frozen=True)
class CellParams:
    nominal_capacity: float = 1.1
    capacity_margin: float = 1.03
    ocv_soc: tuple[float, ...] = DEFAULT_OCV_SOC
    ocv_volts: tuple[float, ...] = DEFAULT_OCV_VOLTS
    r_ohmic_0: float = 0.030
    r_ct_0: float = 0.015
    r_diff_0: float = 0.020
    tau_dl: float = 5.0
    tau_diff: float = 150.0
    e_ohmic: float = 1200.0
    e_ct: float = 3500.0
    t_ref: float = 298.15
    sei: SEIParams = field(default_factory=SEIParams)
    # per-cell manufacturing variability
    imv_perturbation: float = 0.0
    ocv_offset: float = 0.0
    noise_v: float = 0.0
    activation_cycles: float = 0.0
    activation_gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        soc = np.asarray(self.ocv_soc)
        volts = np.asarray(self.ocv_volts)
        if len(soc) != len(volts) or len(soc) < 2:
            raise ValueError("OCV table must have matching soc/volts of length >= 2")
        if np.any(np.diff(soc) <= 0) or np.any(np.diff(volts) <= 0):
            raise ValueError("OCV curve must be strictly increasing")
        if min(self.r_ohmic_0, self.r_ct_0, self.r_diff_0) <= 0:
            raise ValueError("resistances must be positive")

    @property
    def design_capacity(self) -> float:
        return self.nominal_capacity * self.capacity_margin

    def ocv(self, x):
        return np.interp(x, self.ocv_soc, self.ocv_volts) + self.ocv_offset

    def arrhenius(self, e: float, temperature: float) -> float:
        return math.exp(e * (1.0 / temperature - 1.0 / self.t_ref))


@dataclass(frozen=True)
class SimState:
    soc: float = 0.0
    q_loss_thermo: float = 0.0
    delta_sei: float = 1e-6
    r_ohmic: float = 0.0
    r_ct: float = 0.0
    r_diff: float = 0.0
    eta_act: float = 0.0
    eta_ohm: float = 0.0
    eta_con: float = 0.0
    delta_E: float = 0.0

    @classmethod
    def fresh(cls, params: CellParams, temperature: float, soc: float = 0.0) -> "SimState":
        return cls(
            soc=soc,
            delta_sei=params.sei.delta_min,
            r_ohmic=params.r_ohmic_0 * params.arrhenius(params.e_ohmic, temperature),
            r_ct=params.r_ct_0 * params.arrhenius(params.e_ct, temperature),
            r_diff=params.r_diff_0 * params.arrhenius(params.e_ohmic, temperature),
        )

    def effective_capacity(self, params: CellParams) -> float:
        return params.design_capacity - self.q_loss_thermo


def _activation_target(current, r_ct, temperature):
    a = 2.0 * GAS_CONSTANT * temperature / FARADAY
    i0 = a / (2.0 * r_ct)
    return a * np.arcsinh(np.asarray(current) / (2.0 * i0))


def step_voltage(state: SimState, params: CellParams, current: float, dt: float,
                 temperature: float = 298.15) -> tuple[float, SimState]:
    """Advance the cell by ``dt`` seconds at constant ``current`` and return the
    terminal voltage at the end of the interval together with the new state."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cap = state.effective_capacity(params)
    if abs(current) > 5 * params.nominal_capacity:
        raise ValueError("current exceeds 5C")
    soc = state.soc + current * dt / 3600.0 / cap
    if soc < -1e-9 or soc > 1 + 1e-9:
        raise SocOutOfRange(f"SOC {soc:.4f} left [0, 1]")
    act_target = float(_activation_target(current, state.r_ct, temperature))
    eta_act = act_target + (state.eta_act - act_target) * math.exp(-dt / params.tau_dl)
    con_target = current * state.r_diff
    eta_con = con_target + (state.eta_con - con_target) * math.exp(-dt / params.tau_diff)
    eta_ohm = current * state.r_ohmic
    ocv = float(params.ocv(soc))
    fresh_soc = soc * cap / params.design_capacity
    delta_e = ocv - float(params.ocv(fresh_soc))
    new = replace(state, soc=soc, eta_act=eta_act, eta_con=eta_con, eta_ohm=eta_ohm, delta_E=delta_e)
    return ocv + eta_ohm + eta_act + eta_con, new


def age_one_cycle(state: SimState, params: CellParams, temperature: float) -> SimState:
    """Grow the SEI by one cycle (exact parabolic update) and book the
    resulting lithium loss and resistance rise."""
    k = params.sei.growth_constant(temperature)
    d0 = max(state.delta_sei, params.sei.delta_min)
    d1 = math.sqrt(d0 * d0 + 2.0 * k)
    dd = d1 - state.delta_sei
    sei = params.sei
    return replace(
        state,
        delta_sei=d1,
        q_loss_thermo=state.q_loss_thermo + sei.gamma_lli * sei.lli_per_thickness * dd,
        r_ohmic=state.r_ohmic + sei.beta_r * dd,
        r_diff=state.r_diff + sei.beta_diff * dd,
    )


# ---------------------------------------------------------------------------
# vectorized constant-current segments
# ---------------------------------------------------------------------------

@dataclass
class _Trace:
    t: list = field(default_factory=list)
    i: list = field(default_factory=list)
    v: list = field(default_factory=list)
    q: list = field(default_factory=list)


class _Cell:
    """Mutable integrator used internally; public state is exported as SimState."""

    def __init__(self, params: CellParams, temperature: float, state: SimState):
        self.p = params
        self.T = temperature
        self.state = state
        self.x = state.soc
        self.ea = 0.0
        self.ec = 0.0
        self.q = 0.0
        self.t = 0.0

    def _eval(self, current, times):
        p, s = self.p, self.state
        cap = s.effective_capacity(p)
        q = self.q + current * times / 3600.0
        x = self.x + current * times / 3600.0 / cap
        a_tgt = float(_activation_target(current, s.r_ct, self.T))
        ea = a_tgt + (self.ea - a_tgt) * np.exp(-times / p.tau_dl)
        c_tgt = current * s.r_diff
        ec = c_tgt + (self.ec - c_tgt) * np.exp(-times / p.tau_diff)
        v = p.ocv(x) + current * s.r_ohmic + ea + ec
        return q, x, ea, ec, v

    def run(self, current: float, dt: float, n_max: int, trace: _Trace | None, *,
            v_above=None, v_below=None, q_target=None, duration=None):
        if q_target is not None:
            t_hit = (q_target - self.q) * 3600.0 / current
            times = SWITCH_DT + dt * np.arange(max(int(math.ceil((t_hit - SWITCH_DT) / dt)), 1))
            times = np.append(times[times < t_hit - 1e-9], max(t_hit, SWITCH_DT + 1e-6))
        elif duration is not None:
            times = SWITCH_DT + dt * np.arange(int(round(duration / dt)) + 1)
        else:
            times = SWITCH_DT + dt * np.arange(n_max + 1)
        q, x, ea, ec, v = self._eval(current, times)
        if v_above is not None or v_below is not None:
            hit = v >= v_above if v_above is not None else v <= v_below
            k = int(np.argmax(hit)) if hit.any() else len(times) - 1
            if hit.any() and k < MIN_STEP_SAMPLES - 1:
                end = MIN_STEP_SAMPLES - 1
            elif hit.any() and k > 0:
                limit = v_above if v_above is not None else v_below
                w = (limit - v[k - 1]) / (v[k] - v[k - 1])
                if w < 1e-6:
                    end = k - 1
                else:
                    t_star = times[k - 1] + w * dt
                    times = np.append(times[:k], t_star)
                    q, x, ea, ec, v = self._eval(current, times)
                    end = k
            else:
                end = k
            times, q, x, ea, ec, v = (a[: end + 1] for a in (times, q, x, ea, ec, v))
        if x.max() > 1 + 1e-9 or x.min() < -1e-9:
            raise SocOutOfRange(f"SOC left [0, 1] (min {x.min():.4f}, max {x.max():.4f})")
        if trace is not None:
            trace.t.append(self.t + times)
            trace.i.append(np.full(len(times), current))
            trace.v.append(v)
            trace.q.append(q)
        self.t += times[-1]
        self.q, self.x, self.ea, self.ec = float(q[-1]), float(x[-1]), float(ea[-1]), float(ec[-1])
        return v

    def relax(self):
        self.ea = 0.0
        self.ec = 0.0


def _run_cycle(params: CellParams, protocol: ChargingProtocol, temperature: float, state: SimState,
               cutoffs: Sequence[float] | None, record: bool = True):
    """One full cycle. With ``cutoffs`` None the charge steps end on SOC targets
    (probe cycles), otherwise on the step cut-off voltages."""
    cell = _Cell(params, temperature, state)
    trace = _Trace() if record else None
    currents = protocol.step_currents
    targets = protocol.soc_targets * protocol.nominal_capacity
    for k in range(9):
        incr = protocol.soc_increments[k] * protocol.nominal_capacity
        if cutoffs is None:
            cell.run(currents[k], CHARGE_DT, 0, trace, q_target=targets[k])
        else:
            n_max = int(math.ceil(1.6 * incr * 3600.0 / currents[k] / CHARGE_DT)) + 2
            cell.run(currents[k], CHARGE_DT, n_max, trace, v_above=cutoffs[k])
    q_end = cell.q
    cell.run(0.0, REST_DT, 0, trace, duration=protocol.rest_s)
    n_dis = int(math.ceil(2.0 * 3600.0 / REST_DT))
    cell.run(-protocol.discharge_current, REST_DT, n_dis, trace, v_below=protocol.discharge_cutoff_v)
    capacity = q_end - cell.q
    cell.relax()
    end_state = replace(state, soc=cell.x, eta_act=0.0, eta_con=0.0, eta_ohm=0.0)
    return trace, capacity, end_state


def _trace_arrays(trace: _Trace):
    return (np.concatenate(trace.t), np.concatenate(trace.i), np.concatenate(trace.v),
            np.concatenate(trace.q))


class CellSimulator:
    """Runs one cell: 3 probe cycles that set the cut-off voltages, then
    protocol cycles with aging after every cycle."""

    def __init__(self, params: CellParams, temperature: float, protocol: ChargingProtocol | None = None,
                 battery_id: str = "cell", rng: np.random.Generator | None = None):
        self.params = params
        self.temperature = float(temperature)
        self.protocol = protocol or ChargingProtocol(nominal_capacity=params.nominal_capacity)
        self.battery_id = battery_id
        self.rng = rng if rng is not None else np.random.default_rng(params.seed)
        self.state = SimState.fresh(params, self.temperature)
        self.cycle_index = 0
        self.cutoffs: np.ndarray | None = None
        self.imv: IMVVector | None = None
        self.truth: dict[str, list[float]] = {
            "cycle": [], "capacity": [], "q_loss_thermo": [], "r_ohmic": [], "r_diff": [], "delta_sei": [],
        }

    def _record(self, trace: _Trace, capacity: float) -> CycleRecord:
        t, i, v, q = _trace_arrays(trace)
        if self.params.noise_v > 0:
            v = v + self.rng.normal(0.0, self.params.noise_v, size=len(v))
        return CycleRecord(self.cycle_index, t, i, v, q, self.temperature, capacity)

    def _activation_factor(self) -> float:
        # optional early-life capacity restoration transient, off by default
        p = self.params
        if p.activation_cycles <= 0 or p.activation_gain == 0:
            return 0.0
        return p.activation_gain * math.exp(-self.cycle_index / p.activation_cycles)

    def cycle(self, record: bool = True) -> CycleRecord | None:
        self.cycle_index += 1
        probing = self.cycle_index <= 3
        trace, capacity, end = _run_cycle(
            self.params, self.protocol, self.temperature, self.state,
            None if probing else self.cutoffs, record=True,
        )
        capacity *= 1.0 + self._activation_factor()
        rec = self._record(trace, capacity) if (record or probing) else None
        s = self.state
        self.truth["cycle"].append(self.cycle_index)
        self.truth["capacity"].append(capacity)
        self.truth["q_loss_thermo"].append(s.q_loss_thermo)
        self.truth["r_ohmic"].append(s.r_ohmic)
        self.truth["r_diff"].append(s.r_diff)
        self.truth["delta_sei"].append(s.delta_sei)
        self.state = age_one_cycle(end, self.params, self.temperature)
        if probing:
            self._probes = getattr(self, "_probes", []) + [rec]
            if self.cycle_index == 3:
                self.imv = probe_imv(self._probes, self.protocol)
                self.cutoffs = self.imv.as_array()
        return rec

    def run(self, n_cycles: int, record: bool = True) -> Iterator[CycleRecord]:
        """Yield ``n_cycles`` cycles including the 3 probe cycles."""
        for _ in range(n_cycles):
            try:
                rec = self.cycle(record)
            except SocOutOfRange as exc:
                raise SocOutOfRange(f"{self.battery_id} cycle {self.cycle_index}: {exc}") from None
            if rec is not None:
                yield rec

    def truth_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in self.truth.items()}


# ---------------------------------------------------------------------------
# fleets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FleetConfig:
    """Fleet specification.

    ``imv_scale`` is the standard deviation (V) of the per-cell OCV offset, the
    manufacturing perturbation that the probed cut-off voltages expose.
    ``capacity_cv``, ``resistance_cv`` and ``kinetics_cv`` are relative
    standard deviations of the per-cell capacity, resistances and SEI growth
    prefactor. Per-temperature draws are standardized (zero mean, unit
    variance) when a group has at least two cells.
    """

    temperatures: tuple[float, ...] = (298.15, 308.15, 318.15, 328.15)
    cells_per_temperature: int | tuple[int, ...] = 4
    n_cycles: int = 300
    params: CellParams = field(default_factory=CellParams)
    seed: int = 0
    imv_scale: float = 0.0
    capacity_cv: float = 0.0
    resistance_cv: float = 0.0
    kinetics_cv: float = 0.0
    imv_kinetics_coupling: float = 0.0
    stop_soh: float | None = None

    def counts(self) -> tuple[int, ...]:
        c = self.cells_per_temperature
        return tuple(c) if isinstance(c, (tuple, list)) else (int(c),) * len(self.temperatures)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["temperatures"] = list(self.temperatures)
        return d


@dataclass
class SimulatedCell:
    battery_id: str
    temperature: float
    params: CellParams
    imv: IMVVector
    truth: dict[str, np.ndarray]
    dataset: BatteryDataset | None = None


def _standardized(z: np.ndarray) -> np.ndarray:
    if len(z) < 2:
        return z
    z = z - z.mean()
    sd = z.std()
    return z / sd if sd > 0 else z


def cell_parameters(cfg: FleetConfig) -> list[tuple[str, float, CellParams]]:
    """Deterministic per-cell parameter draws, one RNG stream per temperature
    group derived from the fleet seed."""
    out = []
    for g, (temp, n) in enumerate(zip(cfg.temperatures, cfg.counts())):
        rng = np.random.default_rng([cfg.seed, g])
        z = np.stack([_standardized(rng.standard_normal(n)) for _ in range(4)])
        for c in range(n):
            p = cfg.params
            offset = cfg.imv_scale * z[0, c]
            k_scale = 1.0 + cfg.kinetics_cv * z[3, c]
            if cfg.imv_scale > 0 and cfg.imv_kinetics_coupling:
                # cells whose electrodes sit at a higher potential grow SEI faster
                k_scale *= math.exp(cfg.imv_kinetics_coupling * z[0, c])
            p = replace(
                p,
                capacity_margin=p.capacity_margin * (1.0 + cfg.capacity_cv * z[1, c]),
                r_ohmic_0=p.r_ohmic_0 * (1.0 + cfg.resistance_cv * z[2, c]),
                r_ct_0=p.r_ct_0 * (1.0 + cfg.resistance_cv * z[2, c]),
                sei=replace(p.sei, k_sei_0=p.sei.k_sei_0 * max(k_scale, 0.05)),
                ocv_offset=p.ocv_offset + offset,
                imv_perturbation=cfg.imv_scale,
                seed=int(np.random.SeedSequence([cfg.seed, g, c]).generate_state(1)[0]),
            )
            out.append((f"T{temp - 273.15:.0f}_c{c + 1:02d}", float(temp), p))
    return out


def iter_fleet(cfg: FleetConfig, protocol: ChargingProtocol | None = None) -> Iterator[CellSimulator]:
    for bid, temp, p in cell_parameters(cfg):
        yield CellSimulator(p, temp, protocol, battery_id=bid)


def run_cell(sim: CellSimulator, n_cycles: int, stop_soh: float | None = None,
             keep_cycles: bool = True, on_cycle=None) -> list[CycleRecord]:
    kept = []
    nominal = sim.protocol.nominal_capacity
    for rec in sim.run(n_cycles):
        if on_cycle is not None:
            on_cycle(rec)
        if keep_cycles:
            kept.append(rec)
        if stop_soh is not None and sim.cycle_index > 3 and rec.discharge_capacity / nominal < stop_soh:
            break
    return kept


def simulate_fleet(cfg: FleetConfig, protocol: ChargingProtocol | None = None,
                   keep_cycles: bool = True) -> list[SimulatedCell]:
    """Simulate every cell of the fleet. Cycle records are stored only when
    ``keep_cycles`` is set (they dominate memory for long runs)."""
    cells = []
    for sim in iter_fleet(cfg, protocol):
        kept = run_cell(sim, cfg.n_cycles, cfg.stop_soh, keep_cycles)
        ds = BatteryDataset(sim.battery_id, sim.temperature, tuple(kept), sim.imv) if keep_cycles else None
        cells.append(SimulatedCell(sim.battery_id, sim.temperature, sim.params, sim.imv,
                                   sim.truth_arrays(), ds))
    return cells


# ---------------------------------------------------------------------------
# fade attribution
# ---------------------------------------------------------------------------

def fade_components(params: CellParams, temperature: float, delta: float,
                    protocol: ChargingProtocol | None = None) -> tuple[float, float]:
    """Capacity lost (Ah) at SEI thickness ``delta`` through lithium loss alone
    and through resistance growth alone, each measured against the fresh cell
    cycled with its own probed cut-offs."""
    protocol = protocol or ChargingProtocol(nominal_capacity=params.nominal_capacity)
    sim = CellSimulator(params, temperature, protocol)
    list(sim.run(3, record=False))
    fresh = SimState.fresh(params, temperature, soc=sim.state.soc)
    sei = params.sei
    lli = replace(fresh, q_loss_thermo=sei.gamma_lli * sei.lli_per_thickness * delta)
    res = replace(fresh, r_ohmic=fresh.r_ohmic + sei.beta_r * delta, r_diff=fresh.r_diff + sei.beta_diff * delta)
    caps = []
    for st in (fresh, lli, res):
        # two cycles so the starting SOC settles for the modified state
        _, _, st2 = _run_cycle(params, protocol, temperature, st, sim.cutoffs, record=False)
        _, cap, _ = _run_cycle(params, protocol, temperature, st2, sim.cutoffs, record=False)
        caps.append(cap)
    return caps[0] - caps[1], caps[0] - caps[2]


def thermodynamic_share(params: CellParams, temperature: float, delta: float) -> float:
    thermo, kinetic = fade_components(params, temperature, delta)
    return thermo / (thermo + kinetic)


def calibrate_fade_split(params: CellParams, temperature: float, target_share: float,
                         delta: float = 1.0, tol: float = 1e-3) -> CellParams:
    """Scale the resistance-growth coefficients so that lithium loss accounts
    for ``target_share`` of the capacity fade at thickness ``delta``."""
    def share(scale):
        sei = replace(params.sei, beta_r=params.sei.beta_r * scale, beta_diff=params.sei.beta_diff * scale)
        return thermodynamic_share(replace(params, sei=sei), temperature, delta)

    lo, hi = 1e-3, 1.0
    while share(hi) > target_share:
        hi *= 2.0
        if hi > 1e4:
            raise ValueError("cannot reach the requested fade split")
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        s = share(mid)
        if abs(s - target_share) < tol:
            break
        if s > target_share:
            lo = mid
        else:
            hi = mid
    sei = replace(params.sei, beta_r=params.sei.beta_r * mid, beta_diff=params.sei.beta_diff * mid)
    return replace(params, sei=sei)


def truth_to_json(cell: SimulatedCell) -> dict:
    return {
        "battery_id": cell.battery_id,
        "temperature": cell.temperature,
        "imv": list(cell.imv.u),
        **{k: v.tolist() for k, v in cell.truth.items()},
    }


def warn_once(msg: str):
    warnings.warn(msg, stacklevel=2)
