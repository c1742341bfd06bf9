"""Shared builders for tests: analytic cycles with closed-form features and
the synthetic fleets used by the end-to-end checks."""

from __future__ import annotations

import functools
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from protoverify.dataset import ChargingProtocol, CycleRecord
from protoverify.simulate import CellParams, CellSimulator, FleetConfig, calibrate_fade_split, cell_parameters
from protoverify.verify import simulate_battery_data

C25, C35, C45, C55 = 298.15, 308.15, 318.15, 328.15
VARIABILITY = dict(imv_scale=0.01, capacity_cv=0.01, resistance_cv=0.05, kinetics_cv=0.05)

# criterion number -> "PASS|FAIL ..." line, printed in the terminal summary
ACCEPTANCE: dict[str, str] = {}


def record(criterion: int, ok: bool, detail: str, label: str = "") -> bool:
    key = f"{criterion} {label}".strip()
    line = f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}"
    ACCEPTANCE[key] = line
    print(line)
    return ok


# ---------------------------------------------------------------------------
# analytic piecewise-linear cycle
# ---------------------------------------------------------------------------

@dataclass
class AnalyticCycle:
    record: CycleRecord
    expected: dict


def analytic_cycle(seed: int = 0, dt: float = 1.0, protocol: ChargingProtocol | None = None,
                   cycle_index: int = 4) -> AnalyticCycle:
    """A cycle whose charge steps are straight voltage ramps (step 9 dips
    then climbs), followed by a rest that drops then recovers linearly and a
    linear 1C discharge. ``expected`` holds every in-cycle feature worked
    out by hand from the construction parameters."""
    rng = np.random.default_rng(seed)
    p = protocol or ChargingProtocol()
    cur = p.step_currents
    n = rng.integers(40, 90, size=9)                # samples per step
    slope = rng.uniform(2e-4, 2e-3, size=9)         # V/s
    jump = rng.uniform(0.02, 0.12, size=8)          # step-to-step voltage change (down: current falls)
    start = np.empty(9)
    start[0] = 3.3 + rng.uniform(0, 0.05)
    # step 9: drop for m9 samples at rate -d9 then rise at rate +slope[8]
    m9, d9 = int(rng.integers(5, 15)), rng.uniform(1e-3, 3e-3)

    t, i, v = [], [], []
    t0 = 0.0
    ends = np.empty(9)
    for k in range(9):
        if k > 0:
            start[k] = ends[k - 1] + np.sign(cur[k] - cur[k - 1]) * jump[k - 1]
        tk = t0 + dt * np.arange(n[k])
        if k < 8:
            vk = start[k] + slope[k] * (tk - t0)
        else:
            j = np.arange(n[k])
            vk = np.where(j <= m9, start[k] - d9 * dt * j, start[k] - d9 * dt * m9 + slope[k] * dt * (j - m9))
        ends[k] = vk[-1]
        t.append(tk)
        i.append(np.full(n[k], cur[k]))
        v.append(vk)
        t0 = tk[-1] + dt
    # rest: linear drop over mr samples by depth D, then a slower recovery
    nr, mr = 120, 40
    depth = rng.uniform(0.05, 0.15)
    jr = np.arange(nr)
    rest_v0 = ends[8] - rng.uniform(0.01, 0.05)
    vr = np.where(jr <= mr, rest_v0 - depth * jr / mr, rest_v0 - depth + 0.2 * depth * (jr - mr) / (nr - mr))
    tr = t0 + dt * jr
    t.append(tr)
    i.append(np.zeros(nr))
    v.append(vr)
    t0 = tr[-1] + dt
    # discharge
    nd = 200
    td = t0 + dt * np.arange(nd)
    t.append(td)
    i.append(np.full(nd, -p.discharge_current))
    v.append(vr[-1] - 0.05 - 5e-3 * np.arange(nd))

    t, i, v = np.concatenate(t), np.concatenate(i), np.concatenate(v)
    # left Riemann sum: q[j] is the charge passed before sample j
    q = np.concatenate([[0.0], np.cumsum(i[:-1] * dt)]) / 3600.0
    rec = CycleRecord.from_samples(cycle_index, t, i, v, q, 318.15)

    # closed form
    q_end = np.cumsum(cur * n * dt) - cur * dt          # at the last sample of each step
    vg = slope.copy()
    # step 9 (dip then climb): mean of centered differences with one-sided ends
    v9 = v[int(n[:8].sum()):int(n.sum())]
    vg[8] = (1.5 * v9[-1] - 0.5 * v9[-2] + 0.5 * v9[1] - 1.5 * v9[0]) / (len(v9) * dt)
    rl = np.array([(ends[k] - start[k]) / cur[k] for k in range(9)])
    ro = np.array([(start[k + 1] - ends[k]) / (cur[k + 1] - cur[k]) for k in range(8)])
    exp = {
        "VC89": start[8] - ends[7],
        "VD9": d9 * dt * m9,
        "tVD9": m9 * dt,
        "ReVC": ends[8] - rest_v0,
        "ReVD": depth,
        "tReVD": 0.8 * mr * dt,
        "RVg": vg[1] / vg[0],
    }
    for k in range(9):
        exp[f"Vg{k + 1}"] = vg[k]
        exp[f"Q{k + 1}"] = q_end[k] / 3600.0
        exp[f"RL{k + 1}"] = rl[k]
    for k in range(8):
        exp[f"RO{k + 1}"] = ro[k]
    return AnalyticCycle(rec, exp)


def plateau_cycle(v_of_soc=lambda soc: 3.0 + soc, cycle_index: int = 1, currents=None, jitter: float = 0.0,
                  seed: int = 0, temperature: float = 298.15, n_step: int = 30, dt: float = 1.0,
                  rest_v=None, n_discharge: int = 60) -> CycleRecord:
    """Constant-current steps (optionally with relative current jitter)
    whose voltage is a function of the cycle's own renormalized SOC, a rest
    and a 1C discharge."""
    p = ChargingProtocol()
    cur = np.asarray(p.step_currents if currents is None else currents, float)
    rng = np.random.default_rng(seed)
    i_ch = np.repeat(cur, n_step)
    if jitter:
        i_ch = i_ch * (1.0 + rng.uniform(-jitter, jitter, size=len(i_ch)))
    n_ch = len(i_ch)
    rest = np.asarray(rest_v if rest_v is not None else np.linspace(0, -0.05, 20))
    i = np.concatenate([i_ch, np.zeros(len(rest)), np.full(n_discharge, -p.discharge_current)])
    t = dt * np.arange(len(i))
    q = np.concatenate([[0.0], np.cumsum(i[:-1] * dt)]) / 3600.0
    soc = q[:n_ch] / q[n_ch - 1] * 0.97
    v_ch = v_of_soc(soc)
    v_rest = v_ch[-1] - 0.02 + rest
    v_dis = v_rest[-1] - 0.1 - 1e-3 * np.arange(n_discharge)
    v = np.concatenate([v_ch, v_rest, v_dis])
    return CycleRecord.from_samples(cycle_index, t, i, v, q, temperature)


# ---------------------------------------------------------------------------
# synthetic fleets
# ---------------------------------------------------------------------------

def simulate_group(temps, n, seed, n_cycles, stop_soh=None, params=None, prefix="", **variability):
    cfg = FleetConfig(temperatures=tuple(temps), cells_per_temperature=n, seed=seed,
                      params=params or CellParams(), **variability)
    return [simulate_battery_data(CellSimulator(p, T, battery_id=prefix + bid), n_cycles, stop_soh)
            for bid, T, p in cell_parameters(cfg)]


def multi_source_fleet(seed: int, params=None, variability=VARIABILITY):
    """6 cells at each of 25 and 55 C as sources (400 cycles), 4 cells at
    each of 35 and 45 C as targets (run to 73% SOH)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        src = simulate_group((C25, C55), 6, seed, 400, None, params, "src", **variability)
        tgt = simulate_group((C35, C45), 4, seed + 1000, 2000, 0.73, params, "tgt", **variability)
    return src, tgt


def uni_source_fleet(seed: int):
    """6 cells at 55 C (520 cycles) and 4 targets at each of 25/35/45 C."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        src = simulate_group((C55,), 6, seed, 520, None, None, "src", **VARIABILITY)
        tgt = simulate_group((C25, C35, C45), 4, seed + 1000, 2000, 0.73, None, "tgt", **VARIABILITY)
    return src, tgt


def fade_split_params(share: float = 0.85, temperature: float = C45) -> CellParams:
    return calibrate_fade_split(CellParams(), temperature, share)


def zero_noise(params: CellParams) -> CellParams:
    return replace(params, noise_v=0.0)


@functools.lru_cache(maxsize=None)
def cached_multi_source(seed: int):
    """(sources, targets, seconds spent simulating); shared by the
    end-to-end and ablation criteria."""
    t0 = time.perf_counter()
    src, tgt = multi_source_fleet(seed)
    return src, tgt, time.perf_counter() - t0
