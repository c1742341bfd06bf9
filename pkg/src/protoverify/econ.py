"""Techno-economic and environmental evaluation of recycling routes for
defective cells, plus the scrap-rate forecast.

A scenario is a TOML document (see ``data/econ_default.toml``). Each route
is an ordered list of stages; mass flows from one stage to the next through
streams with fate ``to_next``. Everything is reported per kg of cells fed.
"""

from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import (ConfigError, DegenerateAnchors, IncompleteRoute, MissingInput,
                     MissingIntensity, MissingPrice)

CHEMISTRIES = ("LFP", "NMC811")
METHODS = ("refined_direct", "direct", "hydro", "pyro")
FATES = ("product", "to_next", "burn", "landfill", "discharge", "cathode_elements")
LI_MOLAR = 6.941
LI2CO3_PER_LI = 73.89 / (2 * LI_MOLAR)
ELEMENT_PRODUCTS = {"ni": "nickel", "co": "cobalt", "mn": "manganese"}
WEIGHT_TOL = 1.0025
SCRAP_ANCHORS = ((2023, 0.0767), (2030, 0.0434))


def load_scenario_data(path: str | Path | None = None) -> dict:
    """Parse a scenario TOML; None loads the bundled default."""
    if path is None:
        text = resources.files("protoverify").joinpath("data/econ_default.toml").read_text()
    else:
        p = Path(path)
        if not p.exists():
            raise MissingInput(str(p))
        text = p.read_text()
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"scenario is not valid TOML: {exc}") from exc


@dataclass(frozen=True)
class EconScenario:
    chemistry: str
    method: str
    soh: float
    data: dict = field(repr=False)

    def __post_init__(self):
        if self.chemistry not in CHEMISTRIES:
            raise ConfigError(f"unknown chemistry {self.chemistry!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if not 0.0 < self.soh <= 1.0:
            raise ConfigError("soh must be in (0, 1]")
        validate(self.data)

    @classmethod
    def default(cls, chemistry="LFP", method="refined_direct", soh=0.95, path=None) -> "EconScenario":
        return cls(chemistry, method, soh, load_scenario_data(path))

    def replace(self, **kw) -> "EconScenario":
        d = {"chemistry": self.chemistry, "method": self.method, "soh": self.soh, "data": self.data}
        d.update(kw)
        return EconScenario(**d)

    def with_data(self, fn) -> "EconScenario":
        """Copy with ``fn`` applied to a deep copy of the data dict."""
        data = copy.deepcopy(self.data)
        fn(data)
        return self.replace(data=data)


def validate(data: dict) -> None:
    for key in ("plant", "costs", "prices", "routes", "stages", "cathode"):
        if key not in data:
            raise ConfigError(f"scenario is missing [{key}]")
    for group in ("consumed", "recovered"):
        for name, price in data["prices"].get(group, {}).items():
            if price < 0:
                raise ConfigError(f"negative price for {name}")
    for name, stage in data["stages"].items():
        for chem in CHEMISTRIES:
            total = sum(s.get(chem, 0.0) for s in stage.get("streams", []))
            if total > WEIGHT_TOL:
                raise ConfigError(f"stage {name}: {chem} weight fractions sum to {total:.4f}")
        for s in stage.get("streams", []):
            if s.get("fate") not in FATES:
                raise ConfigError(f"stage {name}: unknown fate {s.get('fate')!r}")
            rates = [s.get("recovery", 1.0), s.get("to_next", 0.0)] + [s.get(e, 0.0) for e in ("li", "ni", "co", "mn")]
            if any(r < 0 or r > 1 for r in rates):
                raise ConfigError(f"stage {name}: recovery rates must lie in [0, 1]")
            if s.get("recovery", 1.0) + s.get("to_next", 0.0) > 1.0 + 1e-12:
                raise ConfigError(f"stage {name}: {s['material']} splits exceed its mass")


# ---------------------------------------------------------------------------
# mass flow
# ---------------------------------------------------------------------------

@dataclass
class Flows:
    """Per-kg-of-cells quantities accumulated over a route."""

    products: dict = field(default_factory=dict)      # price key -> kg sold
    recovered: float = 0.0                            # kg of feed material recovered
    consumed: dict = field(default_factory=dict)      # reagent -> kg
    burned: float = 0.0
    landfilled: float = 0.0
    discharged: float = 0.0
    water_gal: float = 0.0
    wastewater_gal: float = 0.0
    kwh: float = 0.0
    labor_h: float = 0.0
    capital_per_year: float = 0.0
    fixed_cost: float = 0.0

    def add(self, bucket: dict, key: str, kg: float):
        bucket[key] = bucket.get(key, 0.0) + kg


def _lithium_demand(stage: dict, chem: str, data: dict, cathode_kg: float, soh: float,
                    flows: Flows) -> None:
    sup = stage.get("lithium_supplement")
    if not sup:
        return
    li_lost = (1.0 - soh) * data["cathode"][chem]["li"] * cathode_kg
    flows.add(flows.consumed, sup["reagent"], li_lost / LI_MOLAR * sup["molar_mass"] * sup["excess"])


def route_flows(sc: EconScenario) -> Flows:
    data, chem = sc.data, sc.chemistry
    stages = data["routes"].get(sc.method)
    if not stages:
        raise IncompleteRoute(f"route {sc.method!r} has no stages")
    plant = data["plant"]
    hours = plant["days_per_year"] * plant["hours_per_day"]
    through = plant["throughput_kg_per_year"]
    flows = Flows()
    mass_in = 1.0
    for k, name in enumerate(stages):
        stage = data["stages"].get(name)
        if stage is None or "streams" not in stage:
            raise IncompleteRoute(f"stage {name!r} is not defined")
        last = k == len(stages) - 1
        passed = 0.0
        cathode_kg = None
        # rounded composition tables may overshoot 1 slightly (validate caps it)
        norm = max(1.0, sum(s.get(chem, 0.0) for s in stage["streams"]))
        for s in stage["streams"]:
            m = mass_in * s.get(chem, 0.0) / norm
            fate = s["fate"]
            if s["material"] == "cathode":
                cathode_kg = m
            if fate == "to_next":
                if last:
                    raise IncompleteRoute(f"stage {name!r} passes mass beyond the last stage")
                passed += m * s.get("recovery", 1.0)
                flows.discharged += m * (1.0 - s.get("recovery", 1.0))
            elif fate == "product":
                r = s.get("recovery", 1.0)
                flows.add(flows.products, s["product"].format(chem=chem), m * r)
                flows.recovered += m * r
                nxt = s.get("to_next", 0.0)
                if nxt and last:
                    raise IncompleteRoute(f"stage {name!r} passes mass beyond the last stage")
                passed += m * nxt
                flows.discharged += m * (1.0 - r - nxt)
            elif fate == "cathode_elements":
                comp = data["cathode"][chem]
                li = m * comp["li"] * s.get("li", 0.0)
                flows.add(flows.products, "lithium_carbonate_crude", li * LI2CO3_PER_LI)
                for el, prod in ELEMENT_PRODUCTS.items():
                    if comp.get(el, 0.0) > 0:
                        flows.add(flows.products, prod, m * comp[el] * s.get(el, 0.0))
                recovered = li + sum(m * comp.get(el, 0.0) * s.get(el, 0.0) for el in ELEMENT_PRODUCTS)
                flows.recovered += recovered
                flows.discharged += m - recovered
            elif fate == "burn":
                flows.burned += m
            elif fate == "landfill":
                flows.landfilled += m
            else:
                flows.discharged += m
        if cathode_kg is None:
            cathode_kg = mass_in * data["cathode"][chem].get("cell_fraction", 0.0)
        _lithium_demand(stage, chem, data, cathode_kg, sc.soh, flows)
        for reagent, kg in stage.get("consumables", {}).items():
            flows.add(flows.consumed, reagent, kg * mass_in)
        flows.water_gal += stage.get("water_gal_per_kg", 0.0) * mass_in
        flows.wastewater_gal += stage.get("wastewater_gal_per_kg", 0.0) * mass_in
        flows.fixed_cost += stage.get("fixed_cost_per_kg", 0.0) * mass_in
        for eq in stage.get("equipment", []):
            flows.kwh += eq["power_kw"] * hours / through
            flows.labor_h += eq["labor_ph_day"] * plant["days_per_year"] / through
            flows.capital_per_year += eq["capital"] / plant["amortization_years"]
        mass_in = passed
    flows.capital_per_year /= through
    return flows


def mass_balance(sc: EconScenario) -> float:
    """Fraction of fed mass leaving as product, burned, landfilled or
    discharged (at most 1)."""
    f = route_flows(sc)
    return f.recovered + f.burned + f.landfilled + f.discharged


# ---------------------------------------------------------------------------
# economics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProfitReport:
    revenue: float
    cost: float
    profit: float
    breakdown: dict

    def to_dict(self) -> dict:
        return {"revenue": self.revenue, "cost": self.cost, "profit": self.profit,
                "breakdown": dict(self.breakdown)}


def _price(table: dict, name: str) -> float:
    if name not in table:
        raise MissingPrice(name)
    return float(table[name])


def unit_profit(sc: EconScenario) -> ProfitReport:
    """Revenue, cost and profit in $ per kg of cells."""
    f = route_flows(sc)
    prices, costs = sc.data["prices"], sc.data["costs"]
    revenue = sum(kg * _price(prices["recovered"], name) for name, kg in f.products.items())
    parts = {
        "feedstock": _price(prices["consumed"], f"defective_cells_{sc.chemistry}")
        if sc.data["plant"].get("purchase_is_cost", True) else 0.0,
        "consumables": sum(kg * _price(prices["consumed"], r) for r, kg in f.consumed.items()),
        "equipment": f.capital_per_year,
        "labor": f.labor_h * costs["labor_per_hour"],
        "electricity": f.kwh * costs["electricity_per_kwh"],
        "water": f.water_gal * costs["water_per_gallon"],
        "wastewater": f.wastewater_gal * costs["wastewater_per_kgal"] / 1000.0,
        "landfill": f.landfilled * costs["landfill_per_ton"] / 1000.0,
        "fixed": f.fixed_cost,
    }
    cost = sum(parts.values())
    return ProfitReport(revenue, cost, revenue - cost, parts)


def profit_grid(data: dict, sohs, chemistries=CHEMISTRIES, methods=METHODS) -> dict:
    """{(chemistry, method): profit array over ``sohs``}."""
    out = {}
    for chem in chemistries:
        for m in methods:
            out[(chem, m)] = np.array([unit_profit(EconScenario(chem, m, float(s), data)).profit for s in sohs])
    return out


def calibrate_refined_direct(data: dict, chemistry: str = "LFP", cost_full: float = 2.37,
                             cost_at: float = 2.63, soh_at: float = 0.80) -> dict:
    """Solve the refined-direct fixed cost and lithium-supplement excess so
    cost(SOH=1) = cost_full and cost(soh_at) = cost_at. Returns the two
    values; the cost is affine in both, so two evaluations suffice."""
    def cost(fixed, excess, soh):
        def edit(d):
            st = d["stages"]["refined_direct"]
            st["fixed_cost_per_kg"] = fixed
            st["lithium_supplement"]["excess"] = excess
        return unit_profit(EconScenario(chemistry, "refined_direct", soh, data).with_data(edit)).cost

    base = cost(0.0, 0.0, 1.0)
    fixed = cost_full - base
    slope = cost(fixed, 1.0, soh_at) - cost_full
    if slope <= 0:
        raise ConfigError("lithium supplement has no cost; cannot calibrate")
    return {"fixed_cost_per_kg": fixed, "excess": (cost_at - cost_full) / slope}



# ---------------------------------------------------------------------------
# environmental impact
# ---------------------------------------------------------------------------

def environmental_impact(sc: EconScenario) -> dict:
    """EI_k = sum_i m_i ei_ik + sum_j q_j ei_jk + P_k per kg of cells, with
    m the consumed reagents, q the energy/water carriers and P the process
    emissions of burned material."""
    imp = sc.data.get("impacts")
    if not imp:
        raise IncompleteRoute("scenario has no [impacts] table")
    cats = imp["categories"]
    table = imp["intensity"]
    f = route_flows(sc)

    def ei(name):
        vec = table.get(name)
        if vec is None:
            raise MissingIntensity(name, cats[0])
        if len(vec) != len(cats):
            raise MissingIntensity(name, cats[min(len(vec), len(cats) - 1)])
        return np.asarray(vec, float)

    total = np.zeros(len(cats))
    for reagent, kg in f.consumed.items():
        if kg:
            total += kg * ei(reagent)
    for carrier, q in (("electricity", f.kwh), ("water", f.water_gal), ("wastewater", f.wastewater_gal)):
        if q:
            total += q * ei(carrier)
    burn = imp.get("burn", {}).get("per_kg")
    if f.burned:
        if burn is None:
            raise MissingIntensity("burn", cats[0])
        total += f.burned * np.asarray(burn, float)
    return dict(zip(cats, total.tolist()))


# ---------------------------------------------------------------------------
# scrap forecast
# ---------------------------------------------------------------------------

def scrap_rate_constant(anchors=SCRAP_ANCHORS) -> float:
    (t0, r0), (t1, r1) = anchors
    if t0 == t1 or r0 <= 0 or r1 <= 0:
        raise DegenerateAnchors("anchors need distinct years and positive rates")
    return math.log(r0 / r1) / (t1 - t0)


def scrap_forecast(years, anchors=SCRAP_ANCHORS) -> np.ndarray:
    """r(t) = r_a * exp(-k (t - t_a)) through both anchors."""
    k = scrap_rate_constant(anchors)
    (t0, r0), (t1, r1) = anchors
    t = np.asarray(years, float)
    out = r0 * np.exp(-k * (t - t0))
    # land exactly on the anchors
    out = np.where(t == t0, r0, np.where(t == t1, r1, out))
    return out
