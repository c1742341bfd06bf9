from __future__ import annotations

import math

import numpy as np
import pytest

from protoverify.errors import ConfigError, DegenerateAnchors, IncompleteRoute, MissingIntensity, MissingPrice
from protoverify.econ import (
    CHEMISTRIES,
    METHODS,
    SCRAP_ANCHORS,
    EconScenario,
    calibrate_refined_direct,
    environmental_impact,
    load_scenario_data,
    mass_balance,
    profit_grid,
    route_flows,
    scrap_forecast,
    scrap_rate_constant,
    unit_profit,
)

CONVENTIONAL = tuple(m for m in METHODS if m != "refined_direct")
SOH_GRID = np.round(np.arange(0.60, 1.0001, 0.05), 2)


@pytest.fixture(scope="module")
def data():
    return load_scenario_data()


def _scaled_inputs(factor):
    """Scale every consumed reagent, utility and energy draw by ``factor``."""
    def edit(d):
        for st in d["stages"].values():
            st["consumables"] = {k: v * factor for k, v in st.get("consumables", {}).items()}
            for key in ("water_gal_per_kg", "wastewater_gal_per_kg"):
                if key in st:
                    st[key] *= factor
            for eq in st.get("equipment", []):
                eq["power_kw"] *= factor
            if st.get("lithium_supplement"):
                st["lithium_supplement"]["excess"] *= factor
        burn = d["impacts"].get("burn")
        if burn:
            burn["per_kg"] = [0.0] * len(burn["per_kg"])
    return edit


# ---------------------------------------------------------------------------
# profit
# ---------------------------------------------------------------------------

def test_lfp_refined_direct_at_95_percent():
    r = unit_profit(EconScenario.default("LFP", "refined_direct", 0.95))
    assert r.revenue == pytest.approx(15.64, abs=5e-3)
    assert 2.37 <= r.cost <= 2.63
    assert 13.01 <= r.profit <= 13.27


def test_cost_band_ends():
    full = unit_profit(EconScenario.default(soh=1.0))
    low = unit_profit(EconScenario.default(soh=0.8))
    # the bundled table stores the calibration rounded to 6 digits
    assert full.cost == pytest.approx(2.37, abs=5e-3)
    assert low.cost == pytest.approx(2.63, abs=5e-3)


def test_calibration_reproduces_cost_band(data):
    cal = calibrate_refined_direct(data)

    def edit(d):
        d["stages"]["refined_direct"]["fixed_cost_per_kg"] = cal["fixed_cost_per_kg"]
        d["stages"]["refined_direct"]["lithium_supplement"]["excess"] = cal["excess"]
    sc = EconScenario("LFP", "refined_direct", 1.0, data).with_data(edit)
    assert unit_profit(sc).cost == pytest.approx(2.37, abs=1e-12)
    assert unit_profit(sc.replace(soh=0.8)).cost == pytest.approx(2.63, abs=1e-12)


@pytest.mark.parametrize("chem", CHEMISTRIES)
@pytest.mark.parametrize("method", METHODS)
def test_zero_prices_give_minus_cost(chem, method):
    def edit(d):
        for group in ("recovered", "consumed"):
            d["prices"][group] = {k: 0.0 for k in d["prices"][group]}
    r = unit_profit(EconScenario.default(chem, method, 0.9).with_data(edit))
    assert r.revenue == 0.0
    assert r.profit == -r.cost


def test_refined_direct_wins_on_every_grid_point(data):
    grid = profit_grid(data, SOH_GRID)
    for chem in CHEMISTRIES:
        ours = grid[(chem, "refined_direct")]
        for m in CONVENTIONAL:
            assert np.all(ours > grid[(chem, m)]), (chem, m)


@pytest.mark.parametrize("chem", CHEMISTRIES)
@pytest.mark.parametrize("method", METHODS)
def test_profit_is_affine_in_each_recovered_price(chem, method):
    sc = EconScenario.default(chem, method, 0.9)
    sold = route_flows(sc).products
    base = unit_profit(sc).profit
    for name, kg in sold.items():
        def bump(d, by):
            d["prices"]["recovered"][name] += by
        one = unit_profit(sc.with_data(lambda d: bump(d, 1.0))).profit
        three = unit_profit(sc.with_data(lambda d: bump(d, 3.0))).profit
        assert one - base == pytest.approx(kg, rel=1e-9, abs=1e-12)
        assert three - base == pytest.approx(3 * (one - base), rel=1e-9, abs=1e-12)


def test_direct_product_slope_matches_tables(data):
    # hand-traced: single-stage refined-direct route, product kg = stream fraction x recovery
    stage = data["stages"][data["routes"]["refined_direct"][0]]
    products = [s for s in stage["streams"] if s["fate"] == "product"]
    sc = EconScenario("NMC811", "refined_direct", 0.95, data)
    sold = route_flows(sc).products
    for s in products:
        name = s["product"].format(chem="NMC811")
        expected = sum(t.get("NMC811", 0.0) * t.get("recovery", 1.0) for t in products
                       if t["product"].format(chem="NMC811") == name)
        assert sold[name] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("chem", CHEMISTRIES)
@pytest.mark.parametrize("method", METHODS)
def test_mass_balance(chem, method):
    assert mass_balance(EconScenario.default(chem, method, 0.95)) <= 1.0 + 1e-9


# ---------------------------------------------------------------------------
# environmental impact
# ---------------------------------------------------------------------------

def test_thirteen_categories():
    ei = environmental_impact(EconScenario.default("NMC811", "hydro"))
    assert list(ei) == ["VOC", "CO", "NOx", "PM10", "PM2.5", "SOx", "BC", "OC", "CH4", "N2O", "CO2",
                        "energy", "water"]


@pytest.mark.parametrize("method", METHODS)
def test_zero_inputs_give_zero_impact(method):
    ei = environmental_impact(EconScenario.default("NMC811", method).with_data(_scaled_inputs(0.0)))
    assert all(v == 0.0 for v in ei.values())


@pytest.mark.parametrize("method", METHODS)
def test_impact_is_linear_in_inputs(method):
    sc = EconScenario.default("NMC811", method)
    one = environmental_impact(sc.with_data(_scaled_inputs(1.0)))
    two = environmental_impact(sc.with_data(_scaled_inputs(2.0)))
    for k in one:
        assert two[k] == pytest.approx(2 * one[k], rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("chem", CHEMISTRIES)
def test_refined_direct_dominates_impacts(chem):
    ours = environmental_impact(EconScenario.default(chem, "refined_direct", 0.95))
    for m in CONVENTIONAL:
        other = environmental_impact(EconScenario.default(chem, m, 0.95))
        worse = [k for k in ours if ours[k] > other[k]]
        assert not worse, (m, worse)


def test_missing_intensity():
    def edit(d):
        d["impacts"]["intensity"].pop("electricity")
    with pytest.raises(MissingIntensity) as exc:
        environmental_impact(EconScenario.default("NMC811", "hydro").with_data(edit))
    assert exc.value.material == "electricity"


# ---------------------------------------------------------------------------
# scenario validation
# ---------------------------------------------------------------------------

def test_missing_price():
    sc = EconScenario.default("LFP", "refined_direct")
    name = next(iter(route_flows(sc).products))
    with pytest.raises(MissingPrice) as exc:
        unit_profit(sc.with_data(lambda d: d["prices"]["recovered"].pop(name)))
    assert exc.value.material == name


def test_incomplete_route():
    def edit(d):
        d["routes"]["hydro"] = list(d["routes"]["hydro"]) + ["nowhere"]
    with pytest.raises(IncompleteRoute):
        route_flows(EconScenario.default("LFP", "hydro").with_data(edit))


@pytest.mark.parametrize("kw", [dict(chemistry="NCA"), dict(method="smelt"), dict(soh=0.0), dict(soh=1.2)])
def test_scenario_field_validation(kw):
    with pytest.raises(ConfigError):
        EconScenario.default().replace(**kw)


def test_negative_price_rejected():
    def edit(d):
        k = next(iter(d["prices"]["recovered"]))
        d["prices"]["recovered"][k] = -1.0
    with pytest.raises(ConfigError):
        EconScenario.default().with_data(edit)


def test_overfull_stage_rejected():
    def edit(d):
        st = next(iter(d["stages"].values()))
        st["streams"][0]["LFP"] = st["streams"][0].get("LFP", 0.0) + 0.5
    with pytest.raises(ConfigError):
        EconScenario.default().with_data(edit)


def test_missing_section_rejected(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text("[plant]\nthroughput_kg_per_year = 1\n")
    with pytest.raises(ConfigError):
        EconScenario.default(path=p)


# ---------------------------------------------------------------------------
# scrap forecast
# ---------------------------------------------------------------------------

def test_scrap_anchors_exact():
    r = scrap_forecast([2023, 2030])
    assert r[0] == 0.0767 and r[1] == 0.0434


def test_scrap_2060():
    k = math.log(7.67 / 4.34) / 7
    assert scrap_rate_constant() == pytest.approx(k, rel=1e-12)
    assert scrap_rate_constant() == pytest.approx(0.0814, abs=1e-4)
    r = float(scrap_forecast([2060])[0])
    assert r == pytest.approx(0.0767 * math.exp(-k * 37), rel=1e-12)
    assert abs(r - 0.0038) <= 0.0005


def test_scrap_monotone_and_interpolating():
    years = np.arange(2015, 2071)
    r = scrap_forecast(years)
    assert np.all(np.diff(r) < 0)
    anchors = ((2020, 0.1), (2040, 0.01))
    assert list(scrap_forecast([2020, 2040], anchors)) == [0.1, 0.01]
    assert scrap_forecast([2030], anchors)[0] == pytest.approx(math.sqrt(0.1 * 0.01), rel=1e-12)


@pytest.mark.parametrize("anchors", [((2023, 0.07), (2023, 0.04)), ((2023, 0.0), (2030, 0.04)),
                                     ((2023, 0.07), (2030, -0.01))])
def test_degenerate_anchors(anchors):
    with pytest.raises(DegenerateAnchors):
        scrap_forecast([2040], anchors)


def test_default_anchors():
    assert SCRAP_ANCHORS == ((2023, 0.0767), (2030, 0.0434))
