from __future__ import annotations

import json

import numpy as np
import pytest

from helpers import C25, C35, C45, C55, cached_multi_source
from protoverify.errors import (
    ConfigError,
    IllConditionedFit,
    InsufficientSourceData,
    LengthMismatch,
    StageError,
    ZeroDenominator,
)
from protoverify.featurize import FEATURE_NAMES, fit_norm
from protoverify.neural import TrainConfig
from protoverify.verify import (
    IMV_COLS,
    IN_COLS,
    VerificationConfig,
    benchmark_empirical,
    early_budget,
    mape,
    plan_transfer,
    predict_target_features,
    source_trajectories,
    stage_slices,
    train_chemical_process,
    train_trajectory,
    verify_prototype,
)

FAST = TrainConfig(epochs=10, learning_rate=1e-3, lam=1e-5, batch_size=64)


@pytest.fixture(scope="module")
def fleet():
    src, tgt, _ = cached_multi_source(0)
    return src, tgt


@pytest.fixture(scope="module")
def stats(fleet):
    return fit_norm(np.vstack([b.features for b in fleet[0]]), FEATURE_NAMES)


# ---------------------------------------------------------------------------
# mape and stages
# ---------------------------------------------------------------------------

def test_mape_examples():
    assert mape([1.0, 0.9, 0.8], [1.0, 0.9, 0.8]) == 0.0
    assert mape([1.0, 1.0], [1.1, 0.9]) == pytest.approx(10.0, rel=1e-12)


def test_mape_is_aggregate_normalized():
    # per-point averaging would give 50.5%; the aggregate form gives 1.1/1.1
    assert mape([1.0, 0.1], [0.0, 0.2]) == pytest.approx(100.0, rel=1e-12)


@pytest.mark.parametrize("k", [1e-3, 0.5, 7.0, 1e4])
def test_mape_scale_invariant(k):
    rng = np.random.default_rng(0)
    y, yh = rng.uniform(0.7, 1.1, 50), rng.uniform(0.7, 1.1, 50)
    assert mape(k * y, k * yh) == pytest.approx(mape(y, yh), rel=1e-12)


def test_mape_errors():
    with pytest.raises(LengthMismatch):
        mape([1.0, 2.0], [1.0])
    with pytest.raises(ZeroDenominator):
        mape([0.0, 0.0], [1.0, 1.0])


@pytest.mark.parametrize("n", [10, 97, 250, 1001])
def test_stages_cover_thirty_percent_disjointly(n):
    s = stage_slices(n)
    idx = [set(range(n)[v]) for v in s.values()]
    assert all(len(i) == round(0.1 * n) for i in idx)
    assert not (idx[0] & idx[1]) and not (idx[1] & idx[2]) and not (idx[0] & idx[2])
    assert 0 in idx[0] and n - 1 in idx[2]


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(early_fraction=None),
    dict(early_cycles=50),
    dict(early_fraction=0.0),
    dict(early_fraction=None, early_cycles=3),
    dict(eol_fraction=0.5),
    dict(eol_fraction=1.0),
    dict(rate_basis="guess"),
    dict(source_temperatures=()),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        VerificationConfig(**kw)


def test_trajectory_defaults_verbatim():
    cfg = VerificationConfig()
    assert (cfg.trajectory.epochs, cfg.trajectory.learning_rate, cfg.trajectory.lam) == (100, 1e-3, 1e-5)
    assert (cfg.chemical.epochs, cfg.chemical.learning_rate, cfg.chemical.lam) == (30, 1e-4, 1e-5)


def test_early_budget_counts_toward_eol(fleet):
    b = fleet[1][0]
    life, early = early_budget(b, VerificationConfig(target_temperature=b.temperature))
    assert b.soh[b.cycles == life][0] < 0.75 <= b.soh[b.cycles == life - 1][0]
    assert early == int(np.ceil(0.2 * life))
    assert early_budget(b, VerificationConfig(early_fraction=None, early_cycles=50))[1] == 50


# ---------------------------------------------------------------------------
# chemical-process model
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def chem(fleet):
    return train_chemical_process(fleet[0], VerificationConfig().chemical)


def test_chemical_output_has_42_columns(chem, fleet):
    b = fleet[0][0]
    out = chem.predict(b.imv, b.cycles[:5])
    assert out.shape == (5, 42)
    assert chem.model.layer_sizes[0] == 10


def test_chemical_duplicate_inputs_agree(chem, fleet):
    b = fleet[0][0]
    out = chem.predict(b.imv, np.array([50, 50, 50]))
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


@pytest.mark.slow
def test_chemical_heldout_rmse(chem):
    worst = int(np.argmax(chem.heldout_rmse))
    assert np.all(chem.heldout_rmse <= 0.05), (FEATURE_NAMES[10 + worst], chem.heldout_rmse[worst])


def test_chemical_needs_sources():
    with pytest.raises(InsufficientSourceData):
        train_chemical_process([], VerificationConfig().chemical)


# ---------------------------------------------------------------------------
# transfer and extrapolation
# ---------------------------------------------------------------------------

def _extrapolation_rmse(fleet, stats, target, no_transfer):
    traj = source_trajectories(fleet[0], None, "measured", int(target.cycles[-1]))
    cfg = VerificationConfig(target_temperature=target.temperature)
    _, early = early_budget(target, cfg)
    tr = plan_transfer(target, early, traj, stats, cfg.window, no_transfer)
    cycles, rows = predict_target_features(target, early, tr, stats, int(target.cycles[-1]))
    truth = stats.transform(target.features)
    ext = cycles > early
    return np.sqrt(np.mean((rows[ext][:, IN_COLS] - truth[ext][:, IN_COLS]) ** 2, axis=0))


def test_horizon_at_budget_returns_measured_rows(fleet, stats):
    b = fleet[1][0]
    traj = source_trajectories(fleet[0], None, "measured", int(b.cycles[-1]))
    tr = plan_transfer(b, 80, traj, stats, (100, 200, 50), False)
    cycles, rows = predict_target_features(b, 80, tr, stats, 80)
    np.testing.assert_array_equal(cycles, b.cycles[b.cycles <= 80])
    np.testing.assert_array_equal(rows, stats.transform(b.upto(80).features))


def test_extrapolated_rows_keep_imv_and_temperature(fleet, stats):
    b = fleet[1][0]
    traj = source_trajectories(fleet[0], None, "measured", int(b.cycles[-1]))
    tr = plan_transfer(b, 80, traj, stats, (100, 200, 50), False)
    _, rows = predict_target_features(b, 80, tr, stats, 200)
    np.testing.assert_array_equal(rows[:, :10], np.repeat(stats.transform(b.features)[:1, :10], len(rows), 0))


@pytest.mark.parametrize("k", range(4))
def test_transferred_features_track_held_out_truth(fleet, stats, k):
    target = [b for b in fleet[1] if b.temperature == C35][k]
    assert _extrapolation_rmse(fleet, stats, target, False).max() <= 0.1


@pytest.mark.parametrize("k", range(4))
def test_no_transfer_extrapolates_worse(fleet, stats, k):
    target = [b for b in fleet[1] if b.temperature == C35][k]
    ours = _extrapolation_rmse(fleet, stats, target, False)
    ablated = _extrapolation_rmse(fleet, stats, target, True)
    assert np.sqrt(np.mean(ours ** 2)) < np.sqrt(np.mean(ablated ** 2))


def test_no_transfer_plan_is_nearest_identity(fleet, stats):
    b = fleet[1][0]
    traj = source_trajectories(fleet[0], None, "measured", int(b.cycles[-1]))
    tr = plan_transfer(b, 80, traj, stats, (100, 200, 50), True)
    assert len(tr.plan.sources) == 1
    assert tr.plan.sources[0].temperature == C25
    np.testing.assert_array_equal(tr.plan.sources[0].at_score, 1.0)


# ---------------------------------------------------------------------------
# trajectory model
# ---------------------------------------------------------------------------

def test_trajectory_input_dimensions():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(30, 52)), rng.uniform(0.8, 1.0, 30)
    assert train_trajectory(x, y, FAST).model.layer_sizes[0] == 51
    m = train_trajectory(x, y, FAST, no_imv=True)
    assert m.model.layer_sizes[0] == 42
    assert not set(m.columns) & set(IMV_COLS)


def test_constant_labels_predicted(fleet, stats):
    x = np.vstack([stats.transform(b.features) for b in fleet[0]])
    m = train_trajectory(x, np.full(len(x), 0.91), VerificationConfig().trajectory)
    assert np.max(np.abs(m.predict(x) - 0.91)) <= 1e-3


def test_trajectory_model_round_trip():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 52))
    m = train_trajectory(x, rng.uniform(0.8, 1.0, 20), FAST)
    back = type(m).from_dict(json.loads(json.dumps(m.to_dict())))
    np.testing.assert_array_equal(back.predict(x), m.predict(x))


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def test_benchmark_identical_target_is_exact():
    c = np.arange(4, 300)
    y = 1.0 - 1e-6 * c ** 2 + 2e-4 * c
    est = benchmark_empirical([(c, y)], (c[:40], y[:40]), 3, c)
    assert mape(y, est) == pytest.approx(0.0, abs=1e-10)


def test_benchmark_intercept_shift():
    c = np.arange(4, 300)
    y = 1.0 - 5e-4 * c
    est = benchmark_empirical([(c, y)], (c[:40], y[:40] - 0.03), 1, c)
    np.testing.assert_allclose(est, y - 0.03, atol=1e-12)


def test_benchmark_degree_zero_is_constant():
    c = np.arange(4, 300)
    y = 1.0 - 5e-4 * c
    est = benchmark_empirical([(c, y)], (c[:40], y[:40]), 0, c)
    assert np.ptp(est) == 0.0
    assert mape(y, est) > 0


def test_benchmark_ill_conditioned():
    c = np.arange(4, 300)
    with pytest.raises(IllConditionedFit):
        benchmark_empirical([(c, 1.0 - 5e-4 * c)], (c[:5], np.ones(5)), 40, c)


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def result45(fleet):
    return verify_prototype(VerificationConfig(target_temperature=C45), *fleet)


def test_reported_mape_recomputes_from_arrays(result45):
    for p in result45.predictions:
        assert abs(p.mape_overall - mape(p.y, p.yhat)) <= 1e-12
        for name, sl in stage_slices(len(p.y)).items():
            assert abs(p.mape_by_stage[name] - mape(p.y[sl], p.yhat[sl])) <= 1e-12
    d = json.loads(json.dumps(result45.to_dict()))
    assert d["mape_overall"] == pytest.approx(np.mean([p.mape_overall for p in result45.predictions]), rel=1e-12)


def test_predictions_are_finite_and_cover_lifetime(result45):
    for p in result45.predictions:
        assert np.all(np.isfinite(p.yhat))
        assert p.cycles[-1] == p.lifetime and p.cycles[0] == 4


def test_plans_have_unit_weights(result45):
    for plan in result45.plans.values():
        w = np.stack([s.weight for s in plan.sources])
        np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-12)


@pytest.mark.slow
def test_eol_cycle_error_within_forty(fleet):
    errs = []
    for T in (C35, C45):
        res = verify_prototype(VerificationConfig(target_temperature=T), *fleet, benchmark_degree=None)
        errs += [abs(p.predicted_eol_cycle - p.true_eol_cycle) for p in res.predictions]
    assert max(errs) <= 40, errs


@pytest.mark.slow
def test_target_as_source_degenerates_to_supervised_fit(fleet):
    src, tgt = fleet
    target = [b for b in tgt if b.temperature == C45][0]
    cfg = VerificationConfig(source_temperatures=(C25, C45, C55), target_temperature=C45, early_fraction=1.0)
    res = verify_prototype(cfg, list(src) + [target], [target], benchmark_degree=None)
    assert res.mape_overall <= 1.0


def test_missing_target_is_wrapped_with_stage(fleet):
    with pytest.raises(StageError) as exc:
        verify_prototype(VerificationConfig(target_temperature=C55 + 10), *fleet)
    assert exc.value.stage == "select"
    assert isinstance(exc.value.cause, InsufficientSourceData)


def test_upstream_error_is_wrapped_with_stage(fleet):
    src, tgt = fleet
    # a one-cycle source leaves its domain with no shared cycle range
    broken = [src[0].upto(4)] + list(src[1:])
    with pytest.raises(StageError) as exc:
        verify_prototype(VerificationConfig(target_temperature=C45), broken, tgt)
    assert exc.value.stage == "rates"
    assert exc.value.to_dict()["stage"] == "rates"
