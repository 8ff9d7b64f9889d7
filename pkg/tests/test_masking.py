import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import kstest

from rgbtmae.cmss import CmssMap
from rgbtmae.gmm import GmmState, cdf
from rgbtmae.masking import (BiasGains, LossStats, MaskBudget, MaskBudgetError, SamplerConfig,
                             ScheduleConfig, baseline_mask, mask_count, phase_midpoints,
                             sample_points, schedule_at, select_visible, update_modality_bias)

FITTED = GmmState(np.array([0.3, 0.5, 0.2]), np.array([0.15, 0.45, 0.8]),
                  np.array([0.004, 0.01, 0.006]))


def cmss_of(values):
    v = np.asarray(values, dtype=np.float64)
    return CmssMap(v, v)


def test_warmup_is_uniform():
    cfg = schedule_at(0.0, FITTED)
    assert cfg.uniform and cfg.phase_label == "warmup"
    assert schedule_at(0.049, FITTED).uniform


def test_ramp_in_first_subphase_start():
    cfg = schedule_at(0.05, FITTED)
    assert cfg.phase_label == "ramp_in_1" and cfg.active_K == 1
    assert cfg.means[0] == 0.0 and cfg.variances[0] == pytest.approx(0.01)


def test_midpoint_equals_fitted():
    cfg = schedule_at(0.5, FITTED)
    assert cfg.phase_label == "mid" and not cfg.uniform
    np.testing.assert_array_equal(cfg.means, FITTED.means)
    np.testing.assert_array_equal(cfg.variances, FITTED.variances)
    np.testing.assert_array_equal(cfg.weights, FITTED.weights)


def test_end_moves_everything_to_one():
    cfg = schedule_at(1.0, FITTED)
    np.testing.assert_allclose(cfg.means, 1.0)
    np.testing.assert_array_equal(cfg.variances, FITTED.variances)


def test_out_of_range_progress():
    for p in (-0.01, 1.01, float("nan")):
        with pytest.raises(ValueError):
            schedule_at(p, FITTED)
    with pytest.raises(ValueError):
        ScheduleConfig(0.6, 0.5)


@pytest.mark.parametrize("b", [0.05 + 0.15, 0.05 + 0.30, 0.5 + 1 / 6, 0.5 + 2 / 6])
def test_means_continuous_at_subphase_boundaries(b):
    lo, hi = schedule_at(b - 1e-9, FITTED), schedule_at(b, FITTED)
    k = min(lo.active_K, hi.active_K)
    np.testing.assert_allclose(lo.means[:k], hi.means[:k], atol=1e-6)
    np.testing.assert_allclose(lo.variances[:k], hi.variances[:k], atol=1e-6)


def test_ramp_in_to_mid_continuity():
    lo, hi = schedule_at(0.5 - 1e-12, FITTED), schedule_at(0.5, FITTED)
    np.testing.assert_allclose(lo.means, hi.means, atol=1e-9)
    np.testing.assert_allclose(lo.weights, hi.weights, atol=1e-9)


def test_phase_midpoints():
    pts = phase_midpoints(3)
    assert len(pts) == 7 and pts[3] == 0.5
    assert [schedule_at(p, FITTED).phase_label for p in pts] == [
        "ramp_in_1", "ramp_in_2", "ramp_in_3", "mid", "ramp_out_1", "ramp_out_2", "ramp_out_3"]


def test_sampler_ks_against_analytic_cdf():
    cfg = schedule_at(0.5, FITTED)
    x = sample_points(cfg, 100_000, np.random.default_rng(3))

    def clipped_cdf(v):
        return np.where(v >= 1.0, 1.0, cdf(cfg.weights, cfg.means, cfg.variances, v))

    assert kstest(x, clipped_cdf).statistic < 0.01


@given(st.integers(1, 64), st.floats(0.0, 1.0))
def test_mask_count_rounds_half_up(n, r):
    assert mask_count(n, r) == int(np.floor(n * r + 0.5))


def test_mask_count_half_cases():
    assert mask_count(25, 0.9) == 23  # 22.5 -> 23
    assert mask_count(36, 0.9) == 32  # 32.4 -> 32


@given(st.data())
def test_select_visible_budget_and_uniqueness(data):
    p = data.draw(st.integers(2, 8))
    n = p * p
    r = data.draw(st.floats(0.3, 0.95))
    seed = data.draw(st.integers(0, 1000))
    rng = np.random.default_rng(seed)
    m = cmss_of(rng.random((p, p)))
    budget = MaskBudget(r)
    v = n - mask_count(n, r)
    if v <= 0 or v >= n:
        with pytest.raises(MaskBudgetError):
            select_visible(m, schedule_at(0.5, FITTED), budget, "rgb", rng)
        return
    plan = select_visible(m, schedule_at(data.draw(st.floats(0.0, 1.0)), FITTED), budget,
                          "thermal", rng)
    assert plan.visible.sum() == v and plan.masked_count == mask_count(n, r)
    assert len(np.unique(plan.visible_idx)) == v


def test_point_mass_sampler_prefers_lowest_cmss():
    vals = np.arange(16, dtype=np.float64).reshape(4, 4) / 15
    plan = baseline_mask("low_cmss", cmss_of(vals), 0.75, np.random.default_rng(0))
    np.testing.assert_array_equal(plan.visible_idx, [0, 1, 2, 3])
    plan = baseline_mask("high_cmss", cmss_of(vals), 0.75, np.random.default_rng(0))
    np.testing.assert_array_equal(plan.visible_idx, [12, 13, 14, 15])
    with pytest.raises(ValueError):
        baseline_mask("bogus", cmss_of(vals), 0.75, np.random.default_rng(0))


def test_degenerate_map_falls_back_to_uniform():
    m = CmssMap(np.full((4, 4), 0.5), np.ones((4, 4)), degenerate=True)
    counts = np.zeros(16)
    for s in range(400):
        counts += select_visible(m, schedule_at(0.5, FITTED), MaskBudget(0.75), "rgb",
                                 np.random.default_rng(s)).visible.reshape(-1)
    assert counts.min() > 60  # 100 expected per patch


def test_exclude_gives_disjoint_plans():
    rng = np.random.default_rng(5)
    m = cmss_of(rng.random((6, 6)))
    cfg = schedule_at(0.5, FITTED)
    a = select_visible(m, cfg, MaskBudget(0.5), "rgb", rng)
    b = select_visible(m, cfg, MaskBudget(0.5), "thermal", rng, exclude=a.visible.reshape(-1))
    assert not np.any(a.visible & b.visible)
    with pytest.raises(MaskBudgetError):
        select_visible(m, cfg, MaskBudget(0.3), "thermal", rng, exclude=a.visible.reshape(-1))


def test_mu_bias_only_moves_thermal():
    vals = np.arange(64, dtype=np.float64).reshape(8, 8) / 63
    cfg = SamplerConfig(np.array([0.5]), np.array([1e-6]), np.array([1.0]), mu_bias=-0.3)
    r = select_visible(cmss_of(vals), cfg, MaskBudget(0.9), "rgb", np.random.default_rng(0))
    t = select_visible(cmss_of(vals), cfg, MaskBudget(0.9), "thermal", np.random.default_rng(0))
    assert vals.reshape(-1)[t.visible_idx].mean() < vals.reshape(-1)[r.visible_idx].mean() - 0.2


def test_effective_means_clipped():
    cfg = SamplerConfig(np.array([0.0, 1.0]), np.ones(2), np.ones(2) / 2, mu_bias=5.0)
    np.testing.assert_array_equal(cfg.effective_means(), [1.2, 1.2])


def test_modality_bias_directions():
    b, mu = update_modality_bias(LossStats(1.0, 1.0))
    assert b.r_bias == {"rgb": 0.0, "thermal": 0.0} and mu == 0.0
    b, mu = update_modality_bias(LossStats(0.5, 1.5))  # thermal harder
    assert b.r_bias["thermal"] < 0 < b.r_bias["rgb"] and mu < 0
    assert b.r_bias["rgb"] == pytest.approx(0.1 * 0.5)
    assert mu == pytest.approx(-0.1)
    b, mu = update_modality_bias(LossStats(1e-3, 1e3))
    assert b.r_bias["rgb"] == pytest.approx(0.05) and mu == pytest.approx(-0.1)


@given(st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_modality_bias_antisymmetric_and_capped(lr_, lt):
    b, mu = update_modality_bias(LossStats(lr_, lt), BiasGains())
    assert b.r_bias["rgb"] == -b.r_bias["thermal"]
    assert abs(b.r_bias["rgb"]) <= 0.05 + 1e-15 and abs(mu) <= 0.1 + 1e-15


def test_loss_stats_ema():
    s = LossStats(1.0, 1.0, 0.9).update(2.0, 0.0)
    assert s.ema_loss_rgb == pytest.approx(1.1) and s.ema_loss_thermal == pytest.approx(0.9)
