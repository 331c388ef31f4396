import json

import numpy as np
import pytest
from scipy import stats

from dualshield.metrics import collision_and_distance, detect_success, in_goal_band, jerk_metric
from dualshield.scenario import (
    Footprint,
    HvSpec,
    Scenario,
    ScenarioError,
    default_scenario,
    load_scenario,
)
from dualshield.sim import (
    BatchReport,
    TABLE_COLUMNS,
    aggregate,
    derive_seed,
    run_batch,
    run_trial,
    sample_setup,
    trial_seeds,
)
from dualshield.diffusion import PlannerConfig
from dualshield.traffic import LanePath


def short_scenario(duration=1.0, **planner):
    scn = default_scenario()
    scn.duration = duration
    cfg = {**scn.planner.to_dict(), "n_samples": 64, "n_denoise": 8, "n_warm": 2, **planner}
    scn.planner = PlannerConfig.from_dict(cfg)
    return scn


# metrics

def test_success_detection_example():
    goal = [0, -0.7, 0, 0.5]
    s = np.zeros((12, 4))
    s[:, 1] = -0.7
    s[:, 3] = 0.5
    s[:3, 1] = 0.7  # out of band for the first three samples
    ok, t_m = detect_success(s, goal, 0.1)
    assert ok and t_m == pytest.approx(0.3)
    s[7, 3] = 0.1  # stopping breaks the run
    ok, t_m = detect_success(s, goal, 0.1)
    assert not ok and t_m is None


def test_goal_band_heading_wraps():
    st = np.array([[0, -0.7, 2 * np.pi - 0.1, 0.5], [0, -0.7, np.pi, 0.5], [0, -0.5, 0, -0.5]])
    np.testing.assert_array_equal(in_goal_band(st, [0, -0.7, 0, 0.5]), [True, False, True])


def test_collision_and_distance_example():
    fp = Footprint(0.3, 0.25)
    ego = np.array([[0, 0, 0, 0.0], [0, 0, 0, 0.0]])
    other = np.array([[[2.0, 0, np.pi, 0]] * 2])
    hit, l_min = collision_and_distance(ego, other, np.zeros((0, 2)), fp)
    # nearest circles at x = 0.25 and x = 1.75
    assert not hit and l_min == pytest.approx(1.5 - 0.6)
    hit, l_min = collision_and_distance(ego, other, [[0.6, 0.0]], fp, 0.1)
    assert hit and l_min == pytest.approx(0.35 - 0.4)
    assert collision_and_distance(ego, np.zeros((0, 2, 4)), [], fp) == (False, np.inf)


def test_jerk_example():
    assert jerk_metric([0, 1, 1, 0], 0.1) == pytest.approx((1 + 0 + 1) / 3 / 0.1)
    assert jerk_metric([0.5], 0.1) == 0.0


# seeds and setups

def test_derive_seed_properties():
    a = derive_seed(0, "trial", 1, 2)
    assert a == derive_seed(0, "trial", 1, 2)
    assert len({a, derive_seed(0, "trial", 2, 1), derive_seed(0, "config", 1, 2), derive_seed(1, "trial", 1, 2)}) == 4
    assert 0 <= a < 2**63
    s, c = trial_seeds(5, 3, 4)
    assert c == trial_seeds(5, 3, 9)[1]
    assert s != trial_seeds(5, 3, 9)[0]


def test_speed_distribution_uniform():
    scn = default_scenario()
    lo, hi = scn.hv_speed_range
    speeds = np.array([sample_setup(scn, derive_seed(7, "config", i)).speeds for i in range(10_000)])
    for j in range(speeds.shape[1]):
        assert speeds[:, j].min() >= lo and speeds[:, j].max() <= hi
        assert stats.kstest(speeds[:, j], stats.uniform(lo, hi - lo).cdf).pvalue > 0.01


def test_mode_frequencies():
    scn = default_scenario()
    modes = [m for i in range(3000) for m in sample_setup(scn, derive_seed(3, "config", i)).modes]
    counts = np.array([modes.count(m) for m in ("cooperative", "oblivious", "adversarial")])
    assert stats.chisquare(counts).pvalue > 0.01


def test_fixed_mode_does_not_shift_other_draws():
    scn = default_scenario()
    base = sample_setup(scn, 11)
    scn.hvs[0].mode = "adversarial"
    scn.hvs[0].speed = 1.0
    fixed = sample_setup(scn, 11)
    assert fixed.modes[0] == "adversarial" and fixed.speeds[0] == 1.0
    assert fixed.modes[1] == base.modes[1] and fixed.speeds[1] == base.speeds[1]


# scenario documents

def test_scenario_round_trip(tmp_path):
    scn = default_scenario()
    p = tmp_path / "s.json"
    scn.save(p)
    again = load_scenario(str(p))
    assert again.to_dict() == scn.to_dict()
    assert len(again.hvs) == 2 and again.statics.shape == (20, 2)
    assert again.n_steps == 100


@pytest.mark.parametrize("patch", [
    {"version": 2},
    {"sim": {"dt": 0.1, "duration": 1.05}},
    {"ego_start": [0, 0, 0]},
    {"planner": {"horizon": 50, "alpha": 1}},
    {"hvs": [{"start": [0, 0, 0], "lane": {"waypoints": [[0, 0], [1, 0]]}, "mode": "reckless"}]},
])
def test_scenario_errors(patch):
    d = default_scenario().to_dict()
    d.update(patch)
    with pytest.raises(ScenarioError):
        Scenario.from_dict(d)


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(str(p))


# closed loop

def test_short_trial_deterministic(reduced_vfs):
    scn = short_scenario()
    a = run_trial(scn, 4, reduced_vfs)
    b = run_trial(scn, 4, reduced_vfs)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    assert a.ego_states.shape == (scn.n_steps + 1, 4)
    assert a.hv_states.shape == (2, scn.n_steps + 1, 4)
    assert len(a.u_safe) == scn.n_steps == len(a.shield_log)
    assert np.all(np.isfinite(a.v_min))
    assert "mean_plan_time" not in a.to_dict() and a.timing()["plan_times"]


def test_bypass_executes_plan():
    scn = short_scenario(guidance="distance")
    scn.shield.enabled = False
    r = run_trial(scn, 2, None)
    np.testing.assert_array_equal(r.u_safe, r.u_plan)
    assert not r.shield_active.any() and np.all(r.eps == 0)
    assert np.all(np.isnan(r.v_min))
    assert r.to_dict()["v_min"][0] is None


def test_value_functions_required_with_shield():
    with pytest.raises(ValueError):
        run_trial(short_scenario(), 0, None)


def test_shield_engages_head_on(reduced_vfs):
    lane = LanePath([[30, 0.0], [-30, 0.0]], 1.5)
    scn = Scenario(ego_start=[0, 0, 0, 1.0], goal=[20, 0, 0, 1.0], y_bounds=(-3, 3),
                   hvs=[HvSpec(start=[3.0, 0.0, np.pi], lane=lane, mode="adversarial", speed=1.0)],
                   planner=PlannerConfig(n_samples=64, n_denoise=8, n_warm=2), duration=1.5)
    scn.weights.y_min, scn.weights.y_max = -3.0, 3.0
    r = run_trial(scn, 0, reduced_vfs)
    assert r.shield_active.any()
    k = int(np.argmax(r.shield_active))
    assert not np.allclose(r.u_safe[k], r.u_plan[k])
    assert r.shield_log[k]["obstacles"]


def test_hv_adversarial_accelerates_to_cap(reduced_vfs):
    lane = LanePath([[-30, -0.75], [30, -0.75]])
    scn = short_scenario(duration=3.0)
    scn.hvs = [HvSpec(start=[-6, -0.75, 0], lane=lane, mode="adversarial", speed=2.0)]
    r = run_trial(scn, 1, reduced_vfs)
    v = r.hv_states[0, :, 3]
    np.testing.assert_allclose(np.diff(v)[:20], 0.1, atol=1e-12)
    assert v.max() == pytest.approx(4.0)


def test_aggregate_self_consistent():
    rows = [
        {"success": True, "completion_time": 5.0, "min_distance": 0.3, "collision": False, "avg_jerk": 2.0},
        {"success": False, "completion_time": None, "min_distance": -0.1, "collision": True, "avg_jerk": 4.0},
        {"success": True, "completion_time": 6.0, "min_distance": 0.5, "collision": False, "avg_jerk": 3.0},
        {"success": False, "completion_time": None, "min_distance": None, "collision": False, "avg_jerk": 1.0},
    ]
    a = aggregate(rows)
    assert a["success_rate"] == 50.0 and a["collision_rate"] == 25.0
    assert a["mean_completion_time"] == pytest.approx(5.5)
    assert a["mean_min_distance"] == pytest.approx(0.7 / 3)
    assert a["min_min_distance"] == pytest.approx(-0.1)
    assert a["mean_jerk"] == pytest.approx(2.5)
    with pytest.raises(ValueError):
        aggregate([])


def test_batch_matches_single_trials(reduced_vfs):
    scn = short_scenario(duration=0.5)
    rep = run_batch(scn, 2, 1, base_seed=9, value_fns=reduced_vfs)
    assert isinstance(rep, BatchReport) and len(rep.trials) == 2
    s, c = trial_seeds(9, 1, 0)
    assert rep.trials[1] == run_trial(scn, s, reduced_vfs, config_seed=c).summary()
    table = rep.summary_table("x")
    for col in TABLE_COLUMNS:
        assert col in table
    assert "plan" not in json.dumps(rep.to_dict())
    with pytest.raises(ValueError):
        run_batch(scn, 0, 1, 0, reduced_vfs)
