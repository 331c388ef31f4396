import numpy as np
import pytest

from dualshield.dynamics import Trajectory, forward_equivalent, relative_state, rollout
from dualshield.grid import GridSpec, ValueFunction
from dualshield.objective import (
    ObjectiveWeights,
    PlanningScene,
    ValueFunctionSet,
    boundary_cost,
    circle_centres,
    constant_velocity_prediction,
    distance_penalty_terms,
    goal_cost,
    hj_penalty_terms,
    min_distances,
    min_values,
    nearest_statics,
    performance_costs,
    rule_cost,
    safety_penalty,
    spin_cost,
    static_relative,
    total_cost,
    trajectory_costs,
)

W = ObjectiveWeights()
GOAL = np.array([2.0, -0.7, 0.0, 0.5])
Q = W.Q


def test_goal_cost_examples():
    assert goal_cost(GOAL, GOAL, Q) == 0
    assert goal_cost([5, -0.7, 0, 0.5], GOAL, Q) == 0
    assert goal_cost([2, 0.7, np.pi, 0.5], GOAL, Q) == pytest.approx(20 * 1.4**2 + 5 * np.pi**2)
    assert goal_cost([2, -0.7, 2 * np.pi - 0.1, 0.5], GOAL, Q) == pytest.approx(5 * 0.01)


def test_rule_cost_examples():
    assert rule_cost([0, -0.7, 0.3, 1], W) == 0
    assert rule_cost([0, 0.5, 0.0, 1], W) == pytest.approx(25.0)
    assert rule_cost([0, 0.5, np.pi, 1], W) == 0


def test_boundary_cost_examples():
    assert boundary_cost([0, 0, 0, 0], W) == 0
    assert boundary_cost([0, 1.6, 0, 0], W) == pytest.approx(0.2)
    assert boundary_cost([0, -2.0, 0, 0], W) == pytest.approx(5.0)


def test_spin_cost_examples():
    assert spin_cost([0, 0, 0, 1], [0, 1], W) == 0
    assert spin_cost([0, 0, 0, 0], [np.pi / 3, 0], W) == pytest.approx((np.pi / 3) ** 2)
    assert spin_cost([0, 0, 0, 2], [np.pi / 3, 0], W) == pytest.approx((np.pi / 3) ** 2 * np.exp(-20), rel=1e-9)


def test_weights_validation():
    with pytest.raises(ValueError):
        ObjectiveWeights(gamma=-1)
    with pytest.raises(ValueError):
        ObjectiveWeights(y_min=1, y_max=0)
    with pytest.raises(ValueError):
        ObjectiveWeights(Q=(1, 2, 3))
    with pytest.raises(ValueError):
        ObjectiveWeights.from_dict({"bogus": 1})
    assert ObjectiveWeights.from_dict(W.to_dict()) == W


def test_hj_penalty_examples():
    assert hj_penalty_terms(np.array([0.1, 0.0, 3.0]), W).sum() == 0
    assert hj_penalty_terms(-0.2, W) == pytest.approx(2.0)
    v = np.array([0.3, -0.1, -0.4, 0.2])
    base = hj_penalty_terms(v, W).sum()
    for k in range(4):
        lower = v.copy()
        lower[k] -= 0.5
        assert hj_penalty_terms(lower, W).sum() >= base


def _flat_vfs(hv_value=1.0, static_value=2.0):
    hv = ValueFunction(GridSpec.from_bounds((-8, -8, 0, 0, 0), (8, 8, 2 * np.pi, 4, 4), (2, 2, 4, 2, 2),
                                            (False, False, True, False, False)), np.full((2, 2, 4, 2, 2), hv_value))
    st = ValueFunction(GridSpec.from_bounds((-8, -8, 0), (8, 8, 4), (2, 2, 2)), np.full((2, 2, 2), static_value))
    return ValueFunctionSet(hv, st)


def test_min_values_and_penalty_use_all_obstacles():
    states = np.zeros((3, 4))
    scene = PlanningScene(goal=GOAL, hv_prediction=np.zeros((2, 3, 4)), statics=[[1, 0]], value_fns=_flat_vfs(-0.2, 0.5))
    np.testing.assert_allclose(min_values(states, scene), -0.2)
    scene = PlanningScene(goal=GOAL, hv_prediction=np.zeros((2, 3, 4)), statics=[[1, 0]], value_fns=_flat_vfs(0.5, -0.3))
    np.testing.assert_allclose(min_values(states, scene), -0.3)
    traj = np.zeros((4, 4))
    # pairs k = 0..N-1 only: three of the four states count
    assert safety_penalty(traj, scene, W) == pytest.approx(3 * 10 * 0.3)


def test_min_values_matches_direct_lookup(reduced_vfs, rng):
    hv = rng.uniform([-3, -1, -np.pi, 0.5], [3, 1, np.pi, 2], size=(2, 4))
    statics = rng.uniform(-4, 4, size=(6, 2))
    pred = constant_velocity_prediction(hv, 5, 0.1)
    scene = PlanningScene(goal=GOAL, hv_prediction=pred, statics=statics, value_fns=reduced_vfs)
    states = rollout([0, 0, 0.2, 1.0], rng.normal(size=(5, 2)), 0.1).states
    got = min_values(states, scene)
    for k, s in enumerate(states[:5]):
        vals = [reduced_vfs.hv_value(s, pred[m, k]) for m in range(2)]
        idx = nearest_statics(s, statics, 3)
        vals += [reduced_vfs.static_value(s, statics[j]) for j in idx]
        assert got[k] == pytest.approx(min(vals), abs=1e-12)


def test_nearest_statics_order(rng):
    centers = rng.uniform(-5, 5, size=(12, 2))
    pos = rng.uniform(-5, 5, size=(40, 2))
    idx = nearest_statics(pos, centers, 3)
    ref = np.argsort(np.sum((pos[:, None] - centers) ** 2, axis=-1), axis=1, kind="stable")[:, :3]
    assert np.array_equal(idx, ref)
    assert nearest_statics(pos[0], centers[:2], 3).shape == (2,)


def test_static_relative_frame():
    np.testing.assert_allclose(static_relative([0, 0, np.pi / 2, 1.5], [0, 2]), [2, 0, 1.5], atol=1e-12)


def test_constant_velocity_prediction():
    pred = constant_velocity_prediction([[0, 0, np.pi / 2, 2.0]], 3, 0.1)
    np.testing.assert_allclose(pred[0, :, 1], [0, 0.2, 0.4, 0.6], atol=1e-12)
    np.testing.assert_allclose(pred[0, :, 3], 2.0)


def test_distance_guidance():
    scene = PlanningScene(goal=GOAL, hv_prediction=np.array([[[0.5, 0, 0, 0]]]), statics=np.zeros((0, 2)))
    clearance = min_distances(np.zeros((1, 4)), scene)
    assert clearance[0] == pytest.approx(0.5 - 0.6)
    assert distance_penalty_terms(clearance, W)[0] == pytest.approx(10 * 0.2)
    with pytest.raises(ValueError):
        safety_penalty(np.zeros((2, 4)), scene, W, guidance="potential")


def test_total_cost_examples():
    goal = np.array([0.0, -0.7, 0.0, 0.0])
    tr = rollout(goal, np.zeros((5, 2)), 0.1)
    assert total_cost(tr, PlanningScene(goal=goal), W) == 0
    start = np.array([2, 0.7, np.pi, 0.5])
    one = Trajectory(states=np.stack([start, start]), controls=np.zeros((1, 2)), dt=0.1)
    assert total_cost(one, PlanningScene(goal=GOAL), W) == pytest.approx(20 * 1.4**2 + 5 * np.pi**2)


def test_decomposition(reduced_vfs, rng):
    hv = np.array([[-2.0, -0.75, 0.0, 1.0]])
    scene = PlanningScene(goal=GOAL, hv_prediction=constant_velocity_prediction(hv, 8, 0.1),
                          statics=[[3.0, 0.0], [-2.0, 0.0], [4.0, 0.0], [5.0, 0.0]], value_fns=reduced_vfs)
    for _ in range(100):
        tr = rollout([2, 0.7, np.pi, 0.5], rng.normal(size=(8, 2)), 0.1)
        x, u = tr.states[:-1], tr.controls
        manual = sum(
            goal_cost(x[k], GOAL, Q) + rule_cost(x[k], W) + boundary_cost(x[k], W) + spin_cost(x[k], u[k], W)
            for k in range(8)
        )
        manual += W.lambda_s * sum(hj_penalty_terms(v, W) for v in min_values(tr.states, scene)[:8])
        assert total_cost(tr, scene, W) == pytest.approx(manual, abs=1e-9)


def test_costs_nonnegative_and_x_invariant(rng):
    controls = rng.normal(size=(30, 10, 2))
    from dualshield.dynamics import rollout_batch

    s1, u1 = rollout_batch([0, 0.3, 1.0, 0.5], controls, 0.1)
    s2, _ = rollout_batch([7.5, 0.3, 1.0, 0.5], controls, 0.1)
    scene = PlanningScene(goal=GOAL)
    c1 = trajectory_costs(s1, u1, scene, W)
    assert np.all(c1 >= 0) and np.all(performance_costs(s1, u1, GOAL, W) >= 0)
    np.testing.assert_allclose(c1, trajectory_costs(s2, u1, scene, W), rtol=1e-12)


def test_missing_value_functions():
    scene = PlanningScene(goal=GOAL, hv_prediction=np.zeros((1, 2, 4)))
    with pytest.raises(LookupError):
        min_values(np.zeros((2, 4)), scene)
    with pytest.raises(LookupError):
        ValueFunctionSet().hv_value(np.zeros(4), np.zeros(4))


def test_circle_centres():
    s = np.array([1.0, 2.0, np.pi / 2, 0.5])
    c = circle_centres(s, 0.25)
    np.testing.assert_allclose(c[:, :2], [[1.0, 2.25], [1.0, 1.75]], atol=1e-15)
    np.testing.assert_array_equal(c[:, 2:], [[np.pi / 2, 0.5]] * 2)
    np.testing.assert_array_equal(circle_centres(s, 0.0), s[None])


def test_footprint_pairs_match_direct_lookup(reduced_vfs, rng):
    hv = np.array([[1.2, 0.1, 0.3, 1.0], [-2.0, 1.0, 2.0, 1.5]])
    statics = rng.uniform(-3, 3, size=(5, 2))
    pred = constant_velocity_prediction(hv, 4, 0.1)
    scene = PlanningScene(goal=GOAL, hv_prediction=pred, statics=statics, value_fns=reduced_vfs,
                          footprint_offset=0.25)
    states = rollout([0, 0, 0.1, 1.0], rng.normal(size=(4, 2)), 0.1).states[:4]
    got = min_values(states, scene)
    for k, s in enumerate(states):
        vals = [reduced_vfs.hv.interpolate(relative_state(e, h))
                for m in range(2) for e in circle_centres(s, 0.25) for h in circle_centres(pred[m, k], 0.25)]
        vals += [reduced_vfs.static.interpolate(static_relative(e, statics[j]))
                 for j in nearest_statics(s, statics, 3) for e in circle_centres(s, 0.25)]
        assert got[k] == pytest.approx(min(vals), abs=1e-12)


def test_footprint_sees_inline_contact(reduced_vfs):
    # nose to tail 1.0 m apart: centres clear the 0.6 m radius, circles overlap
    ego = np.array([[0.0, 0.0, 0.0, 0.0]])
    hv = np.array([[[-1.0, 0.0, 0.0, 0.0]]])
    centre = PlanningScene(goal=GOAL, hv_prediction=hv, value_fns=reduced_vfs)
    paired = PlanningScene(goal=GOAL, hv_prediction=hv, value_fns=reduced_vfs, footprint_offset=0.25)
    assert min_values(ego, centre)[0] > 0 > min_values(ego, paired)[0]


def test_forward_equivalent():
    s = np.array([[1.0, 2.0, 0.5, -0.8], [1.0, 2.0, 0.5, 0.8]])
    f = forward_equivalent(s)
    np.testing.assert_allclose(f[0], [1.0, 2.0, 0.5 - np.pi, 0.8])
    np.testing.assert_array_equal(f[1], s[1])
    assert s[0, 3] == -0.8  # input untouched


def test_reversing_lookup_uses_mirrored_state(reduced_vfs):
    hv = np.array([[[2.0, 0.3, np.pi, 1.0]]])
    scene = PlanningScene(goal=GOAL, hv_prediction=hv, statics=[[-1.0, 0.2]], value_fns=reduced_vfs)
    back = np.array([[0.0, 0.0, 0.0, -1.0]])
    fwd = np.array([[0.0, 0.0, np.pi, 1.0]])
    assert min_values(back, scene)[0] == pytest.approx(min_values(fwd, scene)[0], abs=1e-12)
