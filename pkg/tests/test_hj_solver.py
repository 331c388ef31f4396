import numpy as np
import pytest
from sklearn.base import clone

from dualshield.grid import GridSpec
from dualshield.hj_solver import (
    ReachabilitySolver,
    SolverConfig,
    SolverDivergenceError,
    _lf_increment,
    _time_step,
    dissipation_bounds,
    hamiltonian,
    hv_grid,
    hv_relative_model,
    solve,
    static_grid,
    static_obstacle_model,
    stopping_grid,
    stopping_model,
    terminal_values,
    zero_crossings,
)

TINY_HV = (21, 21, 8, 3, 3)


@pytest.fixture(scope="module")
def tiny_hv():
    model = hv_relative_model()
    spec = hv_grid(TINY_HV)
    return model, spec, solve(model, spec, SolverConfig(t_hj=1.0, log_progress=False))


def test_terminal_values_examples():
    spec = GridSpec.from_bounds((-1, -1), (1, 1), (3, 3))
    hv = hv_relative_model()
    st = static_obstacle_model()
    assert hv.margin([np.array(1.0), np.array(0.0)]) == pytest.approx(0.64)
    assert hv.margin([np.array(0.6), np.array(0.0)]) == pytest.approx(0.0)
    assert st.margin([np.array(0.0), np.array(0.3)]) == pytest.approx(-0.07)
    l = terminal_values(static_grid((3, 3, 2)), st)
    assert l.shape == (3, 3, 2) and l[1, 1, 0] == pytest.approx(-0.16)
    with pytest.raises(ValueError):
        terminal_values(spec, hv)


def test_hamiltonian_examples(rng):
    m = hv_relative_model()
    assert hamiltonian(m, [1, 0, 0, 1, 1], [1, 0, 0, 0, 0]) == pytest.approx(0.0)
    for _ in range(5):
        x = rng.uniform([-8, -8, 0, 0, 0], [8, 8, 2 * np.pi, 4, 4])
        assert hamiltonian(m, x, [0, 0, 1, 0, 0]) == pytest.approx(5 * np.pi / 18)
    x = rng.uniform([-8, -8, 0, 0, 0], [8, 8, 2 * np.pi, 4, 4], size=(50, 5))
    p = rng.normal(size=(50, 5))
    np.testing.assert_allclose(hamiltonian(m, x, 2 * p), 2 * hamiltonian(m, x, p), rtol=1e-12, atol=1e-12)


def test_hamiltonian_is_sup_inf(rng):
    """Closed form equals brute-force max-min over box vertices (linear in each input)."""
    m = hv_relative_model()
    from dualshield.dynamics import relative_derivative

    corners_u = [(w, a) for w in (-np.pi / 3, np.pi / 3) for a in (-1, 1)]
    corners_h = [(w, a) for w in (-np.pi / 18, np.pi / 18) for a in (-1, 1)]
    for _ in range(30):
        x = rng.uniform([-8, -8, 0, 0, 0], [8, 8, 2 * np.pi, 4, 4])
        p = rng.normal(size=5)
        brute = max(min(p @ relative_derivative(x, u, uh) for uh in corners_h) for u in corners_u)
        assert hamiltonian(m, x, p) == pytest.approx(brute, abs=1e-10)


def test_dissipation_bounds_examples():
    a = dissipation_bounds(hv_relative_model(), hv_grid((100, 100, 64, 8, 8)))
    assert a[0] == pytest.approx(4 + 4 + 8 * np.pi / 3)
    assert a[2] == pytest.approx(np.pi / 3 + np.pi / 18)
    assert a[3] == pytest.approx(1.0) and a[4] == pytest.approx(1.0)
    assert a[1] >= 4 + 8 * np.pi / 3 - 1e-12


def test_zero_horizon_identity():
    m = static_obstacle_model()
    spec = static_grid((11, 11, 3))
    vf = solve(m, spec, SolverConfig(t_hj=0.0))
    assert np.array_equal(vf.values, terminal_values(spec, m))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(t_hj=-1)
    with pytest.raises(ValueError):
        SolverConfig(cfl=1.5)
    with pytest.raises(ValueError):
        SolverConfig(scheme="weno5")


def test_stopping_game_boundary():
    vf = solve(stopping_model(), stopping_grid(), SolverConfig(t_hj=4.0, log_progress=False))
    z = zero_crossings(vf, axis=0)
    v = vf.spec.axes[1].nodes
    band = (v >= 0.5 - 1e-9) & (v <= 3.5 + 1e-9)
    assert np.all(np.abs(z[band] - v[band] ** 2 / 2) <= 2 * vf.spec.axes[0].spacing)


def test_small_hv_invariants(tiny_hv):
    model, spec, vf = tiny_hv
    l = terminal_values(spec, model)
    assert np.all(vf.values <= l)
    c = spec.coordinates(sparse=False)
    far = np.hypot(c[0], c[1]) > model.r_s + 8.0 * 1.0
    assert far.any() and np.all(vf.values[far] > 0)


def test_horizon_monotone_small(tiny_hv):
    model, spec, v1 = tiny_hv
    v05 = solve(model, spec, SolverConfig(t_hj=0.5, log_progress=False))
    assert np.all(v1.values <= v05.values)


def test_deterministic(tiny_hv):
    model, spec, vf = tiny_hv
    again = solve(model, spec, SolverConfig(t_hj=1.0, log_progress=False))
    assert np.array_equal(again.values, vf.values)


def test_chunking_does_not_change_result(tiny_hv):
    model, spec, vf = tiny_hv
    chunked = solve(model, spec, SolverConfig(t_hj=1.0, log_progress=False, chunk_nodes=3000))
    assert np.array_equal(chunked.values, vf.values)


def test_update_monotone_in_neighbours(rng):
    """Raising one stencil neighbour never lowers the updated value under the CFL step."""
    model = hv_relative_model()
    spec = hv_grid((9, 9, 8, 3, 3))
    coords = spec.coordinates(sparse=True)
    alpha = dissipation_bounds(model, spec)
    dt = _time_step(spec, alpha, 0.8)
    base = terminal_values(spec, model) + rng.normal(scale=0.1, size=spec.shape)
    upd = base + dt * _lf_increment(model, spec, coords, alpha, base, 0, spec.shape[0])
    for _ in range(20):
        node = tuple(int(rng.integers(1, n - 1)) for n in spec.shape)
        axis = int(rng.integers(5))
        nb = list(node)
        nb[axis] += 1 if rng.random() < 0.5 else -1
        bumped = base.copy()
        bumped[tuple(nb)] += 0.5
        upd2 = bumped + dt * _lf_increment(model, spec, coords, alpha, bumped, 0, spec.shape[0])
        assert upd2[node] >= upd[node] - 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported():
    m = stopping_model()
    # alternating near-overflow terminal values make the one-sided differences inf - inf
    m.failure = lambda c: 1.7e308 * np.cos(np.pi * c[0] / 0.8) + 0.0 * c[1]
    with pytest.raises(SolverDivergenceError) as exc:
        solve(m, stopping_grid((11, 6)), SolverConfig(t_hj=0.5, log_progress=False))
    assert exc.value.step >= 1


def test_non_finite_dissipation_rejected():
    m = stopping_model()
    m.drift = lambda c: [np.full(np.broadcast(*c).shape, np.inf), 0.0]
    with pytest.raises(ValueError):
        solve(m, stopping_grid((11, 6)), SolverConfig(t_hj=0.5, log_progress=False))


def test_progress_log(caplog):
    import logging

    with caplog.at_level(logging.INFO, logger="dualshield.hj_solver"):
        solve(stopping_model(), stopping_grid((11, 6)), SolverConfig(t_hj=0.2))
    assert any("step 1 /" in r.getMessage() and "min V" in r.getMessage() for r in caplog.records)


def test_estimator_interface():
    est = ReachabilitySolver(model="static3d", counts=(21, 21, 3), t_hj=0.5)
    assert clone(est).get_params()["counts"] == (21, 21, 3)
    est.fit()
    assert est.value_function_.meta["model"] == "static3d"
    out = est.predict(np.array([[5.0, 5.0, 1.0], [0.0, 0.0, 0.0]]))
    assert out[0] > 0 > out[1]
    with pytest.raises(ValueError):
        ReachabilitySolver(model="car").fit()
