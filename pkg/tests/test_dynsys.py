import numpy as np
import pytest
from hypothesis import given, strategies as st

from lppvid.dynsys import (
    LimitCycle,
    OdeSystem,
    Trajectory,
    add_noise,
    find_limit_cycle,
    integrate,
    kite_rhs,
    sinusoid,
    vdp_rhs,
)
from lppvid.errors import DimensionMismatchError, NotALimitCycleError, SingularLatitudeError

from conftest import rotation_system

finite = st.floats(-5, 5, allow_nan=False)


def test_vdp_rhs_values():
    np.testing.assert_array_equal(vdp_rhs([0.0, 0.0]), [0.0, 0.0])
    np.testing.assert_array_equal(vdp_rhs([1.0, 1.0]), [1.0, -1.0])
    np.testing.assert_array_equal(vdp_rhs([2.0, 0.0]), [0.0, -2.0])


def test_vdp_rhs_forcing():
    t = 0.3
    np.testing.assert_allclose(vdp_rhs([0.0, 0.0], D=2.0, omega=5.0, t=t), [0.0, 2 * np.sin(1.5)])


def test_kite_rhs_values():
    np.testing.assert_allclose(kite_rhs([0.0, 0.0, 0.0], 0.0, 0.3), [0.3, 0.0, 0.0])
    np.testing.assert_allclose(kite_rhs([0.0, 0.0, np.pi / 2], 0.0, 0.3), [0.0, 0.3, 0.0],
                               atol=1e-15)


@given(finite, finite, finite)
def test_kite_heading_rate_is_input(theta, phi, gamma):
    theta = np.clip(theta, -1.5, 1.5)
    assert kite_rhs([theta, phi, gamma], 1.0, 0.2)[2] == 1.0


def test_kite_singular_latitude():
    with pytest.raises(SingularLatitudeError):
        kite_rhs([np.pi / 2, 0.0, 0.3], 0.0, 0.2)


@given(finite, finite)
def test_rhs_deterministic(a, b):
    sys = rotation_system()
    assert np.array_equal(sys([a, b]), sys([a, b]))
    assert sys([a, b]).shape == (2,)


def test_rhs_shape_checked():
    sys = OdeSystem(2, 0, lambda x, d, t: np.zeros(3))
    with pytest.raises(DimensionMismatchError):
        sys([0.0, 0.0])


def test_integrate_constant():
    sys = OdeSystem(2, 0, lambda x, d, t: np.zeros(2))
    tr = integrate(sys, [1.5, -2.0], t_span=(0, 3))
    np.testing.assert_array_equal(tr.states, np.tile([1.5, -2.0], (len(tr), 1)))


def test_integrate_harmonic_period():
    tol = 1e-10
    sys = OdeSystem(2, 0, lambda x, d, t: np.array([x[1], -x[0]]))
    tr = integrate(sys, [1.0, 0.0], t_span=(0, 2 * np.pi), tol=tol)
    assert np.linalg.norm(tr.states[-1] - [1.0, 0.0]) < 10 * tol


def test_integrate_derivs_match_rhs(vdp):
    tr = integrate(vdp, [2.0, 0.0], sinusoid(1.0, 3.0), (0, 2), t_eval=np.linspace(0, 2, 21))
    for k in range(len(tr)):
        assert np.array_equal(tr.derivs[k], vdp(tr.states[k], tr.inputs[k], tr.times[k]))
    np.testing.assert_allclose(tr.inputs[:, 0], np.sin(3.0 * tr.times))


def test_integrate_vdp_orbit_closes(vdp, vdp_cycle):
    x0 = vdp_cycle.nominal_states[0]
    tr = integrate(vdp, x0, t_span=(0, vdp_cycle.period), tol=1e-11)
    # half-step reference: the same orbit integrated with a step cap
    ref = integrate(vdp, x0, t_span=(0, vdp_cycle.period), tol=1e-11,
                    max_step=vdp_cycle.period / 400)
    assert np.linalg.norm(tr.states[-1] - x0) < 1e-6
    assert np.linalg.norm(tr.states[-1] - ref.states[-1]) < 1e-8


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 0)))
    with pytest.raises(DimensionMismatchError):
        Trajectory([0.0, 1.0], np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((2, 0)))


def test_trajectory_csv_round_trip(tmp_path, vdp):
    tr = integrate(vdp, [2.0, 0.0], sinusoid(1.0, 3.0), (0, 1))
    tr.to_csv(tmp_path / "t.csv")
    back = Trajectory.from_csv(tmp_path / "t.csv")
    for a in ("times", "states", "derivs", "inputs"):
        assert np.array_equal(getattr(tr, a), getattr(back, a))


def test_vdp_period(vdp_cycle):
    assert abs(vdp_cycle.period - 6.663) <= 0.005
    assert vdp_cycle.closure_error() < 1e-8
    assert np.all(np.linalg.norm(vdp_cycle.nominal_velocities, axis=1) > 0)


def test_vdp_cycle_interpolant_on_grid(vdp_cycle):
    np.testing.assert_allclose(vdp_cycle.state(vdp_cycle.tau_grid), vdp_cycle.nominal_states,
                               atol=1e-12)


def test_circle_field_period():
    cyc = find_limit_cycle(rotation_system(), [1.0, 0.0], grid_size=64)
    assert abs(cyc.period - 2 * np.pi) < 1e-8


def test_fixed_point_is_not_a_cycle():
    sys = OdeSystem(2, 0, lambda x, d, t: -x)
    with pytest.raises(NotALimitCycleError):
        find_limit_cycle(sys, [0.0, 0.0])


def test_limit_cycle_csv_round_trip(tmp_path, vdp_cycle):
    vdp_cycle.to_csv(tmp_path / "c.csv")
    back = LimitCycle.from_csv(tmp_path / "c.csv")
    assert back.period == vdp_cycle.period
    assert back.param == vdp_cycle.param
    assert np.array_equal(back.nominal_states, vdp_cycle.nominal_states)


def test_add_noise_infinite_snr(vdp):
    tr = integrate(vdp, [2.0, 0.0], t_span=(0, 1))
    noisy = add_noise(tr, np.inf, 0)
    assert np.array_equal(noisy.states, tr.states)
    assert np.array_equal(noisy.derivs, tr.derivs)


def test_add_noise_deterministic(vdp):
    tr = integrate(vdp, [2.0, 0.0], t_span=(0, 1))
    a, b = add_noise(tr, 20, 7), add_noise(tr, 20, 7)
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, add_noise(tr, 20, 8).states)


def test_add_noise_empirical_snr(vdp):
    tr = integrate(vdp, [2.0, 0.0], t_span=(0, 70), t_eval=np.linspace(0, 70, 10_000))
    noisy = add_noise(tr, 40.0, 3)
    for clean, dirty in ((tr.states, noisy.states), (tr.derivs, noisy.derivs)):
        snr = 10 * np.log10(np.mean(clean ** 2, 0) / np.mean((dirty - clean) ** 2, 0))
        assert np.all(np.abs(snr - 40.0) < 1.0)
