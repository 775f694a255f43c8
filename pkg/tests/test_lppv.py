import numpy as np
import pytest

from lppvid.dynsys import OdeSystem, integrate
from lppvid.errors import OracleUnreliableError
from lppvid.lppv import (
    BlackboxModel,
    LppvModel,
    Prediction,
    PredictionReport,
    analytic_linearization,
    analytic_model,
    blackbox_fit,
    blackbox_predict,
    identify,
    reconstruct,
    report,
    rmse,
    simulate,
    transverse_path,
)
from lppvid.transverse import TransverseDataset, build_center_surfaces, build_orthogonal_surfaces

from conftest import circle_cycle, rotation_system


def constant_model(Om, period=2.0, n=3, nd=0):
    Om = np.asarray(Om, float)
    return LppvModel(lambda tau, p=None: Om if np.ndim(tau) == 0 else
                     np.broadcast_to(Om, (len(tau),) + Om.shape), n, nd, period)


def test_partition():
    Om = np.arange(12.0).reshape(3, 4)
    m = constant_model(Om, n=3, nd=2)
    np.testing.assert_array_equal(m.A(0.0), Om[:2, :2])
    np.testing.assert_array_equal(m.B(0.0), Om[:2, 2:])
    np.testing.assert_array_equal(m.g(0.0), Om[2, :2])
    np.testing.assert_array_equal(m.h(0.0), Om[2, 2:])


def test_simulate_nominal():
    rng = np.random.default_rng(0)
    m = constant_model(rng.standard_normal((3, 2)))
    tt = simulate(m, [0.0, 0.0], 0.7, t_span=(0, 5), t_eval=np.linspace(0, 5, 11))
    assert np.max(np.abs(tt.x_perp)) == 0.0
    np.testing.assert_allclose(tt.tau_unwrapped, 0.7 + tt.times, atol=1e-12)
    np.testing.assert_allclose(tt.tau, np.mod(0.7 + tt.times, 2.0), atol=1e-12)


def test_simulate_linear_scaling():
    A = np.array([[-0.5, 1.0], [-1.0, -0.2]])
    m = constant_model(np.vstack([A, [0.3, -0.1]]))
    t = np.linspace(0, 3, 7)
    a = simulate(m, [0.1, 0.0], 0.0, t_span=(0, 3), t_eval=t)
    b = simulate(m, [0.2, 0.0], 0.0, t_span=(0, 3), t_eval=t)
    np.testing.assert_allclose(b.x_perp, 2 * a.x_perp, rtol=0, atol=1e-9)
    # with constant A the transverse part is a matrix exponential
    from scipy.linalg import expm
    np.testing.assert_allclose(a.x_perp[-1], expm(3 * A) @ [0.1, 0.0], atol=1e-9)


def test_analytic_rotation_orthogonal():
    cyc = circle_cycle(64)
    sf = build_orthogonal_surfaces(cyc)
    for tau in (0.0, 1.3, 4.0):
        J = analytic_linearization(rotation_system(), sf, tau)
        # rigid rotation: radius is conserved and the angular rate is one
        np.testing.assert_allclose(J, 0.0, atol=1e-8)


def test_analytic_vdp_periodic_and_converged(vdp, vdp_center):
    T = vdp_center.period
    a = analytic_linearization(vdp, vdp_center, 1.0)
    b = analytic_linearization(vdp, vdp_center, 1.0 + T)
    np.testing.assert_allclose(a, b, atol=1e-7)
    c = analytic_linearization(vdp, vdp_center, 1.0, step=2e-5)
    np.testing.assert_allclose(a, c, atol=1e-6)


def test_analytic_vdp_input_column(vdp, vdp_center):
    # the input enters the state as d e2; on the cycle its effect on the
    # transverse rates is B = Pi e2 - (Pi x*') z2 / (z^T x*'), h = z2 / (z^T x*')
    from lppvid.transverse import frame_eval

    for tau in (0.5, 2.5):
        J = analytic_linearization(vdp, vdp_center, tau)
        fr = frame_eval(vdp_center, tau)
        den = fr.normal @ fr.xstar_dtau
        h = fr.normal[1] / den
        B = fr.proj[0, 1] - (fr.proj[0] @ fr.xstar_dtau) * h
        assert abs(J[0, 1] - B) < 1e-6
        assert abs(J[1, 1] - h) < 1e-6


def test_analytic_oracle_unreliable():
    cyc = circle_cycle(64)
    sf = build_center_surfaces(cyc, [0.0, 0.0])
    rough = OdeSystem(2, 0, lambda x, d, t: np.array([-x[1], x[0]]) * (1 + 1e8 * (x[0] - 1) ** 3))
    with pytest.raises(OracleUnreliableError):
        analytic_linearization(rough, sf, 0.0)


def test_analytic_model_interpolates(vdp, vdp_center):
    m = analytic_model(vdp, vdp_center, grid_size=64)
    tau = m.tau_grid[5]
    np.testing.assert_allclose(m.omega(tau), m.table[5], atol=1e-10)
    mid = 0.5 * (m.tau_grid[5] + m.tau_grid[6])
    np.testing.assert_allclose(m.omega(mid), analytic_linearization(vdp, vdp_center, mid),
                               atol=1e-3)


def test_identify_zero_targets():
    rng = np.random.default_rng(1)
    N, T = 80, 2.0
    ds = TransverseDataset(rng.standard_normal((N, 2)), np.zeros((N, 3)), rng.uniform(0, T, N),
                           np.zeros((N, 0)), T, 3, 0)
    m = identify(ds, budget=40, n_starts=2)
    assert np.max(np.abs(m.omega(np.linspace(0, T, 9)))) < 1e-6


def test_reconstruct_and_path_round_trip(vdp_center):
    sf = vdp_center
    m = constant_model(np.array([[-0.3, 0.0], [0.05, 0.0]]), period=sf.period, n=2, nd=1)
    tt = simulate(m, [0.1], 1.0, t_span=(0, 4), t_eval=np.linspace(0, 4, 30))
    X = reconstruct(tt, sf)
    xp, tau = transverse_path(X, sf, 1.0)
    np.testing.assert_allclose(xp, tt.x_perp, atol=1e-9)
    np.testing.assert_allclose(tau, tt.tau_unwrapped, atol=1e-9)


def test_blackbox_linear_system(tmp_path):
    sys = OdeSystem(2, 0, lambda x, d, t: -x)
    trajs = [integrate(sys, x0, t_span=(0, 2), t_eval=np.linspace(0, 2, 25))
             for x0 in ([1.0, 0.5], [-0.5, 1.0], [0.3, -1.0])]
    bb = blackbox_fit(trajs, [(), (), ()], budget=60, n_starts=2)
    for tr in trajs:
        for k in range(0, 25, 6):
            np.testing.assert_allclose(bb.field(tr.states[k], [], ()), tr.derivs[k], atol=1e-2)
    bb.save(tmp_path / "bb.json")
    back = BlackboxModel.load(tmp_path / "bb.json")
    assert np.array_equal(back.field([0.2, 0.1], [], ()), bb.field([0.2, 0.1], [], ()))
    again = blackbox_fit(trajs, [(), (), ()], budget=60, n_starts=2)
    assert np.array_equal(again.alphas[0], bb.alphas[0])
    pred = blackbox_predict(bb, [1.0, 0.5], t_span=(0, 1), t_eval=np.linspace(0, 1, 5))
    np.testing.assert_allclose(pred.states[-1], np.exp(-1) * np.array([1.0, 0.5]), atol=2e-2)


def _truth(n=50):
    t = np.linspace(0, 1, n)
    X = np.column_stack([np.sin(t), np.cos(t)])
    return Prediction("truth", t, X, X[:, :1], t)


def test_report_identity_and_offset():
    truth = _truth()
    c = np.array([0.3, -0.4])
    shifted = Prediction("shift", truth.times, truth.states + c)
    rep = report([Prediction("same", truth.times, truth.states, truth.x_perp, truth.tau),
                  shifted], truth)
    assert rep.row("same")["rmse_state"] == 0.0
    assert rep.row("same")["rmse_transverse"] == 0.0
    assert abs(rep.row("shift")["rmse_state"] - np.linalg.norm(c)) < 1e-14
    assert np.isnan(rep.row("shift")["rmse_transverse"])


def test_report_ranking_matches_pairwise():
    truth = _truth()
    rng = np.random.default_rng(2)
    preds = [Prediction(f"m{k}", truth.times, truth.states + s * rng.standard_normal((50, 2)))
             for k, s in enumerate((0.3, 0.01, 0.1))]
    rep = report(preds, truth)
    direct = sorted(preds, key=lambda p: rmse(p.states, truth.states))
    assert rep.ranking() == [p.name for p in direct] == ["m1", "m2", "m0"]
    back = PredictionReport.from_text(rep.to_text())
    assert back.ranking() == rep.ranking()
    assert back.row("m1")["rmse_state"] == rep.row("m1")["rmse_state"]


def test_report_aligns_time_grids():
    truth = _truth(101)
    fine_t = np.linspace(0, 1, 401)
    fine = Prediction("fine", fine_t, np.column_stack([np.sin(fine_t), np.cos(fine_t)]))
    assert report([fine], truth).row("fine")["rmse_state"] < 1e-8

