"""Linear periodically parameter-varying (LPPV) transverse models.

A model gives ``Omega(tau[, p])`` partitioned as ``[[A, B], [g, h]]`` with

    x_perp' = A(tau) x_perp + B(tau) d
    tau'    = 1 + g(tau) x_perp + h(tau) d

This module identifies such models from transverse datasets, tabulates the
finite-difference linearization of a known system, simulates models, and
scores predictions against ground truth. A black-box kernel model of the full
vector field is provided as a baseline.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import cho_solve

from lppvid._fourier import PeriodicInterpolant
from lppvid.dynsys import CSV_FMT, OdeSystem, integrate
from lppvid.errors import NumericalError, OracleUnreliableError
from lppvid.kernelreg import (
    IdentifiedModel,
    _cholesky,
    default_row_config,
    fit_row,
    multistart_nelder_mead,
    optimize_hypers,
)
from lppvid.transverse import (
    from_transverse,
    to_transverse,
    transverse_derivatives,
)


class LppvModel:
    """Evaluable periodic system matrix with its ``A, B, g, h`` partition."""

    def __init__(self, omega_fn, state_dim, input_dim, period, source=None, name=""):
        self._omega = omega_fn
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.period = float(period)
        self.source = source
        self.name = name
        self.hyper = []

    @property
    def n_perp(self):
        return self.state_dim - 1

    @property
    def n_theta(self):
        return self.n_perp + self.input_dim

    def omega(self, tau, p=None):
        return self._omega(tau, p)

    def A(self, tau, p=None):
        return self.omega(tau, p)[..., :self.n_perp, :self.n_perp]

    def B(self, tau, p=None):
        return self.omega(tau, p)[..., :self.n_perp, self.n_perp:]

    def g(self, tau, p=None):
        return self.omega(tau, p)[..., self.n_perp, :self.n_perp]

    def h(self, tau, p=None):
        return self.omega(tau, p)[..., self.n_perp, self.n_perp:]

    @classmethod
    def from_identified(cls, model, name=""):
        return cls(model.omega, model.state_dim, model.input_dim, model.period,
                   source=model, name=name)

    @classmethod
    def from_table(cls, tau_grid, omegas, period, state_dim, input_dim, name="", source=None):
        """Periodic trigonometric interpolation of ``Omega`` sampled on a uniform grid."""
        interp = PeriodicInterpolant(np.asarray(omegas), period, rtol=0.0)
        m = cls(lambda tau, p=None: interp(tau), state_dim, input_dim, period,
                source=source, name=name)
        m.tau_grid = np.asarray(tau_grid)
        m.table = np.asarray(omegas)
        return m


# ---------------------------------------------------------------- identification

def identify(ds, multivariate=False, budget=150, n_starts=8, seed=0, init_length_scale=1.0,
             init_length_scale_p=None, init_lambda=1e-3, hyper_max_samples=None, name=""):
    """Fit every row of ``Omega``: evidence maximization then the ridge solve.

    If ``hyper_max_samples`` is set, the evidence is maximized on an evenly
    strided subset of at most that many samples; the final ridge solve always
    uses the full dataset.
    """
    if multivariate and init_length_scale_p is None:
        spread = float(np.ptp(ds.param)) if ds.param.size else 0.0
        init_length_scale_p = spread / 2 if spread > 0 else 1.0
    ds_hyp = ds
    if hyper_max_samples is not None and len(ds) > hyper_max_samples:
        stride = int(np.ceil(len(ds) / hyper_max_samples))
        ds_hyp = ds.subset(np.arange(0, len(ds), stride))
    alphas, configs, hyper = [], [], []
    for i in range(ds.state_dim):
        init = default_row_config(i, ds.n_theta, ds.period, multivariate, init_length_scale,
                                  init_length_scale_p or 1.0, init_lambda)
        res = optimize_hypers(ds_hyp, i, init, budget=budget, n_starts=n_starts, seed=seed + i)
        alphas.append(fit_row(ds, res.config, ds.zeta[:, i]))
        configs.append(res.config)
        hyper.append(res)
    ident = IdentifiedModel(alphas, configs, ds.theta.copy(), ds.tau.copy(), ds.param.copy(),
                            ds.state_dim, ds.input_dim, ds.period)
    model = LppvModel.from_identified(ident, name=name)
    model.hyper = hyper
    return model


# ---------------------------------------------------------------- analytic oracle

def _transverse_field(sys, sf, tau, t=0.0):
    """``theta -> zeta`` of the exact transverse dynamics at phase ``tau``."""
    n_perp = sys.state_dim - 1

    def F(theta):
        xp, d = theta[:n_perp], theta[n_perp:]
        x = from_transverse(xp, tau, sf)
        xdot = sys(x, d, t)
        xp_dot, tau_dot = transverse_derivatives(x, xdot, xp, tau, sf)
        return np.concatenate([xp_dot, [tau_dot - 1.0]])

    return F


def analytic_linearization(sys, sf, tau, step=1e-5, richardson_tol=1e-4):
    """Central-difference Jacobian of the transverse field at ``x_perp = 0, d = 0``.

    Two step sizes are compared; the returned value is their Richardson
    combination. A large disagreement raises ``OracleUnreliableError``.
    """
    F = _transverse_field(sys, sf, tau)
    n_theta = sys.state_dim - 1 + sys.input_dim
    scale = max(1.0, float(np.sqrt(np.mean(np.sum(
        (sf.cycle.nominal_states - sf.cycle.nominal_states.mean(0)) ** 2, axis=1)))))
    h = step * scale

    def jac(hh):
        J = np.empty((sys.state_dim, n_theta))
        for j in range(n_theta):
            e = np.zeros(n_theta)
            e[j] = hh
            J[:, j] = (F(e) - F(-e)) / (2.0 * hh)
        return J

    J1, J2 = jac(h), jac(h / 2)
    if np.max(np.abs(J1 - J2)) > richardson_tol * max(1.0, np.max(np.abs(J2))):
        raise OracleUnreliableError(f"finite-difference levels disagree at tau={tau:.4f}")
    return (4.0 * J2 - J1) / 3.0


def analytic_model(sys, sf, grid_size=None, name="analytic"):
    """Tabulate the linearization on a uniform phase grid and interpolate it."""
    T = sf.period
    M = grid_size or sf.cycle.grid_size
    tau = np.arange(M) * (T / M)
    table = np.array([analytic_linearization(sys, sf, t) for t in tau])
    return LppvModel.from_table(tau, table, T, sys.state_dim, sys.input_dim, name=name,
                                source="analytic")


# ---------------------------------------------------------------- simulation

@dataclass
class TransverseTrajectory:
    times: np.ndarray
    x_perp: np.ndarray
    tau_unwrapped: np.ndarray
    period: float

    @property
    def tau(self):
        return np.mod(self.tau_unwrapped, self.period)

    @property
    def winding(self):
        return np.floor_divide(self.tau_unwrapped, self.period).astype(int)


def simulate(model, x_perp0, tau0, d=None, t_span=(0.0, 1.0), p=None, t_eval=None, tol=1e-10):
    """Integrate the coupled ``(x_perp, tau)`` equations of an LPPV model."""
    n_perp = model.n_perp
    zero = np.zeros(model.input_dim)
    d_fn = d if d is not None else (lambda t: zero)

    def rhs(y, u, t):
        Om = model.omega(y[-1] % model.period, p)
        theta = np.concatenate([y[:n_perp], u])
        z = Om @ theta
        return np.concatenate([z[:n_perp], [1.0 + z[n_perp]]])

    sys = OdeSystem(n_perp + 1, model.input_dim, rhs)
    y0 = np.concatenate([np.atleast_1d(np.asarray(x_perp0, float)), [float(tau0)]])
    traj = integrate(sys, y0, d_fn, t_span, tol=tol, t_eval=t_eval)
    return TransverseTrajectory(traj.times, traj.states[:, :n_perp], traj.states[:, -1],
                                model.period)


def reconstruct(ttraj, sf):
    """Full states ``x*(tau) + Pi(tau)^T x_perp`` along a transverse trajectory."""
    return np.array([from_transverse(xp, tau, sf)
                     for xp, tau in zip(ttraj.x_perp, ttraj.tau_unwrapped)])


def transverse_path(states, sf, tau0=None):
    """Transverse coordinates along a state sequence, phases kept unwrapped."""
    xps, taus = [], []
    tau = tau0
    for x in states:
        xp, tau = to_transverse(x, sf, tau)
        xps.append(xp)
        taus.append(tau)
    return np.array(xps), np.array(taus)


# ---------------------------------------------------------------- black box

@dataclass
class BlackboxModel:
    """Kernel ridge model of ``xdot`` from standardized ``(x, d, p)``."""

    inputs: np.ndarray
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    alphas: list
    length_scales: list
    lambdas: list
    state_dim: int
    input_dim: int

    def field(self, x, d, p):
        v = np.concatenate([np.atleast_1d(x), np.atleast_1d(d), np.atleast_1d(p)])
        v = (v - self.in_mean) / self.in_std
        out = np.empty(self.state_dim)
        for i in range(self.state_dim):
            r = (self.inputs - v) / self.length_scales[i]
            k = np.exp(-0.5 * np.sum(r * r, axis=1))
            out[i] = k @ self.alphas[i]
        return out * self.out_std + self.out_mean

    def to_dict(self):
        return {"format": "lppvid-blackbox-model", "version": 1,
                "state_dim": self.state_dim, "input_dim": self.input_dim,
                "inputs": self.inputs.tolist(),
                "in_mean": self.in_mean.tolist(), "in_std": self.in_std.tolist(),
                "out_mean": self.out_mean.tolist(), "out_std": self.out_std.tolist(),
                "alphas": [a.tolist() for a in self.alphas],
                "length_scales": [l.tolist() for l in self.length_scales],
                "lambdas": list(self.lambdas)}

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: np.array(d[k], float)  # noqa: E731
        return cls(arr("inputs"), arr("in_mean"), arr("in_std"), arr("out_mean"),
                   arr("out_std"), [np.array(a) for a in d["alphas"]],
                   [np.array(l) for l in d["length_scales"]], list(d["lambdas"]),
                   d["state_dim"], d["input_dim"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def blackbox_fit(trajs, p_values, budget=150, n_starts=8, seed=0, max_samples=600):
    """Per-channel SE-kernel ridge regression of ``xdot`` on ``(x, d, p)``.

    Inputs and outputs are standardized; one length scale per input
    dimension and one ridge weight per channel come from evidence
    maximization. At most ``max_samples`` evenly strided samples are used.
    """
    rows, outs = [], []
    for traj, p in zip(trajs, p_values):
        P = np.tile(np.atleast_1d(np.asarray(p, float)), (len(traj), 1))
        rows.append(np.column_stack([traj.states, traj.inputs, P]))
        outs.append(traj.derivs)
    X, Y = np.vstack(rows), np.vstack(outs)
    if max_samples is not None and len(X) > max_samples:
        keep = np.arange(0, len(X), int(np.ceil(len(X) / max_samples)))
        X, Y = X[keep], Y[keep]
    in_mean, in_std = X.mean(0), X.std(0)
    in_std[in_std == 0] = 1.0
    out_mean, out_std = Y.mean(0), Y.std(0)
    out_std[out_std == 0] = 1.0
    Xs, Ys = (X - in_mean) / in_std, (Y - out_mean) / out_std
    N, D = Xs.shape
    diff2 = (Xs[:, None, :] - Xs[None, :, :]) ** 2
    eye = np.eye(N)
    lo = np.log(np.r_[np.full(D, 1e-2), 1e-8])
    hi = np.log(np.r_[np.full(D, 1e2), 1e2])

    def gram(ls):
        return np.exp(-0.5 * diff2 @ (1.0 / ls ** 2))

    alphas, scales, lams = [], [], []
    for i in range(Y.shape[1]):
        y = Ys[:, i]

        def neg(v):
            e = np.exp(np.clip(v, lo, hi))
            try:
                c = _cholesky(gram(e[:D]) + e[D] * eye)
            except NumericalError:
                return np.inf
            a = cho_solve(c, y, check_finite=False)
            return 0.5 * y @ a + np.sum(np.log(np.diag(c[0]))) + 0.5 * N * np.log(2 * np.pi)

        v0 = np.log(np.r_[np.ones(D), 1e-2])
        v, _, _ = multistart_nelder_mead(neg, v0, lo, hi, budget, n_starts, seed + i)
        e = np.exp(v)
        c = _cholesky(gram(e[:D]) + e[D] * eye)
        alphas.append(cho_solve(c, y, check_finite=False))
        scales.append(e[:D])
        lams.append(float(e[D]))
    return BlackboxModel(Xs, in_mean, in_std, out_mean, out_std, alphas, scales, lams,
                         trajs[0].state_dim, trajs[0].input_dim)


def blackbox_predict(bb, x0, d=None, p=(), t_span=(0.0, 1.0), t_eval=None, tol=1e-8):
    sys = OdeSystem(bb.state_dim, bb.input_dim, lambda x, u, t: bb.field(x, u, p))
    return integrate(sys, x0, d, t_span, tol=tol, t_eval=t_eval)


# ---------------------------------------------------------------- metrics

@dataclass
class Prediction:
    """A predicted (or true) test trajectory. ``tau`` is unwrapped."""

    name: str
    times: np.ndarray
    states: np.ndarray
    x_perp: Optional[np.ndarray] = None
    tau: Optional[np.ndarray] = None


@dataclass
class PredictionReport:
    test_id: str
    rows: list = field(default_factory=list)

    def row(self, name):
        for r in self.rows:
            if r["model"] == name:
                return r
        raise KeyError(name)

    def ranking(self):
        return [r["model"] for r in sorted(self.rows, key=lambda r: r["rmse_state"])]

    def to_text(self):
        lines = [f"test: {self.test_id}",
                 f"{'model':<16} {'rmse_state':>22} {'rmse_transverse':>22}"]
        for r in self.rows:
            lines.append(f"{r['model']:<16} {r['rmse_state']:>22.17g} "
                         f"{r['rmse_transverse']:>22.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.strip().splitlines()
        rep = cls(lines[0].split(":", 1)[1].strip())
        for line in lines[2:]:
            name, a, b = line.split()
            rep.rows.append({"model": name, "rmse_state": float(a),
                             "rmse_transverse": float(b)})
        return rep


def _align(times, values, t_ref):
    if values is None:
        return None
    if len(times) == len(t_ref) and np.array_equal(times, t_ref):
        return np.asarray(values)
    return CubicSpline(times, values, axis=0)(t_ref)


def rmse(a, b):
    e = np.asarray(a, float) - np.asarray(b, float)
    e = e.reshape(len(e), -1)
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


def report(predictions, truth, test_id="test"):
    """RMSE of each prediction against ``truth`` on the truth's time grid.

    The transverse score uses ``(x_perp, tau - t)`` and is NaN for models
    without transverse output.
    """
    rep = PredictionReport(test_id)
    t = truth.times
    for pred in predictions:
        xs = _align(pred.times, pred.states, t)
        row = {"model": pred.name, "rmse_state": rmse(xs, truth.states),
               "rmse_transverse": float("nan")}
        if pred.x_perp is not None and truth.x_perp is not None:
            xp = _align(pred.times, pred.x_perp, t)
            tau = _align(pred.times, pred.tau, t)
            a = np.column_stack([xp, tau - t])
            b = np.column_stack([truth.x_perp, truth.tau - t])
            row["rmse_transverse"] = rmse(a, b)
        rep.rows.append(row)
    return rep


def prediction_csv(path, truth, pred):
    """Aligned columns ``t, x_true_*, x_pred_*, xperp_pred_*, tau_pred``."""
    t = truth.times
    n = truth.states.shape[1]
    xs = _align(pred.times, pred.states, t)
    cols = [t, truth.states, xs]
    header = ["t"] + [f"x_true_{i + 1}" for i in range(n)] + [f"x_pred_{i + 1}" for i in range(n)]
    if pred.x_perp is not None:
        xp = _align(pred.times, pred.x_perp, t).reshape(len(t), -1)
        cols += [xp, _align(pred.times, pred.tau, t)]
        header += [f"xperp_pred_{i + 1}" for i in range(xp.shape[1])] + ["tau_pred"]
    np.savetxt(path, np.column_stack(cols), fmt=CSV_FMT, delimiter=",",
               header=",".join(header), comments="")
