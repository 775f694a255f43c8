"""Benchmark ODE systems, trajectory integration, limit-cycle search and
measurement noise."""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from lppvid._fourier import PeriodicInterpolant
from lppvid.errors import (
    ConvergenceError,
    DimensionMismatchError,
    IntegrationError,
    NotALimitCycleError,
    SingularLatitudeError,
)

CSV_FMT = "%.17g"


@dataclass(frozen=True)
class OdeSystem:
    """Deterministic vector field ``xdot = rhs(x, d, t)``.

    ``d`` is the exogenous input of dimension ``input_dim`` (possibly 0).
    """

    state_dim: int
    input_dim: int
    rhs: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    param: tuple = ()
    name: str = "custom"

    def __call__(self, x, d=None, t=0.0):
        if d is None:
            d = np.zeros(self.input_dim)
        out = np.asarray(self.rhs(np.asarray(x, float), np.asarray(d, float), t), float)
        if out.shape != (self.state_dim,):
            raise DimensionMismatchError(
                f"rhs returned shape {out.shape}, expected ({self.state_dim},)")
        return out


@dataclass
class Trajectory:
    """Sampled simulation: times, states, state derivatives and inputs."""

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    inputs: np.ndarray
    dense: Optional[Callable] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.states = np.atleast_2d(np.asarray(self.states, float))
        self.derivs = np.atleast_2d(np.asarray(self.derivs, float))
        self.inputs = np.asarray(self.inputs, float).reshape(len(self.times), -1)
        N = len(self.times)
        if not (self.states.shape[0] == self.derivs.shape[0] == N):
            raise DimensionMismatchError("trajectory row counts differ")
        if N > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def to_csv(self, path):
        n, nd = self.state_dim, self.input_dim
        header = ",".join(["t"] + [f"x{i + 1}" for i in range(n)]
                          + [f"dx{i + 1}" for i in range(n)]
                          + [f"d{i + 1}" for i in range(nd)])
        data = np.column_stack([self.times, self.states, self.derivs, self.inputs])
        np.savetxt(path, data, fmt=CSV_FMT, delimiter=",", header=header, comments="")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            cols = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = sum(1 for c in cols if c.startswith("x"))
        nd = sum(1 for c in cols if c.startswith("d") and not c.startswith("dx"))
        return cls(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:1 + 2 * n],
                   data[:, 1 + 2 * n:1 + 2 * n + nd])


@dataclass
class LimitCycle:
    """One period of a periodic orbit resampled on a uniform phase grid."""

    period: float
    tau_grid: np.ndarray
    nominal_states: np.ndarray
    nominal_velocities: np.ndarray
    param: tuple = ()

    @property
    def state_dim(self):
        return self.nominal_states.shape[1]

    @property
    def grid_size(self):
        return len(self.tau_grid)

    @cached_property
    def interpolant(self):
        return PeriodicInterpolant(self.nominal_states, self.period)

    def state(self, tau, deriv=0):
        return self.interpolant(tau, deriv)

    def closure_error(self):
        """Distance between the interpolant at ``T`` and the first node."""
        return float(np.linalg.norm(self.state(self.period) - self.nominal_states[0]))

    def to_csv(self, path):
        n = self.state_dim
        header = ",".join(["tau"] + [f"xstar{i + 1}" for i in range(n)]
                          + [f"dxstar{i + 1}" for i in range(n)])
        data = np.column_stack([self.tau_grid, self.nominal_states, self.nominal_velocities])
        np.savetxt(path, data, fmt=CSV_FMT, delimiter=",", header=header, comments="")
        # period and param are kept in a one-line sidecar so the grid file stays plain
        with open(str(path) + ".meta", "w") as fh:
            fh.write("period," + (CSV_FMT % self.period) + "\n")
            fh.write("param," + ",".join(CSV_FMT % p for p in self.param) + "\n")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = (data.shape[1] - 1) // 2
        meta = {}
        with open(str(path) + ".meta") as fh:
            for line in fh:
                key, *vals = line.strip().split(",")
                meta[key] = [float(v) for v in vals if v]
        return cls(meta["period"][0], data[:, 0], data[:, 1:1 + n],
                   data[:, 1 + n:], tuple(meta.get("param", [])))


# ---------------------------------------------------------------- benchmarks

def vdp_rhs(x, D=0.0, omega=0.0, t=0.0, mu=1.0):
    """Forced Van der Pol field with forcing ``D sin(omega t)``."""
    x1, x2 = x
    return np.array([x2, mu * (1.0 - x1 * x1) * x2 - x1 + D * np.sin(omega * t)])


def vdp_system(mu=1.0):
    """Van der Pol oscillator with the forcing treated as the input ``d``."""

    def rhs(x, d, t):
        x1, x2 = x
        return np.array([x2, mu * (1.0 - x1 * x1) * x2 - x1 + d[0]])

    return OdeSystem(2, 1, rhs, param=(mu,), name="vanderpol")


def sinusoid(D, omega):
    """Scalar input ``t -> [D sin(omega t)]``."""
    return lambda t: np.array([D * np.sin(omega * t)])


def kite_rhs(x, u, vr):
    """Unicycle kinematics of a tethered kite, state ``(theta, phi, gamma)``."""
    theta, _, gamma = x
    c = np.cos(theta)
    if abs(c) < 1e-12:
        raise SingularLatitudeError(f"cos(theta) vanishes at theta={theta}")
    return np.array([vr * np.cos(gamma), vr * np.sin(gamma) / c, u])


# ---------------------------------------------------------------- integration

def integrate(sys, x0, input=None, t_span=(0.0, 1.0), tol=1e-10, t_eval=None,
              dense=False, max_step=np.inf):
    """Integrate ``sys`` with an adaptive 8th-order Runge-Kutta scheme.

    Samples are the accepted steps unless ``t_eval`` is given. Derivatives
    are recomputed from the right-hand side at each sample.
    """
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if input is None:
        zero = np.zeros(sys.input_dim)
        input = lambda t: zero  # noqa: E731

    def f(t, x):
        return sys(x, input(t), t)

    sol = solve_ivp(f, (t0, t1), np.asarray(x0, float), method="DOP853",
                    rtol=tol, atol=tol, t_eval=t_eval, dense_output=dense,
                    max_step=max_step)
    if sol.status != 0:
        raise IntegrationError(sol.message)
    t = sol.t
    X = sol.y.T
    keep = np.concatenate([[True], np.diff(t) > 0])
    t, X = t[keep], X[keep]
    U = np.array([np.atleast_1d(input(tk)) for tk in t]).reshape(len(t), sys.input_dim)
    dX = np.array([sys(X[k], U[k], t[k]) for k in range(len(t))])
    return Trajectory(t, X, dX, U, dense=sol.sol if dense else None)


def find_limit_cycle(sys, x0_guess, settle_periods=10, tol=1e-8, grid_size=512,
                     max_rounds=50, max_time=None, integ_tol=1e-12):
    """Locate an attracting periodic orbit of the autonomous system.

    Crossings of a section anchored at the current state (normal along the
    flow) are located in rounds of ``settle_periods`` returns. Once two
    successive returns agree, the crossing is re-anchored, the period is
    refined by root-finding on the crossing function, and one period is
    resampled onto ``grid_size`` uniform phase points.
    """
    x = np.asarray(x0_guess, float)
    zero = np.zeros(sys.input_dim)

    def f(t, y):
        return sys(y, zero, t)

    def returns(x_a, n_returns, t_budget):
        normal = f(0.0, x_a)
        if not np.any(normal):
            raise NotALimitCycleError("section anchored at a fixed point")

        def crossing(t, y):
            return normal @ (y - x_a)

        crossing.direction = 1.0
        # a spurious event at t=0 can appear from roundoff; allow one extra
        crossing.terminal = n_returns + 1
        sol = solve_ivp(f, (0.0, t_budget), x_a, method="DOP853", rtol=integ_tol,
                        atol=integ_tol, events=crossing)
        if sol.status == -1:
            raise IntegrationError(sol.message)
        # solve_ivp refines events with Brent's method on the dense output
        t_ev = sol.t_events[0]
        y_ev = sol.y_events[0]
        keep = t_ev > 1e-9
        return t_ev[keep][:n_returns], y_ev[keep][:n_returns]

    budget = max_time
    scale = max(1.0, float(np.linalg.norm(x)))
    converged = False
    for _ in range(max_rounds):
        t_budget = budget if budget is not None else 1e3
        t_ev, y_ev = returns(x, settle_periods, t_budget)
        if len(t_ev) < 2:
            raise NotALimitCycleError("no recurrent section crossings within budget")
        periods = np.diff(np.concatenate([[0.0], t_ev]))
        x_new = y_ev[-1]
        if (abs(periods[-1] - periods[-2]) < tol * periods[-1]
                and np.linalg.norm(y_ev[-1] - y_ev[-2]) < tol * scale):
            converged = True
            x = x_new
            break
        x = x_new
    if not converged:
        raise ConvergenceError("section returns did not settle")

    t_ev, y_ev = returns(x, 1, 2.0 * periods[-1])
    if len(t_ev) != 1:
        raise ConvergenceError("period refinement failed")
    period = float(t_ev[0])
    tau = np.arange(grid_size) * (period / grid_size)
    sol = solve_ivp(f, (0.0, period), x, method="DOP853", rtol=integ_tol, atol=integ_tol,
                    dense_output=True)
    X = sol.sol(tau).T
    closure = np.linalg.norm(sol.y[:, -1] - x)
    if closure > tol * scale:
        raise ConvergenceError(f"orbit does not close: {closure:.3e}")
    V = np.array([f(0.0, xm) for xm in X])
    if np.any(np.linalg.norm(V, axis=1) == 0.0):
        raise NotALimitCycleError("fixed point on the orbit")
    return LimitCycle(period, tau, X, V, tuple(sys.param))


def add_noise(traj, snr_db, seed):
    """Add white Gaussian noise to states and derivatives at a per-channel SNR.

    Signal power is the mean square of each channel over the trajectory.
    Times and inputs are returned unchanged.
    """
    if np.isinf(snr_db) and snr_db > 0:
        return Trajectory(traj.times.copy(), traj.states.copy(), traj.derivs.copy(),
                          traj.inputs.copy())
    rng = np.random.default_rng(seed)
    ratio = 10.0 ** (snr_db / 10.0)

    def noisy(a):
        sigma = np.sqrt(np.mean(a * a, axis=0) / ratio)
        return a + rng.standard_normal(a.shape) * sigma

    return Trajectory(traj.times.copy(), noisy(traj.states), noisy(traj.derivs),
                      traj.inputs.copy())
