"""Figure-eight reference for the tethered kite and periodic LQR transverse
feedback that turns the reference into an attracting closed-loop orbit."""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from lppvid._fourier import PeriodicInterpolant
from lppvid.dynsys import CSV_FMT, LimitCycle, OdeSystem, kite_rhs
from lppvid.errors import ConvergenceError, NoClosedOrbitError, RiccatiDivergenceError
from lppvid.lppv import analytic_linearization
from lppvid.transverse import track_phase


# ---------------------------------------------------------------- reference

@dataclass(frozen=True)
class KiteReference:
    """Heading reference ``gamma*(tau) = a cos(omega* tau + b)``."""

    a: float
    b: float
    omega_star: float
    vr: float
    theta0: float
    phi0: float
    closure_error: float = 0.0

    @property
    def period(self):
        return 2.0 * np.pi / self.omega_star

    def gamma_star(self, tau):
        return self.a * np.cos(self.omega_star * np.asarray(tau, float) + self.b)

    def u_star(self, tau):
        return -self.a * self.omega_star * np.sin(self.omega_star * np.asarray(tau, float) + self.b)

    @property
    def initial_state(self):
        return np.array([self.theta0, self.phi0, float(self.gamma_star(0.0))])

    def to_dict(self):
        return {"a": self.a, "b": self.b, "omega_star": self.omega_star, "vr": self.vr,
                "theta0": self.theta0, "phi0": self.phi0, "closure_error": self.closure_error}


def _nominal_solution(a, b, omega_star, vr, x0, t_end, dense=False):
    def f(t, x):
        return kite_rhs(x, -a * omega_star * np.sin(omega_star * t + b), vr)

    sol = solve_ivp(f, (0.0, t_end), x0, method="DOP853", rtol=1e-12, atol=1e-12,
                    dense_output=dense)
    if sol.status != 0:
        raise NoClosedOrbitError(sol.message)
    return sol


def build_reference(omega_star, theta0, phi0, vr, a_init=2.4, b_init=0.0, tol=1e-8):
    """Reference whose open-loop flow under ``u*`` closes after one period.

    The elevation closes only when the mean of ``cos(gamma*)`` vanishes, which
    fixes the amplitude; the azimuth then closes for any phase. The phase is
    therefore kept at ``b_init`` and the amplitude is found by shooting on the
    elevation mismatch.
    """
    if not omega_star > 0:
        raise ValueError("omega_star must be positive")
    T = 2.0 * np.pi / omega_star

    def mismatch(a):
        x0 = [theta0, phi0, a * np.cos(b_init)]
        sol = _nominal_solution(a, b_init, omega_star, vr, x0, T)
        return sol.y[:, -1] - x0

    lo, hi = 0.8 * a_init, 1.2 * a_init
    th_lo, th_hi = mismatch(lo)[0], mismatch(hi)[0]
    if th_lo * th_hi > 0:
        raise NoClosedOrbitError(f"no amplitude in [{lo:.3f}, {hi:.3f}] closes the elevation")
    a = brentq(lambda a: mismatch(a)[0], lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    err = float(np.linalg.norm(mismatch(a)))
    if err > tol:
        raise NoClosedOrbitError(f"nominal orbit closure {err:.3e} exceeds {tol:.1e}")
    return KiteReference(float(a), float(b_init), float(omega_star), float(vr), float(theta0),
                         float(phi0), err)


def nominal_cycle(ref, grid_size=512):
    """The reference orbit resampled as a ``LimitCycle``."""
    T = ref.period
    sol = _nominal_solution(ref.a, ref.b, ref.omega_star, ref.vr, ref.initial_state, T,
                            dense=True)
    tau = np.arange(grid_size) * (T / grid_size)
    X = sol.sol(tau).T
    V = np.array([kite_rhs(x, float(ref.u_star(t)), ref.vr) for x, t in zip(X, tau)])
    return LimitCycle(T, tau, X, V, (ref.vr,))


def self_crossings(cycle, dims=(1, 0)):
    """Number of proper self-intersections of the orbit projected on ``dims``."""
    P = cycle.nominal_states[:, list(dims)]
    Q = np.roll(P, -1, axis=0)
    M = len(P)
    count = 0
    for i in range(M):
        p, r = P[i], Q[i] - P[i]
        for j in range(i + 2, M):
            if i == 0 and j == M - 1:
                continue
            q, s = P[j], Q[j] - P[j]
            den = r[0] * s[1] - r[1] * s[0]
            if den == 0.0:
                continue
            w = q - p
            t = (w[0] * s[1] - w[1] * s[0]) / den
            u = (w[0] * r[1] - w[1] * r[0]) / den
            if 0.0 <= t < 1.0 and 0.0 <= u < 1.0:
                count += 1
    return count


def reference_csv(path, ref, cycle):
    tau = cycle.tau_grid
    data = np.column_stack([tau, ref.gamma_star(tau), ref.u_star(tau),
                            cycle.nominal_states[:, 0], cycle.nominal_states[:, 1]])
    np.savetxt(path, data, fmt=CSV_FMT, delimiter=",",
               header="tau,gamma_star,u_star,theta_star,phi_star", comments="")


# ---------------------------------------------------------------- phase-feedback systems

class PhaseTracker:
    """Transverse coordinates of successive states for one simulation.

    Every resolved state is kept as an anchor. A new state is warm-started
    from the phase of the closest anchor if that anchor lies within a few
    grid spacings; otherwise the phase is searched from the nearest node.
    Anchors make the result independent of the order in which a solver, or a
    later pass over its output, visits the states. The initial state and its
    phase can be given to seed the anchors, which matters where the orbit
    passes close to itself.
    """

    def __init__(self, sf, tau0=None, x0=None):
        self.sf = sf
        n = sf.state_dim
        self._X = np.empty((64, n))
        self._tau = np.empty(64)
        self._count = 0
        X = sf.cycle.nominal_states
        self._reach = 8.0 * float(np.max(np.linalg.norm(np.roll(X, -1, axis=0) - X, axis=1)))
        if tau0 is not None and x0 is not None:
            self._add(np.asarray(x0, float), float(tau0))

    def _add(self, x, tau):
        if self._count == len(self._tau):
            self._X = np.concatenate([self._X, np.empty_like(self._X)])
            self._tau = np.concatenate([self._tau, np.empty_like(self._tau)])
        self._X[self._count] = x
        self._tau[self._count] = tau
        self._count += 1

    def __call__(self, x):
        x = np.asarray(x, float)
        warm = None
        if self._count:
            dist = np.linalg.norm(self._X[:self._count] - x, axis=1)
            k = int(np.argmin(dist))
            if dist[k] <= self._reach:
                warm = float(self._tau[k])
        x_perp, tau = track_phase(x, self.sf, warm)
        self._add(x, tau)
        return x_perp, tau


def closed_loop_rhs(x, resolver, ref, lqr, sf, d=None, gain_scale=1.0):
    """Kite velocity under ``u = u*(tau) - K*(tau) x_perp (+ d)``.

    With ``lqr=None`` only the phase-scheduled feedforward is applied.
    """
    x_perp, tau = resolver(x)
    u = float(ref.u_star(tau))
    if lqr is not None:
        u -= gain_scale * float((lqr.gain(tau) @ x_perp)[0])
    if d is not None and len(d):
        u += float(d[0])
    return kite_rhs(x, u, ref.vr)


def tracking_system(ref, sf, tau0=None, x0=None):
    """Kite driven by the phase-scheduled feedforward plus the input ``d``.

    The reference orbit is a periodic solution for ``d = 0``; ``d`` plays the
    role of the transverse steering correction ``u_perp``. ``(tau0, x0)``
    seed the phase tracker.
    """
    tracker = PhaseTracker(sf, tau0, x0)

    def rhs(x, d, t):
        return closed_loop_rhs(x, tracker, ref, None, sf, d)

    return OdeSystem(3, 1, rhs, param=(ref.vr,), name="kite-tracking")


def closed_loop_system(ref, sf, lqr, gain_scale=1.0, steering_input=False, tau0=None,
                       x0=None):
    """Autonomous closed-loop kite; a fresh phase tracker per call, seeded
    with ``(tau0, x0)`` when given.

    With ``steering_input`` an additive steering disturbance is exposed as the
    exogenous input.
    """
    tracker = PhaseTracker(sf, tau0, x0)

    def rhs(x, d, t):
        return closed_loop_rhs(x, tracker, ref, lqr, sf, d, gain_scale)

    return OdeSystem(3, 1 if steering_input else 0, rhs, param=(ref.vr,), name="kite")


def linearize_transverse_with_input(ref, sf, tau):
    """``(A, B, g, h)`` of the tracking system with the steering correction as input."""
    J = analytic_linearization(tracking_system(ref, sf), sf, tau)
    n = sf.state_dim - 1
    return J[:n, :n], J[:n, n:], J[n, :n], J[n, n:]


# ---------------------------------------------------------------- periodic LQR

@dataclass(frozen=True)
class PeriodicLqr:
    Q: np.ndarray
    R: float
    period: float
    tau_grid: np.ndarray
    P_grid: np.ndarray
    gain_grid: np.ndarray
    riccati_residual: float
    n_periods: int
    _gain: PeriodicInterpolant = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_gain", PeriodicInterpolant(self.gain_grid, self.period))

    def gain(self, tau):
        """``K*(tau)`` of shape ``(1, n-1)``."""
        return self._gain(tau)

    def to_csv(self, path):
        k = self.gain_grid.reshape(len(self.tau_grid), -1)
        header = ",".join(["tau"] + [f"K{i + 1}" for i in range(k.shape[1])])
        np.savetxt(path, np.column_stack([self.tau_grid, k]), fmt=CSV_FMT, delimiter=",",
                   header=header, comments="")


def solve_periodic_lqr(A, B, Q, R, period, grid_size=256, tol=1e-8, max_periods=500):
    """Periodic stabilizing solution of the differential Riccati equation.

    ``A`` and ``B`` are callables of the phase. The equation is integrated
    backward over successive periods, starting from ``P(T) = Q``, until the
    value at the start of a period reproduces the terminal value.
    """
    Q = np.atleast_2d(np.asarray(Q, float))
    R = float(R)
    if R <= 0:
        raise ValueError("R must be positive")
    if np.min(np.linalg.eigvalsh((Q + Q.T) / 2)) < -1e-12:
        raise ValueError("Q must be positive semidefinite")
    m = Q.shape[0]
    T = float(period)

    def rhs(t, p):
        P = p.reshape(m, m)
        At = np.atleast_2d(A(t))
        Bt = np.asarray(B(t), float).reshape(m, -1)
        dP = -(At.T @ P + P @ At - P @ Bt @ Bt.T @ P / R + Q)
        return ((dP + dP.T) / 2).ravel()

    P_end = Q.copy()
    residual = np.inf
    for k in range(1, max_periods + 1):
        sol = solve_ivp(rhs, (T, 0.0), P_end.ravel(), method="DOP853", rtol=1e-12, atol=1e-13,
                        dense_output=True)
        if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
            raise RiccatiDivergenceError(f"Riccati sweep failed: {sol.message}")
        P0 = sol.y[:, -1].reshape(m, m)
        residual = float(np.linalg.norm(P0 - P_end))
        P_end = P0
        if residual < tol:
            break
    else:
        raise RiccatiDivergenceError(
            f"no periodic fixed point after {max_periods} periods (residual {residual:.3e})")
    tau = np.arange(grid_size) * (T / grid_size)
    Pg = sol.sol(tau).T.reshape(grid_size, m, m)
    Pg = (Pg + np.transpose(Pg, (0, 2, 1))) / 2
    K = np.array([np.asarray(B(t), float).reshape(m, -1).T @ P / R for t, P in zip(tau, Pg)])
    return PeriodicLqr(Q, R, T, tau, Pg, K, residual, k)


def design_controller(ref, sf, Q=None, R=1.0, grid_size=256):
    """Linearize the tracking system on a phase grid and solve the periodic LQR."""
    n = sf.state_dim - 1
    Q = np.eye(n) if Q is None else Q
    T = ref.period
    tau = np.arange(grid_size) * (T / grid_size)
    sys = tracking_system(ref, sf)
    tab = np.array([analytic_linearization(sys, sf, t) for t in tau])
    A_int = PeriodicInterpolant(tab[:, :n, :n], T, rtol=0.0)
    B_int = PeriodicInterpolant(tab[:, :n, n:], T, rtol=0.0)
    return solve_periodic_lqr(A_int, B_int, Q, R, T, grid_size=grid_size)


def transverse_norm_by_period(times, x_perp, period, n_periods):
    """``max ||x_perp||`` over each of the first ``n_periods`` periods."""
    nrm = np.linalg.norm(np.atleast_2d(x_perp).reshape(len(times), -1), axis=1)
    out = []
    for k in range(n_periods):
        sel = (times >= k * period) & (times < (k + 1) * period)
        if not np.any(sel):
            raise ConvergenceError("trajectory shorter than the requested periods")
        out.append(float(nrm[sel].max()))
    return np.array(out)
