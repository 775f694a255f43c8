"""Transversal surface families along a limit cycle and the map between
states and transverse coordinates ``(x_perp, tau)``."""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import expm, logm
from scipy.optimize import brentq

from lppvid._fourier import PeriodicInterpolant
from lppvid.dynsys import CSV_FMT, LimitCycle
from lppvid.errors import (
    DatasetDegenerateError,
    DegenerateCenterError,
    DegenerateFlowError,
    LppvError,
    NonTransversalSurfaceError,
    OutOfNeighborhoodError,
    WellPosednessError,
)


class Frame(NamedTuple):
    xstar: np.ndarray
    xstar_dtau: np.ndarray
    proj: np.ndarray
    normal: np.ndarray
    proj_dtau: np.ndarray
    normal_dtau: np.ndarray


@dataclass(eq=False)
class SurfaceFamily:
    """Per-phase transverse frames ``Pi(tau)`` (rows span the surface) and
    normals ``z(tau)`` tabulated on the cycle's phase grid."""

    cycle: LimitCycle
    kind: str
    proj: np.ndarray
    normal: np.ndarray
    center_point: Optional[np.ndarray] = None
    proj_dtau: np.ndarray = field(init=False, repr=False)
    normal_dtau: np.ndarray = field(init=False, repr=False)
    transversality_margin: float = field(init=False)

    def __post_init__(self):
        cyc = self.cycle
        n = cyc.state_dim
        M = cyc.grid_size
        chans = np.concatenate([cyc.nominal_states, self.proj.reshape(M, -1), self.normal],
                               axis=1)
        self._frame_interp = PeriodicInterpolant(chans, cyc.period)
        self._light_interp = PeriodicInterpolant(
            np.concatenate([cyc.nominal_states, self.normal], axis=1), cyc.period)
        d = self._frame_interp(cyc.tau_grid, deriv=1)
        self.proj_dtau = d[:, n:n + (n - 1) * n].reshape(M, n - 1, n)
        self.normal_dtau = d[:, n + (n - 1) * n:]
        self.transversality_margin = float(
            np.min(np.einsum("mi,mi->m", self.normal, cyc.nominal_velocities)))

    @property
    def period(self):
        return self.cycle.period

    @property
    def state_dim(self):
        return self.cycle.state_dim

    def continuity_jump(self):
        """Largest frame change between neighbouring nodes, closure included."""
        dP = np.linalg.norm(np.roll(self.proj, -1, axis=0) - self.proj, axis=(1, 2))
        dz = np.linalg.norm(np.roll(self.normal, -1, axis=0) - self.normal, axis=1)
        return float(max(dP.max(), dz.max()))

    def to_csv(self, path):
        n = self.state_dim
        header = ",".join(["tau"] + [f"xstar_{i + 1}" for i in range(n)]
                          + [f"z_{i + 1}" for i in range(n)] + ["margin"])
        margin = np.einsum("mi,mi->m", self.normal, self.cycle.nominal_velocities)
        data = np.column_stack([self.cycle.tau_grid, self.cycle.nominal_states,
                                self.normal, margin])
        np.savetxt(path, data, fmt=CSV_FMT, delimiter=",", header=header, comments="")


def _polar(Y):
    U, _, Vt = np.linalg.svd(Y, full_matrices=False)
    return U @ Vt


def _transported_complement(U):
    """Continuous, periodically closed orthonormal basis of the complement
    of ``span(U[m])`` along the grid.

    ``U`` has shape (M, j, n) with orthonormal rows. Each node's basis is the
    nearest orthonormal frame to the projection of the previous one; the
    rotation left over after one loop is spread evenly along the orbit.
    """
    M, j, n = U.shape
    k = n - j
    if k == 0:
        return np.zeros((M, 0, n))
    P = np.eye(n)[None] - np.einsum("mji,mjk->mik", U, U)
    w, V = np.linalg.eigh(P[0])
    E0 = V[:, np.argsort(w)[::-1][:k]].T
    # deterministic orientation: largest component of each row positive
    E0 = E0 * np.sign(E0[np.arange(k), np.argmax(np.abs(E0), axis=1)])[:, None]
    E = np.empty((M, k, n))
    E[0] = E0
    for m in range(1, M):
        E[m] = _polar(E[m - 1] @ P[m])
    H = _polar(E[-1] @ P[0]) @ E0.T
    if np.linalg.det(H) < 0:
        raise LppvError("transverse frame is not orientable along the orbit")
    if k >= 2:
        L = np.real(logm(H))
        L = 0.5 * (L - L.T)
        for m in range(M):
            E[m] = expm(-(m / M) * L) @ E[m]
    return E


def build_orthogonal_surfaces(cycle):
    """Surfaces whose normals are tangent to the flow."""
    V = cycle.nominal_velocities
    speed = np.linalg.norm(V, axis=1)
    if np.any(speed <= 1e-14 * max(speed.max(), 1.0)):
        raise DegenerateFlowError("vanishing flow on the orbit")
    z = V / speed[:, None]
    proj = _transported_complement(z[:, None, :])
    return SurfaceFamily(cycle, "orthogonal", proj, z)


def build_center_surfaces(cycle, center_point):
    """Surfaces containing the ray from ``center_point`` to ``x*(tau)``.

    The first basis vector points from the center to the orbit. Remaining
    basis vectors are taken perpendicular to both that ray and the flow, so
    the surface deviates as little as possible from the orthogonal one.
    """
    xc = np.asarray(center_point, float)
    X, V = cycle.nominal_states, cycle.nominal_velocities
    R = X - xc
    r = np.linalg.norm(R, axis=1)
    if np.any(r <= 1e-12 * max(r.max(), 1.0)):
        raise DegenerateCenterError("center point lies on the orbit")
    xi1 = R / r[:, None]
    w = V - np.einsum("mi,mi->m", xi1, V)[:, None] * xi1
    wn = np.linalg.norm(w, axis=1)
    if np.any(wn <= 1e-12 * np.linalg.norm(V, axis=1).max()):
        raise NonTransversalSurfaceError("flow is tangent to a center surface")
    z = w / wn[:, None]
    if cycle.state_dim == 2:
        # z is fixed up to sign by xi1; a sign flip of z^T xdot* would show up
        # as a discontinuity of z between neighbours
        rot = np.stack([-xi1[:, 1], xi1[:, 0]], axis=1)
        s = np.sign(np.einsum("mi,mi->m", rot, z))
        if np.any(s != s[0]):
            raise NonTransversalSurfaceError("center surface becomes tangent to the flow")
        z = s[0] * rot
    rest = _transported_complement(np.stack([xi1, z], axis=1))
    proj = np.concatenate([xi1[:, None, :], rest], axis=1)
    sf = SurfaceFamily(cycle, "center", proj, z, center_point=xc)
    if sf.transversality_margin <= 0:
        raise NonTransversalSurfaceError(
            f"transversality margin {sf.transversality_margin:.3e} <= 0")
    return sf


def build_surfaces(cycle, kind, center_point=None):
    if kind == "orthogonal":
        return build_orthogonal_surfaces(cycle)
    if kind == "center":
        if center_point is None:
            center_point = cycle.nominal_states.mean(axis=0)
        return build_center_surfaces(cycle, center_point)
    raise ValueError(f"unknown surface kind {kind!r}")


def frame_eval(sf, tau):
    """Interpolated frame at phase ``tau`` (wrapped modulo the period)."""
    n = sf.state_dim
    v = sf._frame_interp(tau)
    d = sf._frame_interp(tau, deriv=1)
    k = n + (n - 1) * n
    P = v[n:k].reshape(n - 1, n)
    P = _polar(P)
    z = v[k:]
    z = z - P.T @ (P @ z)
    z = z / np.linalg.norm(z)
    return Frame(v[:n], d[:n], P, z, d[n:k].reshape(n - 1, n), d[k:])


def _nearest_node(x, sf):
    dist = np.linalg.norm(sf.cycle.nominal_states - x, axis=1)
    return float(sf.cycle.tau_grid[np.argmin(dist)])


def _constraint_roots(x, sf, tau_init, scan_points=33):
    T = sf.period
    n = sf.state_dim
    taus = tau_init + np.linspace(-T / 8, T / 8, scan_points)
    v = sf._light_interp(taus)
    c = np.einsum("mi,mi->m", v[:, n:], x - v[:, :n])

    def cfun(t):
        w = sf._light_interp(t)
        return float(w[n:] @ (x - w[:n]))

    roots = []
    for i in np.nonzero(c[:-1] * c[1:] <= 0)[0]:
        a, b = taus[i], taus[i + 1]
        fa, fb = cfun(a), cfun(b)
        if fa == 0.0 or fb == 0.0 or fa * fb > 0:
            # a node sits on the root; scalar and batched rounding may disagree
            r = a if abs(fa) <= abs(fb) else b
        else:
            r = brentq(cfun, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        if not roots or abs(r - roots[-1]) > 1e-12:
            roots.append(r)
    return roots, cfun


def to_transverse(x, sf, tau_init=None):
    """Transverse coordinates of state ``x``.

    Finds the phase whose surface contains ``x`` near ``tau_init`` and, among
    several such phases, the one closest to ``x``. The returned phase is not
    wrapped, so it stays on the same branch as ``tau_init``.
    """
    x = np.asarray(x, float)
    if tau_init is None:
        tau_init = _nearest_node(x, sf)
    roots, cfun = _constraint_roots(x, sf, tau_init)
    if not roots:
        raise OutOfNeighborhoodError("no transversal surface through the point near tau_init")
    xs = sf.cycle.state(np.array(roots))
    tau = roots[int(np.argmin(np.linalg.norm(xs - x, axis=1)))]
    if abs(cfun(tau)) > 1e-10:
        raise OutOfNeighborhoodError("surface constraint not satisfied")
    fr = frame_eval(sf, tau)
    return fr.proj @ (x - fr.xstar), float(tau)


def track_phase(x, sf, tau_prev, max_iter=8):
    """``to_transverse`` warm-started from the phase of a nearby earlier state.

    Newton steps on the surface constraint are tried first; if they do not
    settle quickly on a regular root close to ``tau_prev``, the bracketing
    search of ``to_transverse`` is used instead.
    """
    x = np.asarray(x, float)
    if tau_prev is None:
        return to_transverse(x, sf)
    n = sf.state_dim
    tau = float(tau_prev)
    for _ in range(max_iter):
        v = sf._light_interp(tau)
        dv = sf._light_interp(tau, deriv=1)
        e = x - v[:n]
        c = v[n:] @ e
        den = v[n:] @ dv[:n] - dv[n:] @ e
        if den <= 0.0:
            break
        tau += c / den
        if abs(c) < 1e-13 * max(1.0, np.linalg.norm(e)):
            if abs(tau - tau_prev) > sf.period / 16:
                break
            fr = frame_eval(sf, tau)
            return fr.proj @ (x - fr.xstar), tau
    return to_transverse(x, sf, tau_prev)


def from_transverse(x_perp, tau, sf):
    fr = frame_eval(sf, tau)
    return fr.xstar + fr.proj.T @ np.atleast_1d(np.asarray(x_perp, float))


def wellposedness_denominator(x, tau, sf):
    """Denominator of the phase velocity; positive on the orbit."""
    fr = frame_eval(sf, tau)
    return float(fr.normal @ fr.xstar_dtau - fr.normal_dtau @ (x - fr.xstar))


def transverse_derivatives(x, xdot, x_perp, tau, sf, eps=1e-9):
    """Time derivatives ``(x_perp_dot, tau_dot)`` of the transverse coordinates.

    Obtained by differentiating ``x = x*(tau) + Pi(tau)^T x_perp`` together
    with the surface constraint ``z(tau)^T (x - x*(tau)) = 0``.
    """
    x = np.asarray(x, float)
    fr = frame_eval(sf, tau)
    e = x - fr.xstar
    den = fr.normal @ fr.xstar_dtau - fr.normal_dtau @ e
    if abs(den) < eps:
        raise WellPosednessError(f"phase-velocity denominator {den:.3e} vanishes")
    tau_dot = float(fr.normal @ xdot / den)
    xp_dot = fr.proj_dtau @ e * tau_dot + fr.proj @ (xdot - fr.xstar_dtau * tau_dot)
    return xp_dot, tau_dot


def is_wellposed(x, sf, tau_init):
    """Whether the transverse map is unambiguous and regular at ``x``.

    Fails when no surface passes through ``x`` near ``tau_init``, when
    several surfaces do (the surfaces intersect), or when the phase-velocity
    denominator is not positive.
    """
    roots, _ = _constraint_roots(np.asarray(x, float), sf, tau_init)
    if len(roots) != 1:
        return False
    return wellposedness_denominator(x, roots[0], sf) > 0.0


# ---------------------------------------------------------------- datasets

class TransverseSample(NamedTuple):
    theta: np.ndarray
    zeta: np.ndarray
    tau: float
    param: np.ndarray


@dataclass
class TransverseDataset:
    """Regression samples: regressors ``theta = [x_perp; d]``, targets
    ``zeta = [x_perp_dot; tau_dot - 1]``, phases and operating parameters."""

    theta: np.ndarray
    zeta: np.ndarray
    tau: np.ndarray
    param: np.ndarray
    period: float
    state_dim: int
    input_dim: int
    times: Optional[np.ndarray] = None
    tau_unwrapped: Optional[np.ndarray] = None
    n_dropped: int = 0

    def __post_init__(self):
        N = len(self.tau)
        self.theta = np.asarray(self.theta, float).reshape(N, -1)
        self.zeta = np.asarray(self.zeta, float).reshape(N, -1)
        self.param = np.asarray(self.param, float).reshape(N, -1)
        if self.theta.shape[1] != self.state_dim - 1 + self.input_dim:
            raise ValueError("theta width must be n - 1 + n_d")
        if self.zeta.shape[1] != self.state_dim:
            raise ValueError("zeta width must be n")

    def __len__(self):
        return len(self.tau)

    def __getitem__(self, k):
        return TransverseSample(self.theta[k], self.zeta[k], float(self.tau[k]), self.param[k])

    @property
    def n_theta(self):
        return self.theta.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return TransverseDataset(
            self.theta[idx], self.zeta[idx], self.tau[idx], self.param[idx], self.period,
            self.state_dim, self.input_dim,
            None if self.times is None else self.times[idx],
            None if self.tau_unwrapped is None else self.tau_unwrapped[idx])

    def to_csv(self, path):
        """Columns ``t, tau, tau_unwrapped, theta_*, zeta_*, p_*``; period in a sidecar."""
        N = len(self)
        t = self.times if self.times is not None else np.full(N, np.nan)
        tu = self.tau_unwrapped if self.tau_unwrapped is not None else np.full(N, np.nan)
        header = (["t", "tau", "tau_unwrapped"] + [f"theta_{j + 1}" for j in range(self.n_theta)]
                  + [f"zeta_{j + 1}" for j in range(self.state_dim)]
                  + [f"p_{j + 1}" for j in range(self.param.shape[1])])
        data = np.column_stack([t, self.tau, tu, self.theta, self.zeta, self.param])
        np.savetxt(path, data, fmt=CSV_FMT, delimiter=",", header=",".join(header), comments="")
        with open(str(path) + ".meta", "w") as fh:
            fh.write(f"period,{CSV_FMT % self.period}\nstate_dim,{self.state_dim}\n"
                     f"input_dim,{self.input_dim}\nn_dropped,{self.n_dropped}\n")

    @classmethod
    def from_csv(cls, path):
        meta = {}
        with open(str(path) + ".meta") as fh:
            for line in fh:
                k, v = line.strip().split(",")
                meta[k] = float(v)
        n, nd = int(meta["state_dim"]), int(meta["input_dim"])
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        nt = n - 1 + nd
        return cls(data[:, 3:3 + nt], data[:, 3 + nt:3 + nt + n], data[:, 1],
                   data[:, 3 + nt + n:], meta["period"], n, nd, data[:, 0], data[:, 2],
                   int(meta["n_dropped"]))

    @staticmethod
    def concat(datasets):
        ds = list(datasets)
        first = ds[0]

        def cat(attr):
            vals = [getattr(d, attr) for d in ds]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return TransverseDataset(
            cat("theta"), cat("zeta"), cat("tau"), cat("param"), first.period,
            first.state_dim, first.input_dim, cat("times"), cat("tau_unwrapped"),
            sum(d.n_dropped for d in ds))


def build_dataset(traj, sf, p=(), max_drop_fraction=0.5, tau0=None):
    """Convert a trajectory to transverse regression samples.

    Each phase search starts from the previous sample's phase; the first
    one starts from ``tau0`` if given, else from the nearest grid node.
    Samples where the map is not well-posed are dropped.
    """
    n = sf.state_dim
    T = sf.period
    p = np.atleast_1d(np.asarray(p, float))
    theta, zeta, taus, times = [], [], [], []
    tau_prev = tau0
    dropped = 0
    for k in range(len(traj)):
        x, xdot, d = traj.states[k], traj.derivs[k], traj.inputs[k]
        try:
            xp, tau = to_transverse(x, sf, tau_prev)
            xp_dot, tau_dot = transverse_derivatives(x, xdot, xp, tau, sf)
        except (OutOfNeighborhoodError, WellPosednessError):
            dropped += 1
            continue
        tau_prev = tau
        theta.append(np.concatenate([xp, d]))
        zeta.append(np.concatenate([xp_dot, [tau_dot - 1.0]]))
        taus.append(tau)
        times.append(traj.times[k])
    if dropped > max_drop_fraction * len(traj):
        raise DatasetDegenerateError(f"{dropped} of {len(traj)} samples not well-posed")
    taus = np.array(taus)
    return TransverseDataset(
        np.array(theta).reshape(len(taus), n - 1 + traj.input_dim),
        np.array(zeta).reshape(len(taus), n), np.mod(taus, T),
        np.tile(p, (len(taus), 1)), T, n, traj.input_dim,
        np.array(times), taus, dropped)
