"""Kernel ridge regression of the rows of a periodic system matrix.

Each row ``Omega_i(tau[, p])`` of the transverse system matrix is learned
from samples ``zeta_i = Omega_i(tau) theta`` with a diagonal matrix kernel
``K_i = diag(k_i1, ..., k_in_theta)``: element ``j`` has its own scalar
kernel, periodic in the phase and optionally multiplied by a squared
exponential over operating parameters.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import ive

from lppvid.errors import DimensionMismatchError, NumericalError

log = logging.getLogger(__name__)

LENGTH_BOUNDS = (1e-2, 1e2)
LAMBDA_BOUNDS = (1e-8, 1e2)
SIMPLEX_STEP = 0.5  # initial simplex edge, log units


# ---------------------------------------------------------------- kernels

def k_se(a, b, l):
    a, b = np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float))
    d = a - b
    return float(np.exp(-(d @ d) / (2.0 * l * l)))


def k_pse(tau, tau2, l, period):
    s = np.sin(np.pi * (tau - tau2) / period)
    return float(np.exp(-2.0 * s * s / (l * l)))


def warp(tau, period):
    """Map a phase onto the unit circle."""
    w = 2.0 * np.pi * tau / period
    return np.array([np.sin(w), np.cos(w)])


@dataclass(frozen=True)
class KernelSpec:
    """Scalar kernel for one element of a row.

    ``kind`` is ``"SE"`` (squared exponential in the phase), ``"PSE"``
    (periodic squared exponential) or ``"MULTI"`` (PSE in the phase times SE
    over the operating parameters).
    """

    kind: str
    length_scale_tau: float
    period: Optional[float] = None
    length_scale_p: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("SE", "PSE", "MULTI"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.length_scale_tau > 0:
            raise ValueError("length scale must be positive")
        if self.kind in ("PSE", "MULTI") and not (self.period and self.period > 0):
            raise ValueError("periodic kernels need a positive period")
        if self.kind == "MULTI" and not (self.length_scale_p and self.length_scale_p > 0):
            raise ValueError("MULTI kernels need a positive parameter length scale")

    def matrix(self, tau_a, tau_b, p_a=None, p_b=None):
        """Kernel matrix between phase vectors (and parameter rows)."""
        tau_a, tau_b = np.asarray(tau_a, float), np.asarray(tau_b, float)
        diff = np.subtract.outer(tau_a, tau_b)
        if self.kind == "SE":
            return np.exp(-diff ** 2 / (2.0 * self.length_scale_tau ** 2))
        s = np.sin(np.pi * diff / self.period)
        K = np.exp(-2.0 * s * s / self.length_scale_tau ** 2)
        if self.kind == "MULTI":
            K = K * np.exp(-_sqdist(p_a, p_b) / (2.0 * self.length_scale_p ** 2))
        return K

    def to_dict(self):
        return {"kind": self.kind, "length_scale_tau": self.length_scale_tau,
                "period": self.period, "length_scale_p": self.length_scale_p}


def k_multi(tau, p, tau2, p2, spec):
    return float(spec.matrix(np.array([tau]), np.array([tau2]),
                             np.atleast_2d(p), np.atleast_2d(p2))[0, 0])


def _sqdist(a, b):
    a = np.asarray(a, float).reshape(np.shape(a)[0], -1)
    b = np.asarray(b, float).reshape(np.shape(b)[0], -1)
    return np.maximum((a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T, 0.0)


@dataclass(frozen=True)
class RowConfig:
    row_index: int
    element_kernels: tuple
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("regularization weight must be positive")

    @property
    def n_theta(self):
        return len(self.element_kernels)

    def to_dict(self):
        return {"row_index": self.row_index, "lambda": self.lam,
                "element_kernels": [k.to_dict() for k in self.element_kernels]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["row_index"], tuple(KernelSpec(**k) for k in d["element_kernels"]),
                   d["lambda"])


def default_row_config(i, n_theta, period, multivariate=False, length_scale=1.0,
                       length_scale_p=1.0, lam=1e-2):
    kind = "MULTI" if multivariate else "PSE"
    kern = KernelSpec(kind, length_scale, period, length_scale_p if multivariate else None)
    return RowConfig(i, (kern,) * n_theta, lam)


# ---------------------------------------------------------------- gram / fit

def _check(ds, cfg):
    if len(ds) == 0:
        raise DimensionMismatchError("empty dataset")
    if cfg.n_theta != ds.n_theta:
        raise DimensionMismatchError(
            f"row config has {cfg.n_theta} kernels, data has n_theta={ds.n_theta}")


def gram(ds, cfg):
    """Gram matrix with entries ``theta_k^T K_i(tau_k, tau_k') theta_k'``."""
    _check(ds, cfg)
    U = np.zeros((len(ds), len(ds)))
    for j, kern in enumerate(cfg.element_kernels):
        th = ds.theta[:, j]
        U += np.outer(th, th) * kern.matrix(ds.tau, ds.tau, ds.param, ds.param)
    return U


def _cholesky(A):
    scale = max(np.abs(A).max(), 1.0)
    jitter = 0.0
    for attempt in range(4):
        try:
            return cho_factor(A + jitter * np.eye(len(A)), lower=True, check_finite=False)
        except LinAlgError:
            jitter = 1e-12 * scale if attempt == 0 else jitter * 10.0
    raise NumericalError("Cholesky factorization failed after jitter escalation")


def fit_row(ds, cfg, Z):
    """Dual coefficients ``(Upsilon + lam I)^-1 Z`` of one row."""
    Z = np.asarray(Z, float)
    A = gram(ds, cfg) + cfg.lam * np.eye(len(ds))
    return cho_solve(_cholesky(A), Z, check_finite=False)


def log_marglik(ds, cfg, Z, U=None):
    """Gaussian log evidence of ``Z`` under covariance ``Upsilon + lam I``."""
    Z = np.asarray(Z, float)
    if U is None:
        U = gram(ds, cfg)
    c = _cholesky(U + cfg.lam * np.eye(len(Z)))
    a = cho_solve(c, Z, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return float(-0.5 * (Z @ a + logdet) - 0.5 * len(Z) * np.log(2.0 * np.pi))


# ---------------------------------------------------------------- hyperparameters

class _GramParts:
    """Hyperparameter-independent pieces of the Gram matrix."""

    def __init__(self, ds, kinds):
        self.thth = [np.outer(ds.theta[:, j], ds.theta[:, j]) for j in range(ds.n_theta)]
        self.kinds = kinds
        diff = np.subtract.outer(ds.tau, ds.tau)
        self.s2 = np.sin(np.pi * diff / ds.period) ** 2
        self.d2 = diff ** 2
        self.p2 = _sqdist(ds.param, ds.param) if "MULTI" in kinds else None

    def gram(self, l_tau, l_p):
        U = np.zeros_like(self.s2)
        for j, kind in enumerate(self.kinds):
            if kind == "SE":
                E = -self.d2 / (2.0 * l_tau[j] ** 2)
            else:
                E = -2.0 * self.s2 / l_tau[j] ** 2
            if kind == "MULTI":
                E = E - self.p2 / (2.0 * l_p[j] ** 2)
            U += self.thth[j] * np.exp(E)
        return U


@dataclass
class HyperResult:
    config: RowConfig
    objective: float
    init_objective: float
    n_evals: int
    improved: bool
    start_objectives: list = field(default_factory=list)


def _pack(cfg):
    lt = [k.length_scale_tau for k in cfg.element_kernels]
    lp = [k.length_scale_p for k in cfg.element_kernels if k.kind == "MULTI"]
    return np.log(np.array(lt + lp + [cfg.lam]))


def _unpack(cfg, v):
    nt = cfg.n_theta
    e = np.exp(v)
    multi = [k.kind == "MULTI" for k in cfg.element_kernels]
    lt = e[:nt]
    lp = np.ones(nt)
    lp[np.array(multi, bool)] = e[nt:nt + sum(multi)]
    return lt, lp, e[-1]


def _with_params(cfg, lt, lp, lam):
    kernels = tuple(replace(k, length_scale_tau=float(lt[j]),
                            length_scale_p=float(lp[j]) if k.kind == "MULTI" else None)
                    for j, k in enumerate(cfg.element_kernels))
    return RowConfig(cfg.row_index, kernels, float(lam))


def optimize_hypers(ds, i, init, budget=150, n_starts=8, seed=0, Z=None):
    """Maximize the log evidence over log length scales and log lambda.

    Multi-start Nelder-Mead inside box bounds: the first start is ``init``,
    the others are drawn uniformly in the log box from ``seed``. The best
    start wins; ties go to the lowest start index.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    _check(ds, init)
    if Z is None:
        Z = ds.zeta[:, i]
    Z = np.asarray(Z, float)
    parts = _GramParts(ds, [k.kind for k in init.element_kernels])
    N = len(Z)
    eye = np.eye(N)
    v0 = _pack(init)
    n_len = len(v0) - 1
    lo = np.r_[np.full(n_len, np.log(LENGTH_BOUNDS[0])), np.log(LAMBDA_BOUNDS[0])]
    hi = np.r_[np.full(n_len, np.log(LENGTH_BOUNDS[1])), np.log(LAMBDA_BOUNDS[1])]
    v0 = np.clip(v0, lo, hi)
    n_evals = 0

    def neg(v):
        nonlocal n_evals
        n_evals += 1
        lt, lp, lam = _unpack(init, np.clip(v, lo, hi))
        try:
            c = _cholesky(parts.gram(lt, lp) + lam * eye)
        except NumericalError:
            return np.inf
        a = cho_solve(c, Z, check_finite=False)
        return 0.5 * (Z @ a) + np.sum(np.log(np.diag(c[0]))) + 0.5 * N * np.log(2 * np.pi)

    f_init = neg(v0)
    best_v, best_f, start_objs = multistart_nelder_mead(neg, v0, lo, hi, budget, n_starts, seed)
    if f_init <= best_f:
        best_v, best_f = v0, f_init
    improved = bool(best_f < f_init)
    if not improved:
        log.warning("row %d: no start improved on the initial hyperparameters", i)
    cfg = _with_params(init, *_unpack(init, best_v))
    return HyperResult(cfg, -best_f, -f_init, n_evals, improved, [-f for f in start_objs])


def _simplex(v, lo, hi, step):
    """Axis-aligned simplex of ``step`` log units about ``v``, flipped inward at the box."""
    pts = [v]
    for k in range(len(v)):
        e = v.copy()
        e[k] += step if v[k] + step <= hi[k] else -step
        pts.append(e)
    return np.array(pts)


def multistart_nelder_mead(fun, v0, lo, hi, budget, n_starts, seed, max_restarts=4,
                           step=SIMPLEX_STEP):
    """Minimize ``fun`` in a box from ``v0`` plus ``n_starts - 1`` seeded
    uniform starts, then restart the simplex from the best point until a
    restart no longer improves it (at most ``max_restarts`` times).

    A simplex collapsed onto a ridge stalls well short of the minimum in
    more than a couple of dimensions; rebuilding it around the incumbent is
    the usual remedy. Returns ``(best_x, best_f, per_start_f)``; ties keep
    the earliest start.
    """
    rng = np.random.default_rng(seed)
    starts = [np.asarray(v0, float)] + [rng.uniform(lo, hi) for _ in range(n_starts - 1)]
    bounds = list(zip(lo, hi))
    opts = {"maxfev": budget, "xatol": 1e-4, "fatol": 1e-6}
    best_v, best_f = None, np.inf
    per_start = []
    for s in starts:
        res = minimize(fun, s, method="Nelder-Mead", bounds=bounds,
                       options={**opts, "initial_simplex": _simplex(s, lo, hi, step)})
        per_start.append(float(res.fun))
        if res.fun < best_f:
            best_v, best_f = np.clip(res.x, lo, hi), float(res.fun)
    if best_v is None:
        return np.asarray(v0, float), best_f, per_start
    for _ in range(max_restarts):
        res = minimize(fun, best_v, method="Nelder-Mead", bounds=bounds,
                       options={**opts, "initial_simplex": _simplex(best_v, lo, hi, step)})
        if not res.fun < best_f - 1e-6 * max(1.0, abs(best_f)):
            break
        best_v, best_f = np.clip(res.x, lo, hi), float(res.fun)
    return best_v, best_f, per_start


# ---------------------------------------------------------------- model

@dataclass
class IdentifiedModel:
    """Dual coefficients per row plus the retained training inputs."""

    alphas: list
    configs: list
    theta: np.ndarray
    tau: np.ndarray
    param: np.ndarray
    state_dim: int
    input_dim: int
    period: float

    @property
    def n_theta(self):
        return self.theta.shape[1]

    @property
    def multivariate(self):
        return any(k.kind == "MULTI" for c in self.configs for k in c.element_kernels)

    def omega(self, tau, p=None):
        """System matrix ``Omega(tau[, p])``; array ``tau`` adds a leading axis."""
        tau = np.asarray(tau, float)
        scalar = tau.ndim == 0
        t = np.atleast_1d(tau)
        rows = [eval_omega_row(self, i, t, p) for i in range(self.state_dim)]
        out = np.stack(rows, axis=1)
        return out[0] if scalar else out

    def to_dict(self):
        return {
            "format": "lppvid-identified-model", "version": 1,
            "state_dim": self.state_dim, "input_dim": self.input_dim,
            "period": self.period,
            "rows": [{"alpha": a.tolist(), "config": c.to_dict()}
                     for a, c in zip(self.alphas, self.configs)],
            "theta": self.theta.tolist(), "tau": self.tau.tolist(),
            "param": self.param.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(r["alpha"], float) for r in d["rows"]],
                   [RowConfig.from_dict(r["config"]) for r in d["rows"]],
                   np.array(d["theta"], float).reshape(len(d["tau"]), -1),
                   np.array(d["tau"], float),
                   np.array(d["param"], float).reshape(len(d["tau"]), -1),
                   d["state_dim"], d["input_dim"], d["period"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def eval_omega_row(model, i, tau, p=None):
    """Row ``i`` of ``Omega`` at phase(s) ``tau``: ``sum_k alpha_k theta_k^T K_i(tau_k, tau)``."""
    tau = np.asarray(tau, float)
    scalar = tau.ndim == 0
    t = np.atleast_1d(tau)
    cfg = model.configs[i]
    alpha = model.alphas[i]
    p_eval = None
    if model.multivariate:
        if p is None:
            raise ValueError("multivariate model needs an operating parameter")
        p_arr = np.asarray(p, float)
        n_p = model.param.shape[1]
        if p_arr.size == n_p:
            p_eval = np.tile(p_arr.reshape(1, n_p), (len(t), 1))
        elif p_arr.size == len(t) * n_p:
            p_eval = p_arr.reshape(len(t), n_p)
        else:
            raise DimensionMismatchError("operating parameter does not match the phases")
    out = np.empty((len(t), model.n_theta))
    for j, kern in enumerate(cfg.element_kernels):
        K = kern.matrix(model.tau, t, model.param, p_eval)
        out[:, j] = (alpha * model.theta[:, j]) @ K
    return out[0] if scalar else out


def predict_zeta(model, theta, tau, p=None):
    return model.omega(tau, p) @ np.asarray(theta, float)


# ---------------------------------------------------------------- explicit features

class FeatureMapOracle:
    """Explicit trigonometric features reproducing the periodic SE kernel.

    Uses ``exp(-2 sin^2(pi d / T) / l^2) = e^{-c} (I_0(c) + 2 sum_j I_j(c) cos(2 pi j d / T))``
    with ``c = 1 / l^2``, truncated at order ``F``.
    """

    def __init__(self, length_scale, period, order):
        c = 1.0 / length_scale ** 2
        self.period = period
        self.order = order
        j = np.arange(order + 1)
        w = ive(j, c)
        w[1:] *= 2.0
        self._sqrt_w = np.sqrt(w)

    @classmethod
    def adaptive(cls, length_scale, period, tol=1e-9, max_order=2000):
        order = 1
        while order <= max_order:
            oracle = cls(length_scale, period, order)
            # tail bound: remaining mass of the Bessel expansion at d = 0
            if abs(oracle.features(np.zeros(1)) @ oracle.features(np.zeros(1)).T - 1.0) < tol:
                return oracle
            order *= 2
        raise NumericalError("feature expansion did not converge")

    @property
    def n_features(self):
        return 2 * self.order + 1

    def features(self, tau):
        tau = np.atleast_1d(np.asarray(tau, float))
        w = 2.0 * np.pi * np.outer(tau, np.arange(1, self.order + 1)) / self.period
        sw = self._sqrt_w
        return np.hstack([np.full((len(tau), 1), sw[0]), np.cos(w) * sw[1:], np.sin(w) * sw[1:]])
