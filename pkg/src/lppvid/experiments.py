"""End-to-end workflows behind the command-line interface.

Every workflow reads a validated config (see ``lppvid.config``), reads and
writes artifacts in one output directory, and draws all randomness from the
seeds in the config. Outputs contain no timestamps, so reruns are
byte-identical; wall-clock times are only logged.
"""

import json
import logging
import os
import time
from typing import NamedTuple

import numpy as np

from lppvid.control import (
    PeriodicLqr,
    KiteReference,
    PhaseTracker,
    build_reference,
    closed_loop_system,
    design_controller,
    nominal_cycle,
    reference_csv,
    self_crossings,
    tracking_system,
)
from lppvid.dynsys import (
    CSV_FMT,
    LimitCycle,
    Trajectory,
    add_noise,
    find_limit_cycle,
    integrate,
    sinusoid,
    vdp_system,
)
from lppvid.errors import ConfigError, IntegrationError, LppvError, MissingArtifactError
from lppvid.kernelreg import IdentifiedModel
from lppvid.lppv import (
    BlackboxModel,
    LppvModel,
    Prediction,
    analytic_model,
    blackbox_fit,
    blackbox_predict,
    identify,
    prediction_csv,
    reconstruct,
    report,
    simulate,
    transverse_path,
)
from lppvid.transverse import TransverseDataset, build_dataset, build_surfaces, from_transverse

log = logging.getLogger("lppvid")


# ---------------------------------------------------------------- file helpers

def _path(out, name):
    return os.path.join(out, name)


def _require(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing artifact {path}; run the earlier command first")
    return path


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path):
    with open(_require(path)) as fh:
        return json.load(fh)


def vr_tag(vr):
    return "vr" + repr(float(vr)).replace(".", "p").replace("-", "m")


class _Timer:
    def __init__(self, what):
        self.what = what

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        log.info("%s: %.2f s", self.what, time.perf_counter() - self.t0)


# ---------------------------------------------------------------- Van der Pol

def _vdp_surfaces(cfg, cycle):
    s = cfg["surface"]
    return build_surfaces(cycle, s["kind"], s["center_point"])


def _vdp_load(cfg, out):
    cycle = LimitCycle.from_csv(_require(_path(out, "cycle.csv")))
    return vdp_system(cfg["params"]["mu"]), cycle, _vdp_surfaces(cfg, cycle)


def vdp_trajectories(dcfg, sys, sf):
    """Clean and noisy trajectories of one Van der Pol dataset."""
    T = sf.period
    w = dcfg["forcing_frequency_factor"] * 2.0 * np.pi / T
    spp = dcfg["samples_per_period"]
    n_samp = int(round(dcfg["duration_periods"] * spp))
    t_eval = np.arange(n_samp) * (T / spp)
    t_end = max(t_eval[-1], dcfg["duration_periods"] * T)
    out = []
    n = dcfg["n_trajectories"]
    for j in range(n):
        tau0 = j * T / n if dcfg["tau0_spread"] else 0.0
        x0 = from_transverse(dcfg["x_perp0"], tau0, sf)
        tr = integrate(sys, x0, sinusoid(dcfg["forcing_amplitude"], w), (0.0, t_end),
                       t_eval=t_eval)
        out.append(add_noise(tr, dcfg["snr_db"], dcfg["seed"] + j))
    return out


# ---------------------------------------------------------------- kite

class KiteCondition(NamedTuple):
    vr: float
    ref: KiteReference
    cycle: LimitCycle
    sf: object
    lqr: PeriodicLqr


def _kite_surfaces(cfg, cycle):
    s = cfg["surface"]
    return build_surfaces(cycle, s["kind"], s["center_point"])


def kite_condition(cfg, vr):
    """Reference, nominal cycle, surfaces and LQR at one ``v/r``."""
    p = cfg["params"]
    ref = build_reference(p["omega_star"], p["theta0"], p["phi0"], vr, p["a_init"], p["b_init"])
    cycle = nominal_cycle(ref, cfg["cycle"]["grid_size"])
    sf = _kite_surfaces(cfg, cycle)
    lqr = design_controller(ref, sf, np.array(p["Q"], float), p["R"], p["lqr_grid_size"])
    return KiteCondition(float(vr), ref, cycle, sf, lqr)


def save_condition(out, cond):
    tag = vr_tag(cond.vr)
    cond.cycle.to_csv(_path(out, f"cycle_{tag}.csv"))
    reference_csv(_path(out, f"reference_{tag}.csv"), cond.ref, cond.cycle)
    cond.lqr.to_csv(_path(out, f"gains_{tag}.csv"))
    write_json(_path(out, f"controller_{tag}.json"), {
        "reference": cond.ref.to_dict(),
        "Q": cond.lqr.Q.tolist(), "R": cond.lqr.R,
        "riccati_residual": cond.lqr.riccati_residual, "n_periods": cond.lqr.n_periods,
        "self_crossings": self_crossings(cond.cycle),
    })


def load_condition(cfg, out, vr):
    tag = vr_tag(vr)
    cycle = LimitCycle.from_csv(_require(_path(out, f"cycle_{tag}.csv")))
    meta = read_json(_path(out, f"controller_{tag}.json"))
    ref = KiteReference(**meta["reference"])
    g = np.loadtxt(_require(_path(out, f"gains_{tag}.csv")), delimiter=",", skiprows=1, ndmin=2)
    K = g[:, 1:].reshape(len(g), 1, -1)
    lqr = PeriodicLqr(np.array(meta["Q"]), meta["R"], ref.period, g[:, 0], None, K,
                      meta["riccati_residual"], meta["n_periods"])
    return KiteCondition(float(vr), ref, cycle, _kite_surfaces(cfg, cycle), lqr)


def _random_offset(rng, norm):
    v = rng.standard_normal(2)
    return norm * v / np.linalg.norm(v)


def kite_trajectories(dcfg, cond, rng):
    """Noisy closed-loop trajectories at one ``v/r`` with random transverse
    offsets, as ``(trajectory, initial phase)`` pairs."""
    T = cond.ref.period
    spp = dcfg["samples_per_period"]
    n_samp = int(round(dcfg["duration_periods"] * spp))
    t_eval = np.arange(n_samp) * (T / spp)
    t_end = max(t_eval[-1], dcfg["duration_periods"] * T)
    out = []
    for _ in range(dcfg["n_trajectories"]):
        xp0 = _random_offset(rng, dcfg["x_perp_norm"])
        tau0 = float(rng.uniform(0.0, T))
        seed = int(rng.integers(2 ** 31))
        x0 = from_transverse(xp0, tau0, cond.sf)
        sys = closed_loop_system(cond.ref, cond.sf, cond.lqr, tau0=tau0, x0=x0)
        tr = integrate(sys, x0, None, (0.0, t_end), t_eval=t_eval)
        if dcfg["steering_input"]:
            # record the feedback correction as the measured input channel
            tracker = PhaseTracker(cond.sf, tau0, x0)
            u = []
            for x in tr.states:
                xp, tau = tracker(x)
                u.append(-float((cond.lqr.gain(tau) @ xp)[0]))
            tr = Trajectory(tr.times, tr.states, tr.derivs, np.array(u)[:, None])
        out.append((add_noise(tr, dcfg["snr_db"], seed), tau0))
    return out


def _kite_vr_values(cfg):
    vals = list(cfg["params"]["vr_train"])
    for d in cfg["datasets"].values():
        vals += list(d["vr"])
    vals += [cfg["test"]["vr"]] + list(cfg["compare"]["vr"])
    seen, out = set(), []
    for v in vals:
        if float(v) not in seen:
            seen.add(float(v))
            out.append(float(v))
    return out


# ---------------------------------------------------------------- datasets (both systems)

def build_named_datasets(cfg, out):
    """All configured datasets: transverse samples plus the raw noisy trajectories."""
    result = {}
    if cfg["system"] == "vanderpol":
        sys, _, sf = _vdp_load(cfg, out)
        for name, dcfg in cfg["datasets"].items():
            trajs = vdp_trajectories(dcfg, sys, sf)
            ds = TransverseDataset.concat([build_dataset(tr, sf) for tr in trajs])
            result[name] = (ds, trajs, [()] * len(trajs))
    else:
        for name, dcfg in cfg["datasets"].items():
            rng = np.random.default_rng(dcfg["seed"])
            parts, trajs, ps = [], [], []
            for vr in dcfg["vr"]:
                cond = load_condition(cfg, out, vr)
                for tr, tau0 in kite_trajectories(dcfg, cond, rng):
                    parts.append(build_dataset(tr, cond.sf, p=(cond.vr,), tau0=tau0))
                    trajs.append(tr)
                    ps.append((cond.vr,))
            result[name] = (TransverseDataset.concat(parts), trajs, ps)
    return result


# ---------------------------------------------------------------- commands

def run_limit_cycle(cfg, out):
    os.makedirs(out, exist_ok=True)
    if cfg["system"] == "vanderpol":
        c = cfg["cycle"]
        with _Timer("limit cycle"):
            cycle = find_limit_cycle(vdp_system(cfg["params"]["mu"]), c["x0_guess"],
                                     settle_periods=c["settle_periods"], tol=c["tol"],
                                     grid_size=c["grid_size"])
        cycle.to_csv(_path(out, "cycle.csv"))
        sf = _vdp_surfaces(cfg, cycle)
        sf.to_csv(_path(out, "surfaces.csv"))
        summary = {"system": "vanderpol", "period": cycle.period, "grid_size": cycle.grid_size,
                   "closure_error": cycle.closure_error(),
                   "transversality_margin": sf.transversality_margin}
    else:
        conds = []
        for vr in _kite_vr_values(cfg):
            with _Timer(f"kite condition v/r={vr}"):
                cond = kite_condition(cfg, vr)
            save_condition(out, cond)
            cond.sf.to_csv(_path(out, f"surfaces_{vr_tag(vr)}.csv"))
            conds.append({"vr": vr, "period": cond.cycle.period, "a": cond.ref.a,
                          "b": cond.ref.b, "closure_error": cond.ref.closure_error,
                          "riccati_residual": cond.lqr.riccati_residual,
                          "transversality_margin": cond.sf.transversality_margin})
        summary = {"system": "kite", "grid_size": cfg["cycle"]["grid_size"], "conditions": conds}
    write_json(_path(out, "cycle_summary.json"), summary)
    return summary


def run_identify(cfg, out):
    os.makedirs(out, exist_ok=True)
    with _Timer("datasets"):
        data = build_named_datasets(cfg, out)
    for name, (ds, _, _) in data.items():
        ds.to_csv(_path(out, f"dataset_{name}.csv"))
    summary = {}
    for name, mcfg in cfg["models"].items():
        ds = data[mcfg["dataset"]][0]
        with _Timer(f"identify {name}"):
            model = identify(ds, multivariate=mcfg["multivariate"], budget=mcfg["budget"],
                             n_starts=mcfg["n_starts"], seed=mcfg["seed"],
                             init_length_scale=mcfg["init_length_scale"],
                             init_length_scale_p=mcfg["init_length_scale_p"],
                             init_lambda=mcfg["init_lambda"],
                             hyper_max_samples=mcfg["hyper_max_samples"], name=name)
        model.source.save(_path(out, f"model_{name}.json"))
        rows = []
        for h in model.hyper:
            rows.append({"row": h.config.row_index, "lambda": h.config.lam,
                         "kernels": [k.to_dict() for k in h.config.element_kernels],
                         "log_evidence": h.objective, "init_log_evidence": h.init_objective,
                         "n_evals": h.n_evals, "improved": h.improved})
            log.info("model %s row %d: lambda=%.3e l_tau=%s log evidence %.6g", name,
                     h.config.row_index, h.config.lam,
                     [round(k.length_scale_tau, 4) for k in h.config.element_kernels],
                     h.objective)
        write_json(_path(out, f"hyper_{name}.json"), {"model": name, "dataset": mcfg["dataset"],
                                                      "n_samples": len(ds),
                                                      "n_dropped": ds.n_dropped, "rows": rows})
        summary[name] = {"n_samples": len(ds), "n_dropped": ds.n_dropped}
    for name, bcfg in cfg.get("blackbox", {}).items():
        _, trajs, ps = data[bcfg["dataset"]]
        with _Timer(f"blackbox {name}"):
            bb = blackbox_fit(trajs, ps, budget=bcfg["budget"], n_starts=bcfg["n_starts"],
                              seed=bcfg["seed"], max_samples=bcfg["max_samples"])
        bb.save(_path(out, f"blackbox_{name}.json"))
        summary[name] = {"n_samples": len(bb.inputs)}
    write_json(_path(out, "identify_summary.json"), summary)
    return summary


def _load_lppv(out, name, forced):
    ident = IdentifiedModel.load(_require(_path(out, f"model_{name}.json")))
    if ident.input_dim and not forced:
        raise ConfigError(f"model {name} has an exogenous input; it cannot be simulated on an "
                          "autonomous test trajectory")
    return ident, LppvModel.from_identified(ident, name=name)


def _lppv_prediction(name, model, xp0, tau0, d, t_end, p, t_eval, sf):
    tt = simulate(model, xp0, tau0, d, (0.0, t_end), p=p, t_eval=t_eval)
    return Prediction(name, tt.times, reconstruct(tt, sf), tt.x_perp, tt.tau_unwrapped)


def run_predict(cfg, out):
    os.makedirs(out, exist_ok=True)
    tc = cfg["test"]
    preds = []
    if cfg["system"] == "vanderpol":
        sys, _, sf = _vdp_load(cfg, out)
        T = sf.period
        w = tc["forcing_frequency_factor"] * 2.0 * np.pi / T
        d = sinusoid(tc["forcing_amplitude"], w)
        xp0, tau0 = np.atleast_1d(np.asarray(tc["x_perp0"], float)), float(tc["tau0"])
        x0 = from_transverse(xp0, tau0, sf)
        test_id = "vanderpol"
        cond = None
    else:
        cond = load_condition(cfg, out, tc["vr"])
        sf, T = cond.sf, cond.ref.period
        rng = np.random.default_rng(tc["seed"])
        xp0 = _random_offset(rng, tc["x_perp_norm"])
        tau0 = float(rng.uniform(0.0, T))
        x0 = from_transverse(xp0, tau0, sf)
        sys = closed_loop_system(cond.ref, sf, cond.lqr, tau0=tau0, x0=x0)
        d = None
        test_id = f"kite {vr_tag(tc['vr'])}"
    spp = tc["samples_per_period"]
    n_samp = int(round(tc["duration_periods"] * spp)) + 1
    t_eval = np.arange(n_samp) * (T / spp)
    t_end = t_eval[-1]
    with _Timer("truth"):
        tr = integrate(sys, x0, d, (0.0, t_end), t_eval=t_eval)
        xp_true, tau_true = transverse_path(tr.states, sf, tau0)
    truth = Prediction("truth", tr.times, tr.states, xp_true, tau_true)
    for name in tc["models"]:
        with _Timer(f"predict {name}"):
            if name == "analytic":
                osys = sys if cond is None else closed_loop_system(cond.ref, sf, cond.lqr)
                model = analytic_model(osys, sf, cfg["analytic"]["grid_size"])
                preds.append(_lppv_prediction(name, model, xp0, tau0, d, t_end, None, t_eval, sf))
            elif name in cfg["models"]:
                ident, model = _load_lppv(out, name, d is not None)
                p = (cond.vr,) if (cond is not None and ident.multivariate) else None
                preds.append(_lppv_prediction(name, model, xp0, tau0, d, t_end, p, t_eval, sf))
            else:
                bb = BlackboxModel.load(_require(_path(out, f"blackbox_{name}.json")))
                p = (cond.vr,) if cond is not None else ()
                try:
                    btr = blackbox_predict(bb, x0, d, p, (0.0, t_end), t_eval=t_eval)
                    preds.append(Prediction(name, btr.times, btr.states))
                except (IntegrationError, LppvError) as exc:
                    log.warning("blackbox %s prediction failed: %s", name, exc)
                    preds.append(Prediction(name, t_eval, np.full_like(tr.states, np.inf)))
    rep = report(preds, truth, test_id)
    for pr in preds:
        prediction_csv(_path(out, f"prediction_{pr.name}.csv"), truth, pr)
    with open(_path(out, "report.txt"), "w") as fh:
        fh.write(rep.to_text())
    return rep


def _omega_csv(path, tau, est, ref):
    n, m = est.shape[1:]
    header = ["tau"]
    cols = [tau]
    for i in range(n):
        for j in range(m):
            header += [f"est_{i + 1}{j + 1}", f"ref_{i + 1}{j + 1}"]
            cols += [est[:, i, j], ref[:, i, j]]
    np.savetxt(path, np.column_stack(cols), fmt=CSV_FMT, delimiter=",",
               header=",".join(header), comments="")


def relative_l2(est, ref, floor=1e-3):
    """Per-element relative L2(tau) error; elements with small norm map to None."""
    nrm = np.sqrt(np.mean(ref ** 2, axis=0))
    err = np.sqrt(np.mean((est - ref) ** 2, axis=0))
    rel = np.where(nrm >= floor, err / np.where(nrm > 0, nrm, 1.0), np.nan)
    return [[None if np.isnan(v) else float(v) for v in row] for row in rel], nrm.tolist()


def run_compare(cfg, out):
    os.makedirs(out, exist_ok=True)
    G = cfg["compare"]["grid_size"]
    result = {}
    if cfg["system"] == "vanderpol":
        sys, _, sf = _vdp_load(cfg, out)
        cases = [(None, sys, sf, "")]
    else:
        cases = []
        for vr in cfg["compare"]["vr"]:
            cond = load_condition(cfg, out, vr)
            cases.append((cond, None, cond.sf, "_" + vr_tag(vr)))
    for cond, sys, sf, suffix in cases:
        tau = np.arange(G) * (sf.period / G)
        oracles = {}
        for name in cfg["compare"]["models"]:
            ident, model = _load_any(out, name)
            if cond is not None:
                key = ident.input_dim
                if key not in oracles:
                    osys = (tracking_system(cond.ref, cond.sf) if ident.input_dim
                            else closed_loop_system(cond.ref, cond.sf, cond.lqr))
                    oracles[key] = analytic_model(osys, sf, cfg["analytic"]["grid_size"])
                oracle = oracles[key]
                p = cond.vr if ident.multivariate else None
            else:
                if 0 not in oracles:
                    oracles[0] = analytic_model(sys, sf, cfg["analytic"]["grid_size"])
                oracle, p = oracles[0], None
            est, ref = model.omega(tau, p), oracle.omega(tau)
            _omega_csv(_path(out, f"omega_{name}{suffix}.csv"), tau, est, ref)
            rel, nrm = relative_l2(est, ref)
            result[name + suffix] = {"relative_l2": rel, "oracle_l2_norm": nrm,
                                     "vr": None if cond is None else cond.vr}
    write_json(_path(out, "compare.json"), result)
    return result


def _load_any(out, name):
    ident = IdentifiedModel.load(_require(_path(out, f"model_{name}.json")))
    return ident, LppvModel.from_identified(ident, name=name)


COMMANDS = {
    "limit-cycle": run_limit_cycle,
    "identify": run_identify,
    "predict": run_predict,
    "compare-omega": run_compare,
}
