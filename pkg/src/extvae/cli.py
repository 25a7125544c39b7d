"""Command-line interface.

Subcommands: simulate, preprocess, train, emulate, counterfactual, metrics,
gradcheck, tailcheck.  Every command is deterministic given (config, seed),
writes a manifest (input/output hashes, seed, version) beside its outputs, and
exits 0 on success, 1 on numerical failure, 2 on I/O or configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from . import emulation as emu
from . import fieldsim as fs
from . import metrics as mx
from . import model as mdl
from . import preprocess as pp
from . import training as tr
from .autodiff import NonFiniteError, fd_check
from .distributions import tail_equivalence_check
from .model import HyperParams, ModelConfig
from .seeds import substream

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# presets and configuration
# ---------------------------------------------------------------------------

DEFAULT_DATA = {
    "rows": 50, "cols": 50, "extent": 20.0, "knot_side": 8,
    "wendland_radius": 3.0, "n_t": 528, "gamma": 2.0, "b": 2.0, "tau": 15.0,
    "alpha0": 30.0,
}
DESK_DATA = {
    "rows": 20, "cols": 20, "extent": 20.0, "knot_side": 4,
    # 4x4 knots on [0,20]^2 sit ~6.7 apart; radius 3 would leave interior
    # sites outside every basis support
    "wendland_radius": 6.0, "n_t": 200, "gamma": 2.0, "b": 2.0, "tau": 15.0,
    "alpha0": 30.0,
}
# presets select the absolute-value temporal penalty: the signed form does
# not block the slow scale drift described in the README
DESK_HYPER = {"latent_dim": 16, "n_theta_basis": 9, "enc_widths": [64],
              "rho0": 0.1, "penalty_abs": True}
DEFAULT_HYPER = {"latent_dim": 64, "n_theta_basis": 16, "enc_widths": [64],
                 "rho0": 0.1, "penalty_abs": True}

_SECTION_KEYS = {
    "data": set(DEFAULT_DATA),
    "hyper": set(HyperParams.__dataclass_fields__),
    "train": {"batch_size", "epochs", "checkpoint_every", "beta1", "beta2",
              "adam_eps"},
    "emulate": {"n_samples", "mode", "draw_latent_noise", "draw_data_noise"},
    "metrics": {"distance", "tol", "u", "n_boot", "max_pairs", "ref_index"},
    "paths": {"out"},
}


def load_config(path: str | None) -> dict:
    """Read and strictly validate a run configuration document."""
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    version = cfg.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version!r}")
    for key, value in cfg.items():
        if key == "seed":
            continue
        if key not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section {key!r}")
        unknown = set(value) - _SECTION_KEYS[key]
        if unknown:
            raise ConfigError(f"unknown key(s) in config section {key!r}: "
                              f"{sorted(unknown)}")
    return cfg


def _merged(section: str, preset: dict, cfg: dict) -> dict:
    out = dict(preset)
    out.update(cfg.get(section, {}))
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_matrix_csv(path: str, matrix: np.ndarray, prefix: str,
                     index_name: str = "time_index", ids=None) -> None:
    """Wide layout: one row per time step, one column per site/knot."""
    matrix = np.asarray(matrix)
    if ids is None:
        ids = range(matrix.shape[1])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([index_name] + [f"{prefix}{j}" for j in ids])
        for t in range(matrix.shape[0]):
            w.writerow([t] + [_fmt(v) for v in matrix[t]])


def read_matrix_csv(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])


def write_series_csv(path: str, values: np.ndarray, name: str = "condition") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", name])
        for t, v in enumerate(values):
            w.writerow([t, _fmt(v)])


def read_series_csv(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([float(row[1]) for row in rows[1:]])


def write_coords_csv(path: str, coords: np.ndarray, id_name: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([id_name, "x", "y"])
        for i, (x, y) in enumerate(coords):
            w.writerow([i, _fmt(x), _fmt(y)])


def read_coords_csv(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(row[1]), float(row[2])] for row in rows[1:]])


def write_ensemble(path: str, ens: emu.EmulationEnsemble, binary: bool) -> None:
    if binary:
        ens.samples.astype("<f8").tofile(path)
        sidecar = {
            "shape": list(ens.samples.shape),
            "dtype": "<f8", "order": "C",
            "axes": ["time_index", "site_position", "sample_index"],
            "site_indices": ens.site_indices.tolist(),
            "scenario": ens.scenario, "seed": ens.seed,
        }
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=1)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "site_id", "sample_index", "value", "scenario"])
        n_t, n_sel, n_samp = ens.samples.shape
        for t in range(n_t):
            for j in range(n_sel):
                sid = int(ens.site_indices[j])
                for s in range(n_samp):
                    w.writerow([t, sid, s, _fmt(ens.samples[t, j, s]), ens.scenario])


def write_curve_csv(path: str, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "estimate", "lo95", "hi95"])
        for k in range(curve.u.size):
            w.writerow([_fmt(curve.u[k]), _fmt(curve.estimate[k]),
                        _fmt(curve.lo95[k]), _fmt(curve.hi95[k])])


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, seed, inputs: list[str],
                   outputs: list[str], config: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config or {},
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    preset = DESK_DATA if args.desk else DEFAULT_DATA
    data_cfg = _merged("data", preset, cfg)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = args.out
    os.makedirs(out, exist_ok=True)

    grid = fs.regular_grid(data_cfg["rows"], data_cfg["cols"], data_cfg["extent"])
    knots = fs.knot_lattice(data_cfg["knot_side"], data_cfg["extent"])
    w = fs.wendland_basis(grid.sites, knots, data_cfg["wendland_radius"])

    inputs = []
    if args.conditions:
        raw = read_series_csv(args.conditions)
        inputs.append(args.conditions)
    else:
        raw = fs.synthetic_condition(data_cfg["n_t"], seed)
    c = fs.smooth_condition(raw, window=5)

    theta = fs.simulate_theta(c, knots, gamma=data_cfg["gamma"],
                              b=data_cfg["b"], tau=data_cfg["tau"])
    x, z = fs.simulate_dataset(theta, w, data_cfg["alpha0"], seed,
                               return_latent=True)

    paths = {
        "sites": os.path.join(out, "sites.csv"),
        "knots": os.path.join(out, "knots.csv"),
        "conditions": os.path.join(out, "conditions.csv"),
        "fields": os.path.join(out, "fields.csv"),
        "theta": os.path.join(out, "theta_truth.csv"),
        "latent": os.path.join(out, "latent_truth.csv"),
    }
    write_coords_csv(paths["sites"], grid.sites, "site_id")
    write_coords_csv(paths["knots"], knots, "knot_id")
    write_series_csv(paths["conditions"], c)
    write_matrix_csv(paths["fields"], x, "site_")
    write_matrix_csv(paths["theta"], theta, "knot_")
    write_matrix_csv(paths["latent"], z, "knot_")
    write_manifest(out, "simulate", seed, inputs, list(paths.values()),
                   {"data": data_cfg})
    print(f"simulated {x.shape[0]} x {x.shape[1]} fields "
          f"(K={knots.shape[0]}) into {out}")
    return 0


def _hyper_from(cfg: dict, desk: bool, overrides: dict) -> HyperParams:
    base = dict(DESK_HYPER if desk else DEFAULT_HYPER)
    base.update(cfg.get("hyper", {}))
    base.update({k: v for k, v in overrides.items() if v is not None})
    if "enc_widths" in base:
        base["enc_widths"] = tuple(base["enc_widths"])
    return HyperParams(**base)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    x = read_matrix_csv(args.fields)
    c = read_series_csv(args.conditions)
    knots = read_coords_csv(args.knots) if args.knots else None
    sites = read_coords_csv(args.sites) if args.sites else None
    out = args.out
    os.makedirs(out, exist_ok=True)

    hyper = _hyper_from(cfg, args.desk, {
        "epochs": args.epochs, "learning_rate": args.lr, "seed": seed,
        "fix_w": True if args.fixed_w else None,
    })
    train_cfg = tr.TrainConfig(hyper=hyper, **cfg.get("train", {}))
    data_cfg = _merged("data", DESK_DATA if args.desk else DEFAULT_DATA, cfg)
    radius = data_cfg["wendland_radius"]

    grid_scores_path = None
    if args.grid:
        with open(args.grid, "r", encoding="utf-8") as fh:
            grid = json.load(fh)
        train_cfg, scores = tr.grid_search(
            x, c, train_cfg, grid, search_epochs=args.grid_epochs,
            knots=knots, sites=sites, wendland_radius=radius)
        grid_scores_path = os.path.join(out, "grid_scores.csv")
        with open(grid_scores_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["candidate", "score"])
            for i, s in enumerate(scores):
                w.writerow([i, _fmt(s)])

    ckpt_path = os.path.join(out, "checkpoint.json")
    model, report = tr.train(x, c, dataclasses.replace(
        train_cfg, checkpoint_path=ckpt_path),
        knots=knots, sites=sites, wendland_radius=radius)

    report_path = os.path.join(out, "train_report.csv")
    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(report.loss_history):
            w.writerow([e, _fmt(v)])

    inputs = [p for p in (args.fields, args.conditions, args.knots, args.sites,
                          args.grid, args.config) if p]
    outputs = [ckpt_path, report_path] + ([grid_scores_path] if grid_scores_path else [])
    write_manifest(out, "train", seed, inputs, outputs)
    print(f"trained {report.epochs_completed} epochs "
          f"({report.n_params} parameters, {report.seconds:.1f}s), "
          f"final loss {report.loss_history[-1] if report.loss_history else float('nan'):.6g}, "
          f"converged={report.converged}")
    return 0


def _emulate_common(args, counterfactual_mode: bool) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    emu_cfg = _merged("emulate", {"n_samples": emu.DEFAULT_N_SAMPLES,
                                  "mode": "reconstruction",
                                  "draw_latent_noise": True,
                                  "draw_data_noise": True}, cfg)
    n_samples = args.n_samples if args.n_samples is not None else emu_cfg["n_samples"]
    model = tr.checkpoint_load(args.checkpoint)
    x = read_matrix_csv(args.fields)
    c = read_series_csv(args.conditions)
    out = args.out
    os.makedirs(out, exist_ok=True)
    sites_sel = (np.array([int(s) for s in args.sites.split(",")])
                 if args.sites else None)

    scenario = "factual"
    c_used = c
    if counterfactual_mode:
        scenario = "counterfactual"
        if args.cf_conditions:
            c_used = read_series_csv(args.cf_conditions)
        elif args.flip:
            c_used = emu.flip_condition(c)
        else:
            raise ConfigError("counterfactual needs --flip or --cf-conditions")
    elif args.condition_mode:
        c_used = emu.ablate_condition(c, args.condition_mode, seed)
        scenario = args.condition_mode

    if counterfactual_mode:
        ens = emu.counterfactual(model, x, c, c_used, n_samples, seed,
                                 mode=emu_cfg["mode"],
                                 draw_latent_noise=emu_cfg["draw_latent_noise"],
                                 draw_data_noise=emu_cfg["draw_data_noise"],
                                 sites=sites_sel,
                                 checkpoint_id=_sha256(args.checkpoint))
    else:
        ens = emu.emulate(model, x, c_used, n_samples, seed, scenario=scenario,
                          mode=emu_cfg["mode"],
                          draw_latent_noise=emu_cfg["draw_latent_noise"],
                          draw_data_noise=emu_cfg["draw_data_noise"],
                          sites=sites_sel,
                          checkpoint_id=_sha256(args.checkpoint))

    ens_path = os.path.join(out, "ensemble.bin" if args.binary else "ensemble.csv")
    write_ensemble(ens_path, ens, args.binary)

    theta_path = os.path.join(out, "theta_hat.csv")
    with open(theta_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "knot_id", "mean", "std"])
        t_mean = ens.theta.mean(axis=2)
        t_std = ens.theta.std(axis=2)
        for t in range(t_mean.shape[0]):
            for k in range(t_mean.shape[1]):
                w.writerow([t, k, _fmt(t_mean[t, k]), _fmt(t_std[t, k])])

    fields_path = os.path.join(out, "emulated_fields.csv")
    write_matrix_csv(fields_path, ens.samples[:, :, 0], "site_",
                     ids=ens.site_indices)

    inputs = [p for p in (args.checkpoint, args.fields, args.conditions,
                          getattr(args, "cf_conditions", None), args.config) if p]
    outputs = [p for p in (ens_path, theta_path, fields_path)]
    if args.binary:
        outputs.append(ens_path + ".json")
    write_manifest(out, "counterfactual" if counterfactual_mode else "emulate",
                   seed, inputs, outputs)
    print(f"wrote {scenario} ensemble of {ens.n_samples} samples to {out}")
    return 0


def cmd_emulate(args) -> int:
    return _emulate_common(args, counterfactual_mode=False)


def cmd_counterfactual(args) -> int:
    return _emulate_common(args, counterfactual_mode=True)


def cmd_metrics(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    m_cfg = _merged("metrics", {
        "distance": None, "tol": None,
        "u": [0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.925, 0.95, 0.975, 0.99],
        "n_boot": mx.N_BOOT_DEFAULT, "max_pairs": mx.MAX_PAIRS_PER_BIN,
        "ref_index": None,
    }, cfg)
    truth = read_matrix_csv(args.truth)
    emulated = read_matrix_csv(args.emulated)
    coords = read_coords_csv(args.coords)
    if not (truth.shape[1] == emulated.shape[1] == coords.shape[0]):
        raise ConfigError(
            f"site counts disagree: truth has {truth.shape[1]} columns, "
            f"emulated has {emulated.shape[1]}, coords has {coords.shape[0]} "
            "rows (emulate without --sites to produce full-grid fields)")
    out = args.out
    os.makedirs(out, exist_ok=True)
    u = np.asarray(m_cfg["u"], dtype=np.float64)

    # grid spacing: smallest nonzero pairwise distance
    d = fs.pairwise_distances(coords, coords)
    psi = float(np.min(d[d > 0]))
    distance = m_cfg["distance"] if m_cfg["distance"] is not None else psi
    tol = m_cfg["tol"] if m_cfg["tol"] is not None else psi / 2.0
    ref = (m_cfg["ref_index"] if m_cfg["ref_index"] is not None
           else int(np.argmin(np.sum((coords - coords.mean(axis=0)) ** 2, axis=1))))

    outputs = []
    sidecar = {"distance": distance, "tol": tol, "psi": psi, "seed": seed,
               "n_boot": m_cfg["n_boot"], "ref_index": ref}
    for name, fields in (("truth", truth), ("emulated", emulated)):
        chi = mx.chi_curve(fields, coords, distance, u, tol=tol,
                           n_boot=m_cfg["n_boot"], seed=seed,
                           max_pairs=m_cfg["max_pairs"])
        path = os.path.join(out, f"chi_{name}.csv")
        write_curve_csv(path, chi)
        outputs.append(path)
        are = mx.are_curve(fields, psi, ref, u, n_boot=m_cfg["n_boot"], seed=seed)
        path = os.path.join(out, f"are_{name}.csv")
        write_curve_csv(path, are)
        outputs.append(path)

    if args.ensemble:
        ens, site_ids, scenarios = _read_ensemble_csv(args.ensemble)
        scores_path = os.path.join(out, "twcrps.csv")
        summary_path = os.path.join(out, "twcrps_summary.csv")
        qq_path = os.path.join(out, "qq.csv")
        with open(scores_path, "w", newline="", encoding="utf-8") as fh, \
                open(summary_path, "w", newline="", encoding="utf-8") as fh2:
            w = csv.writer(fh)
            w.writerow(["scenario", "time_index", "site_id", "twcrps"])
            w2 = csv.writer(fh2)
            w2.writerow(["scenario", "median_twcrps"])
            for scenario in scenarios:
                samples = ens[scenario]
                obs = truth[:, site_ids]
                res = mx.twcrps_field(samples, obs)
                for t in range(res.scores.shape[0]):
                    for j in range(res.scores.shape[1]):
                        w.writerow([scenario, t, int(site_ids[j]),
                                    _fmt(res.scores[t, j])])
                w2.writerow([scenario, _fmt(np.median(res.scores))])
        q = np.linspace(0.01, 0.99, 99)
        first = scenarios[0]
        qo, qe = mx.qq_data(truth[:, site_ids].ravel(), ens[first].ravel(), q)
        with open(qq_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["q", "obs_quantile", "ensemble_quantile"])
            for k in range(q.size):
                w.writerow([_fmt(q[k]), _fmt(qo[k]), _fmt(qe[k])])
        outputs += [scores_path, summary_path, qq_path]

    with open(os.path.join(out, "metrics_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    outputs.append(os.path.join(out, "metrics_meta.json"))
    inputs = [p for p in (args.truth, args.emulated, args.coords,
                          args.ensemble, args.config) if p]
    write_manifest(out, "metrics", seed, inputs, outputs)
    print(f"wrote dependence and score diagnostics to {out}")
    return 0


def _read_ensemble_csv(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    rows = {}
    scenarios = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for t, sid, s, v, scen in reader:
            key = (scen, int(t), int(sid), int(s))
            rows[key] = float(v)
            if scen not in scenarios:
                scenarios.append(scen)
    out = {}
    site_ids = sorted({k[2] for k in rows})
    for scen in scenarios:
        ts = sorted({k[1] for k in rows if k[0] == scen})
        ss = sorted({k[3] for k in rows if k[0] == scen})
        arr = np.empty((len(ts), len(site_ids), len(ss)))
        for (sc, t, sid, s), v in rows.items():
            if sc == scen:
                arr[ts.index(t), site_ids.index(sid), ss.index(s)] = v
        out[scen] = arr
    return out, np.asarray(site_ids), scenarios


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    hyper = HyperParams(latent_dim=4, n_theta_basis=4, conv_channels=8,
                        enc_widths=(16,), alpha0=30.0, rho0=0.5, seed=seed)
    cfg = ModelConfig(n_sites=25, hyper=hyper)
    params = mdl.init_params(cfg, seed)
    rng = substream(seed, "gradcheck-data")
    x = np.exp(rng.standard_normal((6, 25)))
    c = rng.random(6)
    eps = mdl.draw_eps(cfg, 6, seed)
    objective = mdl.make_objective(cfg, x, c, eps)
    report = fd_check(objective, params, step=1e-5,
                      kink_fn=lambda pv: mdl.elbo_kink_values(cfg, pv, x, c, eps))
    ok = report.max_rel_err <= args.tol
    print(f"gradcheck: max relative error {report.max_rel_err:.3e} "
          f"at {report.argmax[0]}{list(report.argmax[1])} over "
          f"{params.size} parameters ({report.n_skipped} kink-filtered) "
          f"-> {'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    return 0 if ok else 1


def cmd_tailcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    tau, alpha0 = 1.0, 2.0
    # tight site cluster between the two knots: the shared latent factors
    # dominate, so joint exceedances accumulate
    sites = np.array([[0.45, 0.45], [0.55, 0.45], [0.45, 0.55], [0.55, 0.55]])
    knots = np.array([[0.25, 0.25], [0.75, 0.75]])
    w = fs.wendland_basis(sites, knots, radius=2.0)
    theta = np.array([0.1, 0.3])
    from .distributions import ExpPSParams, expps_sample

    z = np.column_stack([
        expps_sample(ExpPSParams(0.5, float(th)), args.n, substream(seed, "z", k))
        for k, th in enumerate(theta)
    ])
    y = z @ w.T
    res = tail_equivalence_check(y, tau, alpha0, seed, level=args.level)
    marg_ok = abs(res.marginal_ratio - res.expected_marginal) <= 0.20 * res.expected_marginal
    joint_ok = abs(res.joint_ratio - res.expected_joint) <= 0.35 * res.expected_joint
    print(f"tailcheck: marginal ratio {res.marginal_ratio:.4f} "
          f"(target {res.expected_marginal:g} +/- 20%) -> "
          f"{'PASS' if marg_ok else 'FAIL'}")
    print(f"tailcheck: joint ratio {res.joint_ratio:.4f} "
          f"(target {res.expected_joint:g} +/- 35%) -> "
          f"{'PASS' if joint_ok else 'FAIL'}")
    return 0 if (marg_ok and joint_ok) else 1


def cmd_preprocess(args) -> int:
    daily = read_matrix_csv(args.daily)
    coords = read_coords_csv(args.sites)
    start = dt.date.fromisoformat(args.start_date)
    dates = pp.daterange(start, daily.shape[0])
    out = args.out
    os.makedirs(out, exist_ok=True)

    results = pp.run_pipeline(daily, dates, coords, radius_km=args.radius_km,
                              n_bins=args.bins, doubled=args.doubled)
    months = results[0].months
    maxima = np.column_stack([r.maxima for r in results])
    transformed = np.column_stack([r.transformed for r in results])

    maxima_path = os.path.join(out, "monthly_maxima.csv")
    write_matrix_csv(maxima_path, maxima, "site_", index_name="month_index")
    fields_path = os.path.join(out, "fields.csv")
    write_matrix_csv(fields_path, transformed, "site_", index_name="time_index")
    gev_path = os.path.join(out, "gev_params.csv")
    with open(gev_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "mu", "sigma", "xi"])
        for j, r in enumerate(results):
            w.writerow([j, _fmt(r.gev.mu), _fmt(r.gev.sigma), _fmt(r.gev.xi)])
    gof_path = os.path.join(out, "gof.csv")
    with open(gof_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "statistic", "df", "p_value"])
        for j, r in enumerate(results):
            w.writerow([j, _fmt(r.gof.statistic), r.gof.df, _fmt(r.gof.p_value)])
    months_path = os.path.join(out, "months.csv")
    with open(months_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["month_index", "year", "month"])
        for i, (yy, mm) in enumerate(months):
            w.writerow([i, yy, mm])

    outputs = [maxima_path, fields_path, gev_path, gof_path, months_path]
    write_manifest(out, "preprocess", None, [args.daily, args.sites], outputs)
    print(f"preprocessed {daily.shape[1]} sites, {len(months)} months -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="extvae",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--desk", action="store_true",
                    help="small 20x20 preset instead of the 50x50 default")
    sp.add_argument("--conditions", help="raw condition series CSV to smooth")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("preprocess", help="daily series -> Pareto-scale fields")
    sp.add_argument("--daily", required=True, help="daily values CSV (wide)")
    sp.add_argument("--sites", required=True, help="site lon/lat CSV")
    sp.add_argument("--start-date", required=True, help="first day, ISO format")
    sp.add_argument("--radius-km", type=float, default=pp.DEFAULT_NEIGHBOR_KM)
    sp.add_argument("--bins", type=int, default=10)
    sp.add_argument("--doubled", action="store_true",
                    help="classical factor-2 likelihood-ratio statistic")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="fit the model")
    common(sp)
    sp.add_argument("--fields", required=True)
    sp.add_argument("--conditions", required=True)
    sp.add_argument("--knots")
    sp.add_argument("--sites")
    sp.add_argument("--desk", action="store_true")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--fixed-W", dest="fixed_w", action="store_true",
                    help="keep the weight matrix fixed at the Wendland basis")
    sp.add_argument("--grid", help="JSON list of hyperparameter overrides")
    sp.add_argument("--grid-epochs", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    for name, fn in (("emulate", cmd_emulate), ("counterfactual", cmd_counterfactual)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--fields", required=True)
        sp.add_argument("--conditions", required=True)
        sp.add_argument("--n-samples", type=int, default=None)
        sp.add_argument("--sites", help="comma-separated site indices to keep")
        sp.add_argument("--binary", action="store_true")
        if name == "emulate":
            sp.add_argument("--condition-mode", choices=["white-noise", "fixed"],
                            help="ablate the condition series")
        else:
            sp.add_argument("--flip", action="store_true",
                            help="counterfactual c -> 1 - c")
            sp.add_argument("--cf-conditions", help="explicit series CSV")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("metrics", help="dependence and score diagnostics")
    common(sp)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--emulated", required=True)
    sp.add_argument("--coords", required=True)
    sp.add_argument("--ensemble", help="long-format ensemble CSV for twCRPS/QQ")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("tailcheck", help="noise-replacement tail-ratio audit")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--n", type=int, default=10**6)
    sp.add_argument("--level", type=float, default=0.999,
                    help="pooled quantile level defining the tail")
    sp.set_defaults(func=cmd_tailcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, tr.CheckpointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (tr.TrainingError, NonFiniteError, FloatingPointError, ValueError,
            OverflowError, RuntimeError) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
