"""Command-line entry point: ``gpsedf <command> [--config FILE] [--seed N] [--out DIR]``.

Configuration is TOML with sections [dataset], [training], [reduction] and
[sfea]; any key can be overridden through environment variables named
GPSEDF_<SECTION>__<KEY> (or GPSEDF_<KEY> for top-level keys), whose values
are parsed as TOML literals. Every command writes the resolved configuration
to ``<out>/config.toml``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import evaluation as ev
from .dataset import (
    build_constraint_grid,
    generate_protocols,
    load_observations_csv,
    save_observations_csv,
    synthesize_observations,
)
from .exceptions import ContractError, DomainError, ExtrapolationError, GPSEDFError, NumericalError, ParseError
from .kernel import Hyperparams
from .kinematics import MODEL_PARAMS, AnalyticalModel

log = logging.getLogger("gpsedf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
ENV_PREFIX = "GPSEDF_"
EXACT_FORMAT = "gpsedf.exact_state"

DEFAULTS = {
    "seed": 0,
    "out": "gpsedf-out",
    "dataset": {
        "csv": "",
        "truth": "GOH",
        "truth_params": {"mu": 5.0, "k1": 4.0, "k2": 10.0, "kappa": 0.1},
        "ell": 8,
        "noise": 0.02,
        "shear": True,
        "steps": 20,
        "max_stretch": 1.2,
    },
    "training": {
        "exact": False,
        "padding": 0.1,
        "constraint_resolution": [20, 20],
    },
    "reduction": {"resolution": [50, 50], "tol": 0.05},
    "sfea": {
        "mesh": "",
        "bcs": "",
        "n": 16,
        "traction": [6.0, 3.0],
        "snapshots": [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
        "standard_ut": False,
    },
}


def _train_defaults():
    from .gp_variational import TrainConfig

    d = TrainConfig().to_dict()
    d.pop("seed", None)
    d.pop("convexity", None)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if v is not None}


class ConfigError(ContractError):
    pass


def _merge(base, over, path=""):
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and k != "truth_params":
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{k} must be a table")
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v


def _env_overrides(environ):
    out = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def resolve_config(path=None, seed=None, out=None, environ=None):
    cfg = copy.deepcopy(DEFAULTS)
    cfg["training"].update(_train_defaults())
    if path:
        try:
            with open(path, "rb") as fh:
                _merge(cfg, tomli.load(fh))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    _merge(cfg, _env_overrides(os.environ if environ is None else environ))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    for sect, key in (("dataset", "csv"), ("sfea", "mesh"), ("sfea", "bcs")):
        p = cfg[sect][key]
        if p and not Path(p).exists():
            raise ConfigError(f"{sect}.{key}: {p} does not exist")
    return cfg


def _outdir(cfg):
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "config.toml", "wb") as fh:
        tomli_w.dump(cfg, fh)
    return d


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ev._jsonable(obj), fh, indent=1, sort_keys=True)


def _truth(cfg):
    d = cfg["dataset"]
    if d["truth"] not in MODEL_PARAMS:
        raise ConfigError(f"unknown truth model {d['truth']!r}")
    return AnalyticalModel(d["truth"], d["truth_params"])


def _observations(cfg):
    d = cfg["dataset"]
    if d["csv"]:
        return load_observations_csv(d["csv"]), None
    protos = generate_protocols(d["ell"], d["shear"], d["max_stretch"], d["steps"])
    return synthesize_observations(protos, _truth(cfg), d["noise"], seed=cfg["seed"]), protos


def _train_config(cfg, convexity):
    from .gp_variational import TrainConfig

    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in cfg["training"].items() if k in names}
    return TrainConfig(seed=cfg["seed"], convexity=convexity, **kw)


def load_gp(path):
    """Estimator for a saved variational or exact state file."""
    from .gp_exact import ExactGPRegressor
    from .gp_variational import ConvexGPRegressor, VariationalState

    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") == EXACT_FORMAT:
        est = ExactGPRegressor(hyperparams=Hyperparams.from_dict(d["hyperparams"]), optimize=False)
        obs = np.asarray(d["observations"], dtype=float)
        est.fit(obs[:, :2], obs[:, 2:])
        est.box_ = tuple(d["box"])
        return est
    return ConvexGPRegressor.from_state(VariationalState.from_dict(d))


def _predict_fn(est):
    return est.predict_sedf


def _box(est):
    return tuple(est.state_.box) if hasattr(est, "state_") else tuple(est.box_)


# --- commands ----------------------------------------------------------------


def cmd_generate_data(cfg, args):
    out = _outdir(cfg)
    obs, protos = _observations(cfg)
    save_observations_csv(obs, out / "observations.csv")
    manifest = {
        "seed": cfg["seed"],
        "n_records": len(obs),
        "protocols": [asdict(p) for p in protos] if protos else obs.protocols(),
    }
    _dump_json(manifest, out / "protocols.json")
    return EXIT_OK


def cmd_train(cfg, args):
    out = _outdir(cfg)
    obs, _ = _observations(cfg)
    t0 = time.perf_counter()
    if args.exact or cfg["training"]["exact"]:
        from .gp_exact import initial_hyperparams, optimize_hyperparams

        h = optimize_hyperparams(obs, initial_hyperparams(obs))
        box = build_constraint_grid(obs, cfg["training"]["padding"]).bounds
        state = {
            "format": EXACT_FORMAT,
            "exact": True,
            "hyperparams": h.to_dict(),
            "observations": np.column_stack([obs.X, obs.y]).tolist(),
            "box": list(box),
        }
        _dump_json(state, out / "state.json")
    else:
        from .gp_variational import TrainingData, train

        tcfg = _train_config(cfg, convexity=not args.no_convexity)
        grid = build_constraint_grid(obs, cfg["training"]["padding"], tuple(cfg["training"]["constraint_resolution"]))
        state, trace = train(TrainingData(obs, grid if tcfg.convexity else None), tcfg)
        state.to_json(out / "state.json")
        trace.to_csv(out / "trace.csv")
    log.info("training finished in %.1f s", time.perf_counter() - t0)
    return EXIT_OK


def cmd_evaluate(cfg, args):
    out = _outdir(cfg)
    est = load_gp(args.state)
    obs, _ = _observations(cfg)
    truth = _truth(cfg)
    from .dataset import Lattice

    lat = Lattice(_box(est), tuple(cfg["reduction"]["resolution"]))
    means, stds = ev.gp_grid_fields(_predict_fn(est), lat.points)
    report = ev.grid_error(means, truth, lat.points, hull_points=obs.invariants)
    for tag in ev.FIELDS:
        ev.write_grid_csv(out / f"grid_mean_{tag}.csv", lat.points, means[tag])
        ev.write_grid_csv(out / f"grid_std_{tag}.csv", lat.points, stds[tag])
        ev.write_grid_csv(out / f"grid_error_{tag}.csv", lat.points, report.errors[tag])
    metrics = ev.fit_metrics(obs, est.predict(obs.X))
    curves = ev.prediction_protocols(_predict_fn(est), truth)
    coverage = {}
    for name, c in curves.items():
        for comp in c.mean:
            ev.write_curves_csv(out / f"{name}_{comp}.csv", c, comp)
            coverage[f"{name}_{comp}"] = c.coverage(comp)
    summary = {
        "grid_error": report.summary(),
        "fit": metrics.to_dict(),
        "mean_std_val": float(np.mean(stds["val"])),
        "band_coverage": coverage,
    }
    if not args.skip_models:
        summary["models"] = _compare(obs, cfg["seed"], out)
    _dump_json(summary, out / "metrics.json")
    return EXIT_OK


def _compare(obs, seed, out, gp_metrics=None):
    fits = ev.fit_analytical_models(obs, seed=seed)
    rows = {kind: f.to_dict() for kind, f in fits.items()}
    if gp_metrics is not None:
        rows["GP"] = {"kind": "GP", "params": None, "metrics": gp_metrics.to_dict()}
    with open(out / "models.csv", "w", encoding="utf-8") as fh:
        fh.write("model,L2,R2\n")
        for kind, r in rows.items():
            m = r.get("metrics") or {}
            fh.write(f"{kind},{m.get('L2', float('nan'))!r},{m.get('R2', float('nan'))!r}\n")
    return rows


def cmd_compare_models(cfg, args):
    out = _outdir(cfg)
    obs, _ = _observations(cfg)
    gp = None
    if args.state:
        est = load_gp(args.state)
        gp = ev.fit_metrics(obs, est.predict(obs.X))
    _dump_json(_compare(obs, cfg["seed"], out, gp), out / "models.json")
    return EXIT_OK


def _sedf(cfg, args):
    from .dataset import Lattice
    from .posterior_reduce import StochasticSEDF, build_stochastic_sedf, fit_tensor_spline

    red = cfg["reduction"]
    if args.truth:
        # spline of the analytic truth over the padded data box (reference surrogate)
        obs, _ = _observations(cfg)
        lat = Lattice(build_constraint_grid(obs, cfg["training"]["padding"]).bounds, tuple(red["resolution"]))
        values = _truth(cfg).energy(lat.points[:, 0], lat.points[:, 1])
        return StochasticSEDF.deterministic(fit_tensor_spline(lat, values))
    if not args.state:
        raise ConfigError("--state is required unless --truth is given")
    est = load_gp(args.state)
    tol = 1.0 if args.deterministic else red["tol"]
    return build_stochastic_sedf(est, _box(est), tol, tuple(red["resolution"]))


def cmd_export_spline(cfg, args):
    out = _outdir(cfg)
    sedf = _sedf(cfg, args)
    sedf.to_json(out / "sedf.json")
    return EXIT_OK


def _fe_problem(cfg):
    from .fesolver import canonical_problem, load_bcs, load_mesh

    s = cfg["sfea"]
    mesh, bcs = canonical_problem(s["n"], tuple(s["traction"]))
    if s["mesh"]:
        mesh = load_mesh(s["mesh"])
    if s["bcs"]:
        bcs = load_bcs(s["bcs"])
    return mesh, bcs


def cmd_sfea(cfg, args):
    from .sfea import build_sigma_points, ensemble_stats, propagate

    out = _outdir(cfg)
    sedf = _sedf(cfg, args)
    sedf.to_json(out / "sedf.json")
    mesh, bcs = _fe_problem(cfg)
    snaps = tuple(cfg["sfea"]["snapshots"])
    ens = build_sigma_points(sedf.eigenvalues, cfg["sfea"]["standard_ut"])
    results, ens = propagate(sedf, mesh, bcs, snaps, ensemble=ens)
    members = out / "members"
    members.mkdir(exist_ok=True)
    for k, r in results.items():
        _dump_json({"k": k, "nu": ens.points[k], "log": r.log}, members / f"member_{k:03d}.json")
    ensemble_stats(results, ens, snaps).to_json(out / "statistics.json")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export-spline": cmd_export_spline,
    "sfea": cmd_sfea,
    "compare-models": cmd_compare_models,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="gpsedf", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="write synthetic biaxial observations")
    t = sub.add_parser("train", parents=[common], help="train the strain-energy GP")
    t.add_argument("--no-convexity", action="store_true", help="skip the convexity-constrained stage")
    t.add_argument("--exact", action="store_true", help="constraint-free exact GP")
    e = sub.add_parser("evaluate", parents=[common], help="error grids, metrics and prediction curves")
    e.add_argument("--state", required=True)
    e.add_argument("--skip-models", action="store_true", help="skip the analytical-model comparison")
    x = sub.add_parser("export-spline", parents=[common], help="write the stochastic spline SEDF")
    s = sub.add_parser("sfea", parents=[common], help="sigma-point stochastic FE analysis")
    for q in (x, s):
        q.add_argument("--state", help="trained GP state file")
        q.add_argument("--deterministic", action="store_true", help="mean surface only (m = 0)")
        q.add_argument("--truth", action="store_true", help="spline of the configured analytic truth instead of a GP")
    c = sub.add_parser("compare-models", parents=[common], help="fit the analytical models")
    c.add_argument("--state", help="optional GP state to include in the table")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.seed, args.out)
        for attr in ("state",):
            p = getattr(args, attr, None)
            if p and not Path(p).exists():
                raise ConfigError(f"--{attr}: {p} does not exist")
        return COMMANDS[args.command](cfg, args)
    except (ParseError, OSError) as exc:
        print(f"gpsedf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, ExtrapolationError) as exc:
        print(f"gpsedf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ContractError, DomainError, TypeError, KeyError) as exc:
        print(f"gpsedf: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GPSEDFError as exc:
        print(f"gpsedf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
