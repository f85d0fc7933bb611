"""Command-line front end: ``fit``, ``predict``, ``diagnose`` and ``simulate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Failures also write a machine-readable ``error.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .data import (MCMCSettings, ModelSpec, PriorSet, load_dataset, read_sites, write_dataset)
from .diagnostics import ppc, summarize, waic
from .exceptions import AbundfitError, ConfigError, DataError, NumericalError
from .mcmc import PosteriorDraws
from .models.base import FitResult, fit_model, predict_abundance, summarize_draws
from .models._sampler import Problem
from .simulate import sim_dataset

SCHEMA_VERSION = 1
EXIT_CODES = {ConfigError: 2, DataError: 3, NumericalError: 4}

_MODEL_KEYS = {"family": "family", "abundanceDist": "abundance_dist",
               "detectionFn": "detection_fn", "spatial": "spatial",
               "speciesCorrelation": "species_correlation", "factorCount": "factor_count",
               "covModel": "cov_model", "neighborCount": "neighbor_count",
               "cutpoints": "cutpoints", "surveyType": "survey_type"}
_PRIOR_KEYS = {"coefMean": "coef_mean", "coefVar": "coef_var",
               "commVarShape": "comm_var_shape", "commVarRate": "comm_var_rate",
               "sigmaSqShape": "sigma_sq_shape", "sigmaSqRate": "sigma_sq_rate",
               "phiBounds": "phi_bounds", "nuBounds": "nu_bounds", "kappaBounds": "kappa_bounds",
               "loadingVar": "loading_var", "residVarShape": "resid_var_shape",
               "residVarRate": "resid_var_rate", "reVarShape": "re_var_shape",
               "reVarRate": "re_var_rate"}
_MCMC_KEYS = {"chains": "n_chains", "iters": "n_iter", "burnin": "n_burn", "thin": "thin",
              "seed": "seed", "batchLength": "batch_length"}
_DATA_FILES = {"sites": "sites", "counts": "counts", "countsSpecies": "counts_species",
               "abundCovs": "abund_covs", "detCovs": "det_covs"}
_TRUTH_KEYS = {"beta": "beta", "alpha": "alpha", "kappa": "kappa", "tauSq": "tau_sq",
               "sigmaSq": "sigma_sq", "phi": "phi", "nu": "nu", "lambda": "lambda_",
               "nReps": "n_reps", "nGroups": "n_groups", "reVar": "re_var"}


def _fmt(x):
    return format(float(x), ".17g")


def _schema():
    text = resources.files("abundfit").joinpath("config_schema.json").read_text()
    return json.loads(text)


def load_config(path):
    """Read and schema-validate a run configuration; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        config = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(config, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    return config


def spec_from_config(config):
    model = {_MODEL_KEYS[k]: v for k, v in config["model"].items()}
    priors = {_PRIOR_KEYS[k]: (tuple(v) if isinstance(v, list) else v)
              for k, v in config.get("priors", {}).items()}
    mcmc = {_MCMC_KEYS[k]: v for k, v in config.get("mcmc", {}).items() if k in _MCMC_KEYS}
    return ModelSpec(priors=PriorSet(**priors), mcmc=MCMCSettings(**mcmc), **model)


def spec_to_config(spec):
    """Inverse of :func:`spec_from_config` for the model, priors and mcmc blocks."""
    model = {}
    for key, attr in _MODEL_KEYS.items():
        val = getattr(spec, attr)
        if val is None:
            continue
        model[key] = val.value if hasattr(val, "value") else (
            list(val) if isinstance(val, tuple) else val)
    priors = {}
    for key, attr in _PRIOR_KEYS.items():
        val = getattr(spec.priors, attr)
        if val is not None:
            priors[key] = list(val) if isinstance(val, tuple) else val
    mcmc = {key: getattr(spec.mcmc, attr) for key, attr in _MCMC_KEYS.items()}
    return {"model": model, "priors": priors, "mcmc": mcmc}


def _data_paths(config, base):
    data = config.get("data")
    if data is None:
        raise ConfigError("config has no data block")
    paths = {}
    for key, name in _DATA_FILES.items():
        if key in data:
            p = Path(data[key])
            paths[name] = str(p if p.is_absolute() else base / p)
    if "counts" not in paths and "counts_species" not in paths:
        raise ConfigError("data block needs counts or countsSpecies")
    return paths


def _load_data(config, base):
    spec = spec_from_config(config)
    data_cfg = config["data"]
    paths = _data_paths(config, base)
    for p in paths.values():
        if not Path(p).is_file():
            raise DataError("file not found", path=p)
    data, geometry = load_dataset(
        paths, spec, data_cfg.get("abundCovNames"), data_cfg.get("detCovNames"),
        data_cfg.get("groupColumn"),
        (data_cfg.get("standardizeAbund", True), data_cfg.get("standardizeDet", True)))
    return spec, data, geometry


# ---------------------------------------------------------------------------
# fit


def _write_draws(fit, directory, store_latent):
    directory.mkdir(parents=True, exist_ok=True)
    blocks = {}
    for name in fit.parameter_names(include_latent=store_latent):
        arr = fit.flat_block(name)
        n_chain, n_samp = arr.shape[:2]
        blocks[name] = list(fit.draws.samples[name].shape[2:])
        with (directory / f"{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "draw", *fit.columns(name)])
            for c in range(n_chain):
                for s in range(n_samp):
                    w.writerow([c + 1, s + 1, *map(_fmt, arr[c, s])])
    return blocks


def _json_number(x):
    x = float(x)
    if np.isfinite(x):
        return float(_fmt(x))
    return "inf" if x > 0 else ("-inf" if x < 0 else "nan")


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _summary_json(table):
    rows = {}
    for label, rec in table.iterrows():
        rows[label] = {k: _json_number(v) for k, v in rec.items()}
    return rows


def write_loglik(path, loglik):
    """Little-endian float64, site index fastest, then draw, then chain.

    ``loglik`` is (C, S, I, J); species are folded into the site axis
    species-major, so the point index is ``i * J + j``.
    """
    arr = np.asarray(loglik, dtype="<f8")
    arr = arr.reshape(arr.shape[0], arr.shape[1], -1)
    path.write_bytes(np.ascontiguousarray(arr).tobytes())


def read_loglik(path, n_chains, n_samples, n_species, n_sites):
    path = Path(path)
    if not path.is_file():
        raise DataError("log-likelihood cache not found", path=path)
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    expected = n_chains * n_samples * n_species * n_sites
    if raw.size != expected:
        raise DataError(f"log-likelihood cache holds {raw.size} values, expected {expected}",
                        path=path)
    return raw.reshape(n_chains, n_samples, n_species, n_sites).astype(np.float64)


def cmd_fit(args):
    config_path = Path(args.config)
    config = load_config(config_path)
    base = config_path.parent
    out = Path(config.get("output", {}).get("directory", "output"))
    out = out if out.is_absolute() else base / out
    args.error_dir = out
    spec, data, geometry = _load_data(config, base)
    sweeps = config.get("mcmc", {}).get("latentSweeps", 1)
    fit = fit_model(data, geometry, spec, n_threads=args.threads, latent_sweeps=sweeps)
    out.mkdir(parents=True, exist_ok=True)
    store_latent = config.get("output", {}).get("storeLatent", True)
    blocks = _write_draws(fit, out / "draws", store_latent)
    _write_json(out / "summary.json", _summary_json(summarize(fit)))
    write_loglik(out / "loglik_cache.bin", fit.loglik)
    meta = {
        "schemaVersion": SCHEMA_VERSION,
        "config": config,
        "configDir": str(base.resolve()),
        "spec": spec_to_config(spec),
        "seed": spec.mcmc.seed,
        "versions": {"abundfit": __version__, "numpy": np.__version__,
                     "scipy": metadata.version("scipy"), "numba": metadata.version("numba")},
        "blocks": blocks,
        "species": list(fit.species),
        "nChains": fit.draws.n_chains,
        "nSamples": fit.draws.n_samples,
        "nSites": fit.problem.n_sites,
        "loglikLayout": "little-endian float64; index = ((chain * S + draw) * I + species) * J + site",
        "acceptance": {k: [np.round(np.mean(r), 6).item() for r in v]
                       for k, v in sorted(fit.draws.acceptance.items())},
    }
    _write_json(out / "fit_meta.json", meta)
    return 0


def load_fit(directory):
    """Rebuild a :class:`FitResult` from a ``fit`` output directory."""
    directory = Path(directory)
    meta_path = directory / "fit_meta.json"
    if not meta_path.is_file():
        raise DataError("fit metadata not found", path=meta_path)
    meta = json.loads(meta_path.read_text())
    config = meta["config"]
    spec, data, geometry = _load_data(config, Path(meta["configDir"]))
    sweeps = config.get("mcmc", {}).get("latentSweeps", 1)
    problem = Problem(spec, data, geometry, latent_sweeps=sweeps)
    n_chain, n_samp = meta["nChains"], meta["nSamples"]
    samples = {}
    for name, shape in meta["blocks"].items():
        path = directory / "draws" / f"{name}.csv"
        if not path.is_file():
            raise DataError("draws file not found", path=path)
        values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 2:]
        arr = values.reshape((n_chain, n_samp, *shape))
        samples[name] = arr.astype(np.int64) if name == "N" else arr
    loglik = read_loglik(directory / "loglik_cache.bin", n_chain, n_samp,
                         problem.n_species, problem.n_sites)
    draws = PosteriorDraws(samples, loglik, spec.mcmc)
    return FitResult(spec, draws, problem)


# ---------------------------------------------------------------------------
# predict


def _read_new_sites(path, fit):
    path = Path(path)
    if not path.is_file():
        raise DataError("file not found", path=path)
    geometry = read_sites(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if any(c.strip() for c in r)]
    design = fit.problem.stack.first.abund_covs
    missing = [n for n in design.names if n not in header]
    if missing:
        raise DataError(f"new-sites file lacks covariates {missing}", path=path)
    covs = np.array([[float(r[header.index(n)]) for n in design.names] for r in rows],
                    dtype=np.float64).reshape(len(rows), len(design.names))
    groups = None
    if fit.problem.groups is not None:
        if "group" not in header:
            raise DataError("new-sites file needs a group column", path=path)
        groups = [r[header.index("group")] for r in rows]
    offset = geometry.offset if "offset" in header else None
    return geometry, covs, offset, groups


def cmd_predict(args):
    fit_dir = Path(args.fit_dir)
    args.error_dir = Path(args.out).parent if args.out else fit_dir
    fit = load_fit(fit_dir)
    geometry, covs, offset, groups = _read_new_sites(args.new_sites, fit)
    pred = predict_abundance(fit, geometry.coords, covs, offset, groups, seed=args.seed)
    out = Path(args.out) if args.out else fit_dir / "predictions.csv"
    quantities = (("mu", pred.mu), (pred.response_name, pred.response))
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        stats = ["mean", "sd", "q2.5", "q50", "q97.5", "ci_width"]
        w.writerow(["id", "species"] + [f"{q}_{s}" for q, _ in quantities for s in stats])
        for i, sp in enumerate(pred.species):
            tables = [summarize_draws(arr[:, i, :]) for _, arr in quantities]
            for j, site in enumerate(geometry.ids):
                vals = [t.iloc[j][s] for t in tables for s in stats]
                w.writerow([site, sp, *map(_fmt, vals)])
    return 0


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args):
    fit_dir = Path(args.fit_dir)
    out = Path(args.out) if args.out else fit_dir
    args.error_dir = out
    fit = load_fit(fit_dir)
    res = waic(fit)
    report = {"elpd": _json_number(res.elpd), "pWAIC": _json_number(res.p_waic),
              "WAIC": _json_number(res.waic)}
    if args.compare:
        other = waic(load_fit(args.compare))
        report["compare"] = {"fit": str(args.compare), "WAIC": _json_number(other.waic),
                             "deltaWAIC": _json_number(res.waic - other.waic)}
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "waic.json", report)
    check = ppc(fit, args.statistic, args.grouping, seed=args.seed)
    _write_json(out / "ppc.json", {
        "statistic": check.statistic, "grouping": check.grouping,
        "pValue": _json_number(check.p_value),
        "pValueSpecies": {sp: _json_number(p) for sp, p in zip(fit.species, check.p_species)},
        "draws": [{"tObs": [_json_number(v) for v in o], "tRep": [_json_number(v) for v in r]}
                  for o, r in zip(check.t_obs, check.t_rep)],
    })
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    config_path = Path(args.config)
    config = load_config(config_path)
    base = config_path.parent
    out = Path(config.get("output", {}).get("directory", "simulated"))
    out = out if out.is_absolute() else base / out
    args.error_dir = out
    spec = spec_from_config(config)
    sim_cfg = config.get("simulate", {})
    truth = {_TRUTH_KEYS[k]: v for k, v in sim_cfg.get("truth", {}).items()}
    if spec.cutpoints is not None:
        truth["cutpoints"] = spec.cutpoints
    if spec.survey_type is not None:
        truth["survey_type"] = spec.survey_type
    seed = sim_cfg.get("seed", 0)
    try:
        sim = sim_dataset(spec, n_sites=sim_cfg.get("nSites", 100), seed=seed,
                          extent=tuple(sim_cfg.get("extent", (0.0, 1.0))),
                          n_species=sim_cfg.get("nSpecies"), dense=sim_cfg.get("dense", False),
                          **truth)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    paths = write_dataset(out, sim.data, sim.geometry)
    _write_json(out / "truth.json", sim.to_json())
    fit_config = spec_to_config(sim.spec)
    fit_config["mcmc"] = config.get("mcmc", {"chains": 1, "iters": 5000, "burnin": 2500,
                                              "seed": seed})
    inv = {v: k for k, v in _DATA_FILES.items()}
    fit_config["data"] = {inv[k]: Path(p).name for k, p in paths.items()}
    fit_config["data"].update(standardizeAbund=False, standardizeDet=False)
    if "abund_covs" in paths and getattr(as_first(sim.data), "groups", None) is not None:
        fit_config["data"]["groupColumn"] = "group"
    fit_config["output"] = {"directory": "fit"}
    fit_config = {"schemaVersion": SCHEMA_VERSION, **fit_config}
    jsonschema.validate(fit_config, _schema())
    _write_json(out / "fit_config.json", fit_config)
    return 0


def as_first(data):
    return getattr(data, "first", data)


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="abundfit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model described by a JSON config")
    p.add_argument("config")
    p.add_argument("--threads", type=int, default=None,
                   help="threads for running chains (default: one per chain)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="posterior predictions at new sites")
    p.add_argument("fit_dir")
    p.add_argument("new_sites", help="CSV with id,x,y[,offset], covariates and optional group")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="WAIC and posterior predictive check for a fit")
    p.add_argument("fit_dir")
    p.add_argument("--statistic", required=True, choices=["freemanTukey", "chiSquare"])
    p.add_argument("--grouping", required=True, choices=["site", "replicate"])
    p.add_argument("--compare", default=None, help="second fit directory for delta WAIC")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="simulate a dataset plus a matching fit config")
    p.add_argument("config")
    p.set_defaults(func=cmd_simulate)
    return parser


def _exit_code(exc):
    for kind, code in EXIT_CODES.items():
        if isinstance(exc, kind):
            return code
    return 4


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.error_dir = None
    try:
        return args.func(args)
    except AbundfitError as exc:
        code = _exit_code(exc)
        target = args.error_dir if args.error_dir is not None else Path.cwd()
        try:
            target.mkdir(parents=True, exist_ok=True)
        except OSError:
            target = Path.cwd()
        payload = {"exitCode": code, **exc.to_dict()} if hasattr(exc, "to_dict") else {
            "exitCode": code, "kind": "numerical", "message": str(exc)}
        _write_json(target / "error.json", payload)
        print(f"abundfit: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
