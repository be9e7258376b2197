"""Command line surface: simulate | fit | path | select | predict | variogram | transform | report.

Every command reads one JSON config document (schema_version 1) whose keys can
be overridden by --set key=value flags.  All randomness flows from config
seeds, so reruns with identical inputs give byte-identical output CSVs.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .matern import MaternParams
from .objectives import ObjectiveKind
from .optimizer import FitConfig, FitResult, fit
from .predict import (
    PredictionRequest,
    cokrige,
    evaluate_predictions,
    prediction_grid,
    save_predictions,
)
from .selection import (
    ClicConfig,
    PathResult,
    free_parameter_map,
    lambda_grid,
    lambda_max,
    select_lambda,
    solution_path,
)
from .simulate import experiment_config, sample_locations_uniform, simulate_field
from .spatial_data import (
    SpatialDataset,
    empirical_cross_variogram,
    load_dataset,
    normal_score_transform,
    save_dataset,
)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


def _load_config(args):
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
        ver = cfg.get("schema_version", SCHEMA_VERSION)
        if ver != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {ver}")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        try:
            cfg[key] = json.loads(val)
        except json.JSONDecodeError:
            cfg[key] = val
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"missing config keys: {missing}")


def _read_dataset(cfg):
    _require(cfg, "dataset", "coord_cols", "value_cols")
    return load_dataset(cfg["dataset"], cfg["coord_cols"], cfg["value_cols"])


def _load_params(cfg, key="params"):
    val = cfg.get(key)
    if val is None:
        raise ConfigError(f"missing config key: {key}")
    if isinstance(val, str):
        return MaternParams.load(val)
    return MaternParams.from_dict(val)


def _objective_kind(cfg):
    kind = cfg.get("kind", "full")
    v = cfg.get("v")
    return ObjectiveKind(kind=kind, v=v)


def _fit_config(cfg):
    return FitConfig(
        kind=_objective_kind(cfg),
        lam=float(cfg.get("lam", 0.0)),
        max_outer_iter=int(cfg.get("max_outer_iter", 200)),
        tol_rel=float(cfg.get("tol_rel", 1e-6)),
        nu=float(cfg.get("nu", 0.5)),
        estimate_nugget=bool(cfg.get("estimate_nugget", True)),
        seed=int(cfg.get("seed", 0)),
    )


def _clic_config(cfg):
    return ClicConfig(
        m_sub=int(cfg.get("clic_subsamples", 120)),
        pairs_per_subsample=int(cfg.get("clic_pairs_per_subsample", 50)),
        h_budget=int(cfg.get("clic_h_budget", 500)),
        seed=int(cfg.get("seed", 0)),
        trace_sign=float(cfg.get("clic_trace_sign", 1.0)),
        j_method=str(cfg.get("clic_j_method", "subsample")),
        n_draws=int(cfg.get("clic_n_draws", 40)),
    )


def _path_doc(path: PathResult):
    return {
        "schema_version": SCHEMA_VERSION,
        "lams": path.lams.tolist(),
        "fits": [f.to_dict() if f else None for f in path.fits],
        "criteria": [None if not np.isfinite(c) else float(c)
                     for c in path.criteria],
        "sparsity_L": [None if not np.isfinite(s) else float(s)
                       for s in path.sparsity_L],
        "sparsity_Psi": [None if not np.isfinite(s) else float(s)
                         for s in path.sparsity_Psi],
        "selected": path.selected,
        "criterion_name": path.criterion_name,
    }


def _path_from_doc(doc):
    crit = np.asarray([np.nan if c is None else c for c in doc["criteria"]])
    return PathResult(
        lams=np.asarray(doc["lams"], dtype=float),
        fits=[FitResult.from_dict(f) if f else None for f in doc["fits"]],
        criteria=crit,
        sparsity_L=np.asarray([np.nan if s is None else s
                               for s in doc["sparsity_L"]]),
        sparsity_Psi=np.asarray([np.nan if s is None else s
                                 for s in doc["sparsity_Psi"]]),
        selected=doc.get("selected"),
        criterion_name=doc.get("criterion_name", ""),
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg):
    seed = int(cfg.get("seed", 0))
    preset = cfg.get("preset")
    if preset == "paper-4.1":
        params = experiment_config()
        n = int(cfg.get("n", 500))
    elif preset == "paper-4.2":
        params = experiment_config()
        n = int(cfg.get("n", 500))
    elif preset is None:
        params = _load_params(cfg)
        _require(cfg, "n")
        n = int(cfg["n"])
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    params.validate()
    domain = cfg.get("domain", [0.0, 1.0])
    locs = sample_locations_uniform(n, seed=seed, low=float(domain[0]),
                                   high=float(domain[1]))
    ds = simulate_field(params, locs, seed=seed + 1)
    out = cfg.get("out", "simulated.csv")
    save_dataset(ds, out)
    meta = {"schema_version": SCHEMA_VERSION, "seed": seed, "n": n,
            "preset": preset, "params": params.to_dict()}
    with open(cfg.get("params_out", out + ".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    print(f"wrote {out} (n={n}, p={params.p}, seed={seed})")
    return EXIT_OK


def cmd_fit(cfg):
    ds = _read_dataset(cfg)
    config = _fit_config(cfg)
    res = fit(ds, config=config)
    doc = {"schema_version": SCHEMA_VERSION, **res.to_dict(),
           "free_parameters": free_parameter_map(res.params)}
    out = cfg.get("out", "fit.json")
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=1)
    print(f"wrote {out} (lam={config.lam}, converged={res.converged}, "
          f"iters={res.n_iter})")
    return EXIT_OK


def cmd_path(cfg):
    ds = _read_dataset(cfg)
    config = _fit_config(cfg)
    grid = None
    if "lam_max" in cfg:
        grid = lambda_grid(float(cfg["lam_max"]),
                           count=int(cfg.get("grid_count", 0)) or None,
                           p=ds.p)
    elif "grid_count" in cfg:
        lmx = lambda_max(ds, config.kind)
        grid = lambda_grid(lmx, count=int(cfg["grid_count"]))
    path = solution_path(ds, grid=grid, config=config,
                         compute_criterion=bool(cfg.get("criterion", True)),
                         clic_config=_clic_config(cfg))
    out = cfg.get("out", "path.json")
    with open(out, "w") as fh:
        json.dump(_path_doc(path), fh, indent=1)
    csv_out = cfg.get("csv_out", os.path.splitext(out)[0] + ".csv")
    path.to_csv(csv_out)
    print(f"wrote {out} and {csv_out} ({path.lams.size} lambda values, "
          f"selected={path.selected})")
    return EXIT_OK


def cmd_select(cfg):
    _require(cfg, "path")
    with open(cfg["path"]) as fh:
        doc = json.load(fh)
    path = _path_from_doc(doc)
    idx = select_lambda(path)
    doc["selected"] = idx
    doc["selected_lambda"] = float(path.lams[idx])
    out = cfg.get("out", cfg["path"])
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=1)
    print(f"selected index {idx}, lambda={path.lams[idx]:.6g} "
          f"({path.criterion_name})")
    return EXIT_OK


def cmd_predict(cfg):
    ds = _read_dataset(cfg)
    params = _load_params(cfg)
    if params.p != ds.p:
        raise ConfigError(
            f"params describe p={params.p} variables but the dataset has "
            f"p={ds.p}")
    if "grid" in cfg:
        n1, n2 = (int(v) for v in cfg["grid"])
        domain = cfg.get("domain", [0.0, 1.0])
        bounds = ((float(domain[0]), float(domain[1])),) * 2
        locs = prediction_grid(n1, n2, bounds)
    elif "target_locations" in cfg:
        import csv as _csv
        with open(cfg["target_locations"], newline="") as fh:
            reader = _csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            ci = [header.index(c) for c in cfg["coord_cols"]]
            locs = np.asarray([[float(row[c]) for c in ci]
                               for row in reader if row])
    else:
        raise ConfigError("predict needs 'grid' or 'target_locations'")
    targets = cfg.get("targets", list(range(ds.p)))
    request = PredictionRequest(
        locations=locs, targets=targets, mode=cfg.get("mode", "simple"),
        neighborhood=cfg.get("neighborhood", 100),
        reduce_variables=bool(cfg.get("reduce_variables", True)))
    result = cokrige(ds, params, request)
    out = cfg.get("out", "predictions.csv")
    save_predictions(result, locs, out)
    print(f"wrote {out} ({locs.shape[0]} locations x {len(targets)} targets)")
    if "truth" in cfg:
        truth = load_dataset(cfg["truth"], cfg["coord_cols"],
                             cfg["value_cols"])
        summary = evaluate_predictions(result, truth)
        for t, row in summary.items():
            print(f"variable {t}: RMSE {row['rmse']:.4f}  "
                  f"mean sd {row['mean_sd']:.4f}")
    return EXIT_OK


def cmd_variogram(cfg):
    ds = _read_dataset(cfg)
    i = int(cfg.get("i", 0))
    j = int(cfg.get("j", i))
    bins = cfg.get("bins")
    if bins is None:
        from .spatial_data import pairwise_distances
        dmax = float(pairwise_distances(ds.locations).max())
        bins = np.linspace(0.0, 0.5 * dmax, 16).tolist()
    est = empirical_cross_variogram(ds, i, j, np.asarray(bins, dtype=float))
    out = cfg.get("out", "variogram.csv")
    import csv as _csv
    with open(out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["bin_center", "semivariance", "count"])
        for c, g, n in zip(est.bin_centers, est.semivariance, est.counts):
            writer.writerow([repr(float(c)),
                             "" if not np.isfinite(g) else repr(float(g)),
                             int(n)])
    print(f"wrote {out} (pair {i},{j})")
    return EXIT_OK


def cmd_transform(cfg):
    ds = _read_dataset(cfg)
    scored = np.empty_like(ds.values)
    tables = {}
    for c in range(ds.p):
        scored[:, c], table = normal_score_transform(ds.values[:, c])
        tables[ds.names[c]] = {"values": table.values.tolist(),
                               "scores": table.scores.tolist()}
    out = cfg.get("out", "transformed.csv")
    save_dataset(SpatialDataset(ds.locations, scored, ds.names), out)
    with open(cfg.get("table_out", out + ".tables.json"), "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "tables": tables}, fh)
    print(f"wrote {out} ({ds.p} variables normal-scored)")
    return EXIT_OK


def cmd_report(cfg):
    _require(cfg, "path")
    with open(cfg["path"]) as fh:
        doc = json.load(fh)
    path = _path_from_doc(doc)
    lines = ["# Solution path report", ""]
    valid = [k for k, f in enumerate(path.fits) if f is not None]
    if not valid:
        lines.append("No valid fits in this path.")
    else:
        lines.append(f"Criterion: {path.criterion_name or 'none'}")
        total_t = sum(path.fits[k].duration for k in valid)
        lines.append(f"Fits: {len(valid)}/{path.lams.size} valid, total "
                     f"time {total_t:.1f} s")
        if path.selected is not None:
            lam = path.lams[path.selected]
            lines.append(f"Selected: index {path.selected}, "
                         f"lambda = {lam:.6g}")
        lines += ["", "| lambda | criterion | %zeros(L) | %zeros(Psi) | "
                  "converged |", "|---|---|---|---|---|"]
        for k in range(path.lams.size):
            f = path.fits[k]
            crit = (f"{path.criteria[k]:.4f}"
                    if np.isfinite(path.criteria[k]) else "-")
            spl = (f"{100 * path.sparsity_L[k]:.1f}"
                   if np.isfinite(path.sparsity_L[k]) else "-")
            spp = (f"{100 * path.sparsity_Psi[k]:.1f}"
                   if np.isfinite(path.sparsity_Psi[k]) else "-")
            conv = "-" if f is None else str(f.converged)
            lines.append(f"| {path.lams[k]:.6g} | {crit} | {spl} | {spp} | "
                         f"{conv} |")
    out = cfg.get("out", "report.md")
    with open(out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "path": cmd_path,
    "select": cmd_select,
    "predict": cmd_predict,
    "variogram": cmd_variogram,
    "transform": cmd_transform,
    "report": cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="maternlasso",
        description="Sparse multivariate Matern fields: simulation, penalized "
                    "fitting, model selection and cokriging.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("-c", "--config", help="JSON config document")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (JSON-parsed value)")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        return _COMMANDS[args.command](cfg)
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        # LinAlgError subclasses ValueError, so it must be caught first
        print(f"numerical failure ({args.command}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError) as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
