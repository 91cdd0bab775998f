"""Command-line surface: fit | grid | simulate | curves | frailties | study.

A run is described by a YAML config (dataset path, schema block, model
block, seed, output directory) plus a few flag overrides. All outputs are
comma-separated tables with a header row, except the structured fit
document (JSON). Numeric table cells use 17 significant digits so reruns
are byte-comparable.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import baselines, em, selection, simulate
from .covariates import GaussianParams, MultinomialParams
from .data import DataError, Dataset, VariableSpec, load_dataset, save_dataset
from .survival import SurvivalParams

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3


def _fmt(x) -> str:
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# config handling

def parse_schema(block) -> tuple:
    specs = []
    for entry in block:
        specs.append(
            VariableSpec(
                name=entry["name"],
                kind=entry["kind"],
                categories=tuple(str(c) for c in entry.get("categories", ())),
                in_marginal=bool(entry.get("marginal", False)),
                in_regression=bool(entry.get("regression", False)),
            )
        )
    return tuple(specs)


def load_config(path) -> dict:
    with open(path) as handle:
        config = yaml.safe_load(handle)
    if not isinstance(config, dict):
        raise DataError(f"{path}: config must be a mapping")
    return config


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _model_options(config, args):
    model = dict(config.get("model", {}))
    if args.n_clusters is not None:
        model["G"] = args.n_clusters
    if args.family is not None:
        model["family"] = args.family
    if args.algorithm is not None:
        model["algorithm"] = args.algorithm
    if args.restarts is not None:
        model["restarts"] = args.restarts
    model.setdefault("algorithm", "cem")
    model.setdefault("restarts", 1)
    model.setdefault("epsilon", em.EPSILON)
    return model


def _seed(config, args) -> int:
    seed = args.seed if args.seed is not None else config.get("seed")
    if seed is None:
        raise DataError("a seed is mandatory (config key 'seed' or --seed)")
    return int(seed)


def _out_dir(config, args) -> Path:
    out = args.out if args.out is not None else config.get("out")
    if out is None:
        raise DataError("an output directory is mandatory (config key 'out' or --out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(config) -> Dataset:
    if "dataset" not in config or "schema" not in config:
        raise DataError("config must provide 'dataset' and 'schema'")
    return load_dataset(config["dataset"], parse_schema(config["schema"]))


# ---------------------------------------------------------------------------
# fit document (JSON) serialization

def params_to_doc(fit: em.ModelFit) -> dict:
    clusters = []
    for g, c in enumerate(fit.params.clusters):
        entry = {
            "weight": c.weight,
            "beta": list(map(float, c.survival.beta)),
            "baseline": {
                "family": c.survival.baseline.name,
                "params": list(map(float, c.survival.baseline.natural_params())),
            },
            "theta": c.survival.theta,
        }
        if c.gaussian is not None:
            entry["gaussian"] = {
                "mean": list(map(float, c.gaussian.mean)),
                "cov": [list(map(float, row)) for row in c.gaussian.cov],
            }
        if c.multinomials is not None:
            entry["multinomials"] = [list(map(float, p)) for p in c.multinomials.probs]
        cov_g = fit.covariances[g] if g < len(fit.covariances) else None
        if cov_g is not None and np.all(np.isfinite(cov_g)):
            entry["survival_covariance"] = [list(map(float, row)) for row in cov_g]
        clusters.append(entry)
    return {
        "algorithm": fit.algorithm,
        "family": fit.family,
        "seed": fit.seed,
        "n_clusters": fit.params.n_clusters,
        "final_loglik": fit.final_loglik,
        "bic": fit.bic,
        "n_params": fit.n_params,
        "converged": fit.converged,
        "flags": list(fit.flags),
        "group_labels": list(fit.group_labels),
        "clusters": clusters,
    }


def doc_to_params(doc: dict):
    """Rebuild (ModelParams, covariances) from a fit document."""
    clusters, covariances = [], []
    for entry in doc["clusters"]:
        gaussian = None
        if "gaussian" in entry:
            gaussian = GaussianParams(
                np.asarray(entry["gaussian"]["mean"]),
                np.asarray(entry["gaussian"]["cov"]),
            )
        multinomials = None
        if "multinomials" in entry:
            multinomials = MultinomialParams(
                tuple(np.asarray(p) for p in entry["multinomials"])
            )
        base = baselines.family_from_name(
            entry["baseline"]["family"], np.asarray(entry["baseline"]["params"])
        )
        survival = SurvivalParams(np.asarray(entry["beta"]), base, entry["theta"])
        clusters.append(em.ClusterParams(entry["weight"], gaussian, multinomials, survival))
        cov_g = entry.get("survival_covariance")
        covariances.append(np.asarray(cov_g) if cov_g is not None else None)
    return em.ModelParams(tuple(clusters)), tuple(covariances)


def write_fit_artifacts(fit: em.ModelFit, dataset: Dataset, out: Path) -> None:
    with open(out / "params.json", "w") as handle:
        json.dump(params_to_doc(fit), handle, indent=2)
        handle.write("\n")
    with open(out / "partition.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row", "group", "cluster"])
        for i, g in enumerate(fit.assignment):
            writer.writerow([i + 1, dataset.observations[i].group, int(g) + 1])
    with open(out / "loglik_trace.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "loglik"])
        for k, value in enumerate(fit.loglik_trace):
            writer.writerow([k, _fmt(value)])
    with open(out / "flags.txt", "w") as handle:
        for flag in fit.flags:
            handle.write(flag + "\n")


def read_fit_artifacts(fit_dir):
    with open(Path(fit_dir) / "params.json") as handle:
        doc = json.load(handle)
    params, covariances = doc_to_params(doc)
    with open(Path(fit_dir) / "partition.csv", newline="") as handle:
        assignment = np.array(
            [int(row["cluster"]) - 1 for row in csv.DictReader(handle)], dtype=np.intp
        )
    return doc, params, covariances, assignment


# ---------------------------------------------------------------------------
# subcommands

def cmd_fit(config, args) -> int:
    dataset = _load_data(config)
    model = _model_options(config, args)
    G = _as_list(model.get("G", 1))
    family = _as_list(model.get("family", "weibull"))
    if len(G) != 1 or len(family) != 1:
        raise DataError("fit expects a single G and family; use the grid command")
    seed = _seed(config, args)
    out = _out_dir(config, args)
    runner = em.run_sem if model["algorithm"].lower() == "sem" else em.run_cem
    options = {}
    if model["algorithm"].lower() == "sem":
        options["burn_in"] = int(model.get("burn_in", em.SEM_BURN_IN))
        options["iterations"] = int(model.get("iterations", em.SEM_ITERATIONS))
    else:
        options["epsilon"] = float(model.get("epsilon", em.EPSILON))
        options["max_iter"] = int(model.get("max_iter", em.MAX_ITER_CEM))
    fit = runner(dataset, int(G[0]), str(family[0]), seed, **options)
    write_fit_artifacts(fit, dataset, out)
    degenerate = any("degenerate" in f for f in fit.flags)
    return EXIT_DEGENERATE if degenerate or not fit.converged else EXIT_OK


def cmd_grid(config, args) -> int:
    dataset = _load_data(config)
    model = _model_options(config, args)
    seed = _seed(config, args)
    out = _out_dir(config, args)
    grid = selection.grid_search(
        dataset,
        [int(g) for g in _as_list(model.get("G", [1]))],
        [str(f) for f in _as_list(model.get("family", ["weibull"]))],
        restarts=int(model["restarts"]),
        seed=seed,
        algorithm=model["algorithm"],
        n_jobs=args.threads,
        epsilon=float(model.get("epsilon", em.EPSILON)),
    )
    with open(out / "bic_table.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["G", "family", "restarts", "loglik", "bic", "status", "best"])
        for cell in grid.cells:
            status = "FAILED" if cell.failed else "ok"
            best = "yes" if grid.best is cell else ""
            writer.writerow([
                cell.n_clusters, cell.family, cell.n_restarts,
                "" if cell.failed else _fmt(cell.loglik),
                "" if cell.failed else _fmt(cell.bic),
                status, best,
            ])
    if grid.best is None:
        return EXIT_DEGENERATE
    best_dir = out / "best"
    best_dir.mkdir(exist_ok=True)
    write_fit_artifacts(grid.best.fit, dataset, best_dir)
    return EXIT_OK


def _dgp_from_config(config) -> simulate.DGPConfig:
    block = config.get("dgp", {}) or {}
    censoring = block.get("censoring_time")
    return simulate.default_dgp(censoring_time=censoring)


def cmd_simulate(config, args) -> int:
    seed = _seed(config, args)
    out = _out_dir(config, args)
    dgp = _dgp_from_config(config)
    dataset, truth, frailties = simulate.simulate_dataset(dgp, seed)
    save_dataset(dataset, out / "dataset.csv")
    with open(out / "truth_partition.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row", "group", "cluster"])
        for i, g in enumerate(truth):
            writer.writerow([i + 1, dataset.observations[i].group, int(g) + 1])
    with open(out / "truth_frailties.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["group", "cluster", "frailty"])
        for j in range(frailties.shape[0]):
            for g in range(frailties.shape[1]):
                writer.writerow([dataset.group_labels[j], g + 1, _fmt(frailties[j, g])])
    return EXIT_OK


def _profile_vector(profile_spec, schema, x_names) -> np.ndarray:
    """Translate {covariate: value} into a row over the X columns."""
    profile_spec = dict(profile_spec or {})
    x = np.zeros(len(x_names))
    by_name = {v.name: v for v in schema}
    for name, value in profile_spec.items():
        spec = by_name.get(name)
        if spec is None or not spec.in_regression:
            raise DataError(f"unknown regression covariate {name!r} in profile")
        if spec.kind == "continuous":
            x[x_names.index(name)] = float(value)
        else:
            if str(value) not in spec.categories:
                raise DataError(f"undeclared category {value!r} for {name!r}")
            for level in spec.categories[1:]:
                column = f"{name}={level}"
                x[x_names.index(column)] = 1.0 if str(value) == level else 0.0
    return x


def _t_grid(block) -> np.ndarray:
    if "t_grid" in block:
        return np.asarray(block["t_grid"], dtype=float)
    t_min = float(block.get("t_min", 1.0))
    t_max = float(block.get("t_max", 100.0))
    n = int(block.get("n_points", 100))
    return np.linspace(t_min, t_max, n)


def cmd_curves(config, args) -> int:
    if args.fit_dir is None:
        raise DataError("curves requires --fit-dir with fit artifacts")
    _, params, covariances, _ = read_fit_artifacts(args.fit_dir)
    schema = parse_schema(config["schema"])
    x_names = []
    for spec in schema:
        if not spec.in_regression:
            continue
        if spec.kind == "continuous":
            x_names.append(spec.name)
        else:
            x_names.extend(f"{spec.name}={lvl}" for lvl in spec.categories[1:])
    block = config.get("curves", {}) or {}
    profile = _profile_vector(block.get("profile"), schema, x_names)
    t_grid = _t_grid(block)
    out = _out_dir(config, args)
    with open(out / "survival_curves.csv", "w", newline="") as sh, \
            open(out / "hazard_curves.csv", "w", newline="") as hh:
        s_writer = csv.writer(sh)
        h_writer = csv.writer(hh)
        s_writer.writerow(["cluster", "t", "S", "lo", "hi"])
        h_writer.writerow(["cluster", "t", "hazard"])
        for g, cluster in enumerate(params.clusters):
            curve = selection.survival_curve(
                cluster.survival, covariances[g], profile, t_grid
            )
            hcurve = selection.hazard_curve(cluster.survival, profile, t_grid)
            for k, t in enumerate(t_grid):
                lo = _fmt(curve.ci_low[k]) if curve.has_bands else ""
                hi = _fmt(curve.ci_high[k]) if curve.has_bands else ""
                s_writer.writerow([g + 1, _fmt(t), _fmt(curve.value[k]), lo, hi])
                h_writer.writerow([g + 1, _fmt(t), _fmt(hcurve.value[k])])
    return EXIT_OK


def cmd_frailties(config, args) -> int:
    if args.fit_dir is None:
        raise DataError("frailties requires --fit-dir with fit artifacts")
    doc, params, covariances, assignment = read_fit_artifacts(args.fit_dir)
    dataset = _load_data(config)
    fit = em.ModelFit(
        params=params,
        assignment=assignment,
        posterior=np.zeros((dataset.n_obs, params.n_clusters)),
        loglik_trace=[],
        final_loglik=doc["final_loglik"],
        bic=doc["bic"],
        n_params=doc["n_params"],
        algorithm=doc["algorithm"],
        family=doc["family"],
        seed=doc["seed"],
        converged=doc["converged"],
        flags=list(doc["flags"]),
        group_labels=tuple(doc["group_labels"]),
        covariances=covariances,
    )
    rows = selection.frailty_estimates(fit, dataset)
    out = _out_dir(config, args)
    with open(out / "frailties.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["group", "cluster", "events", "cum_hazard", "mean", "lo", "hi", "significance"]
        )
        for row in rows:
            writer.writerow([
                row.group, row.cluster, row.events, _fmt(row.cum_hazard),
                _fmt(row.mean), _fmt(row.ci_low), _fmt(row.ci_high), row.significance,
            ])
    return EXIT_OK


def cmd_study(config, args) -> int:
    seed = _seed(config, args)
    out = _out_dir(config, args)
    model = _model_options(config, args)
    block = config.get("study", {}) or {}
    summary = simulate.replicate_study(
        _dgp_from_config(config),
        n_replicates=int(block.get("replicates", 10)),
        n_clusters_values=[int(g) for g in _as_list(model.get("G", [1, 2, 3, 4]))],
        families=[str(f) for f in _as_list(model.get("family", ["weibull"]))],
        restarts=int(model["restarts"]),
        seed=seed,
        n_jobs=args.threads,
        epsilon=float(model.get("epsilon", em.EPSILON)),
    )
    with open(out / "study_replicates.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["replicate", "seed", "selected_G", "selected_family", "ari",
             "misclassification", "failed"]
        )
        for row in summary.rows:
            writer.writerow([
                row.replicate, row.seed, row.selected_clusters, row.selected_family,
                "" if row.failed else _fmt(row.ari),
                "" if row.failed else _fmt(row.misclassification),
                "yes" if row.failed else "",
            ])
    with open(out / "study_summary.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        writer.writerow(["mean_ari", _fmt(summary.mean_ari)])
        writer.writerow(["sd_ari", _fmt(summary.sd_ari)])
        writer.writerow(["mean_misclassification", _fmt(summary.mean_misclassification)])
        writer.writerow(["sd_misclassification", _fmt(summary.sd_misclassification)])
        for G in sorted(summary.selection_counts):
            writer.writerow([f"selected_G={G}", summary.selection_counts[G]])
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frailtymix",
        description="Cluster-weighted shared-frailty survival mixtures",
    )
    parser.add_argument("command",
                        choices=["fit", "grid", "simulate", "curves", "frailties", "study"])
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--G", dest="n_clusters", type=int, default=None)
    parser.add_argument("--family", default=None)
    parser.add_argument("--algorithm", default=None, choices=["cem", "sem"])
    parser.add_argument("--restarts", type=int, default=None)
    parser.add_argument("--fit-dir", default=None,
                        help="directory with fit artifacts (curves/frailties)")
    return parser


COMMANDS = {
    "fit": cmd_fit,
    "grid": cmd_grid,
    "simulate": cmd_simulate,
    "curves": cmd_curves,
    "frailties": cmd_frailties,
    "study": cmd_study,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        return COMMANDS[args.command](config, args)
    except (DataError, FileNotFoundError, KeyError, yaml.YAMLError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
