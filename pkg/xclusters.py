#!/usr/bin/env python3
"""
xclusters — explainable clustering of weighted time-series demographics.
Picks (k, alpha) for D + λN by branch-and-bound, with grid search, 2-step,
λ sweep, evolutionary Pareto, lexicographic and combined-distance baselines.

Usage:
    python3 xclusters.py run --synthetic --method xclusters
    python3 xclusters.py run --config run.json --method grid --outdir out/
    python3 xclusters.py monotonicity --config run.json
    python3 xclusters.py gen-data --groups 3 --per-group 20 --out data.json
    python3 xclusters.py export-dot out/tree.json > tree.dot
"""

__version__ = "0.1.0"

import argparse
import copy
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from rich.table import Table

from clustering import (LINKAGES, PAM_INITS, a_distortion, within_cluster_variance,
                        write_clusters_csv)
from common import (ConfigError, XClustersError, atomic_write_text, console, error, info, log,
                    write_csv, write_json)
from demographics import (aggregate_demographics, dataset_from_dict, dataset_to_dict, gen_synthetic,
                          load_temporal_relation, smooth_dataset)
from distances import A_METRICS, ALPHA_ORIENTATIONS, E_METRICS, build_context, write_matrices_csv
from evaluator import (CLUSTERERS, TREE_MODES, ClusteringMeasure, Evaluator, make_clusterer,
                       write_cache_csv)
from evolve import (ORDERS, combined_sweep, evolve_pareto, lexicographic, write_front_csv,
                    write_front_members)
from explain_tree import (CartTrainer, ExplainTree, export_dot, multiclass_tree, per_cluster_trees,
                          tree_from_dict, tree_to_dict, weighted_average_f1)
from optimizer import (grid_search, lambda_sweep, monotonicity_report, two_step, write_sweep_csv,
                       write_trace_csv, xclusters_optimize)

# ─────────────────────────────────────────────
#  Constants & Defaults
# ─────────────────────────────────────────────
METHODS        = ("xclusters", "grid", "two-step", "lambda-sweep", "evolve", "lexicographic", "combined-sweep")
SOURCES        = ("synthetic", "file", "json")
DEFAULT_OUTDIR = "xclusters_out"
ENV_OUTDIR     = "XCLUSTERS_OUTDIR"

EXIT_OK      = 0
EXIT_FAILURE = 1
EXIT_CONFIG  = 2

# component ids for seed fan-out from the root seed
SEED_DATA      = 1
SEED_CLUSTERER = 2
SEED_EVOLVE    = 3


def derive_seed(root: int, component: int) -> int:
    return int(np.random.default_rng([int(root), component]).integers(0, 2**31 - 1))


def alpha_grid(step: float) -> list:
    count = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(count + 1)]


# ─────────────────────────────────────────────
#  Run configuration
# ─────────────────────────────────────────────
# section → ((file key, attribute), ...); "seed" and "workers" live at the top level
CONFIG_LAYOUT = {
    "data": (("source", "source"), ("path", "path"), ("schema", "schema"),
             ("combo_features", "combo_features"), ("min_weight_fraction", "min_weight_fraction"),
             ("window", "window"), ("normalize_series", "normalize_series"), ("synthetic", "synthetic")),
    "metrics": (("a_metric", "a_metric"), ("e_metric", "e_metric"), ("alpha_orientation", "alpha_orientation")),
    "clusterer": (("kind", "clusterer"), ("linkage", "linkage"), ("pam_init", "pam_init")),
    "search": (("method", "method"), ("k_min", "k_min"), ("k_max", "k_max"), ("lambda", "lam"),
               ("eps_b", "eps_b"), ("delta_alpha", "delta_alpha"), ("alpha_step", "alpha_step"),
               ("normalize", "normalize"), ("lambdas", "lambdas")),
    "tree": (("mode", "tree_mode"), ("max_depth", "max_depth")),
    "evolve": (("population", "population"), ("generations", "generations"), ("rate", "rate"),
               ("order", "order"), ("k1", "k1"), ("k2", "k2"), ("alphas", "alphas"), ("sweep_k", "sweep_k")),
    "output": (("outdir", "outdir"), ("dump_matrices", "dump_matrices"), ("dump_front", "dump_front")),
}


class RunConfig:
    def __init__(self):
        # ── data ───────────────────────────────
        self.source              = "synthetic"
        self.path                = None
        self.schema              = {"timestamp": "date", "value": "amount", "features": []}
        self.combo_features      = None     # None → every schema feature
        self.min_weight_fraction = 0.005    # 0.5% of the total weight
        self.window              = 7        # moving-average days
        self.normalize_series    = True
        self.synthetic           = {"n_groups": 3, "per_group": 20, "length": 30,
                                    "noise_sd": 0.05, "feature_alignment": 1.0}
        # ── metrics ────────────────────────────
        self.a_metric            = "dtw"
        self.e_metric            = "jaccard"
        self.alpha_orientation   = "explain"
        # ── clusterer ──────────────────────────
        self.clusterer           = "pam"
        self.linkage             = "average"
        self.pam_init            = "build"
        # ── search ─────────────────────────────
        self.method              = "xclusters"
        self.k_min               = 3
        self.k_max               = 11
        self.lam                 = 1.0
        self.eps_b               = 0.05
        self.delta_alpha         = 0.01
        self.alpha_step          = 0.05     # grid search / monotonicity resolution
        self.normalize           = True
        self.lambdas             = [0.25, 0.5, 1.0, 2.0, 4.0]
        # ── tree ───────────────────────────────
        self.tree_mode           = "multiclass"
        self.max_depth           = 6        # per-cluster trees
        # ── evolve & friends ───────────────────
        self.population          = 20
        self.generations         = 30
        self.rate                = 0.05
        self.order               = "ts-then-feature"
        self.k1                  = 3
        self.k2                  = 2
        self.alphas              = [0.25, 0.5, 0.75]
        self.sweep_k             = 3
        # ── output ─────────────────────────────
        self.outdir              = DEFAULT_OUTDIR
        self.dump_matrices       = False
        self.dump_front          = False
        self.seed                = 0
        self.workers             = os.cpu_count() or 1

    def apply_dict(self, d: dict):
        """Overlay a nested config dict; missing or null keys keep the current value."""
        if "config" in d and isinstance(d["config"], dict) and "tool" in d:
            d = d["config"]          # a run manifest

        def _get(section, key, default):
            val = (d.get(section) or {}).get(key)
            if val is None:
                return default
            if isinstance(default, dict) and isinstance(val, dict):
                return {**default, **val}
            return val

        for section, fields in CONFIG_LAYOUT.items():
            for key, attr in fields:
                setattr(self, attr, _get(section, key, getattr(self, attr)))
        if d.get("seed") is not None:
            self.seed = d["seed"]
        if d.get("workers") is not None:
            self.workers = d["workers"]
        return self

    def load_config(self, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError([f"cannot read config {path}: {e}"]) from e
        if not isinstance(d, dict):
            raise ConfigError([f"config {path} must hold a JSON object"])
        return self.apply_dict(d)

    def to_dict(self) -> dict:
        out = {section: {key: copy.deepcopy(getattr(self, attr)) for key, attr in fields}
               for section, fields in CONFIG_LAYOUT.items()}
        out["output"]["outdir"] = str(self.outdir)
        out["seed"] = self.seed
        out["workers"] = self.workers
        return out

    def validate(self) -> list:
        """Every problem with the configuration; empty when it is runnable."""
        problems = []

        def choice(name, value, options):
            if value not in options:
                problems.append(f"{name} must be one of {', '.join(options)}; got {value!r}")

        def number(name, value, lo=None, hi=None, integer=False, lo_open=False):
            kinds = (int,) if integer else (int, float)
            if isinstance(value, bool) or not isinstance(value, kinds):
                problems.append(f"{name} must be {'an integer' if integer else 'a number'}; got {value!r}")
                return False
            if lo is not None and (value <= lo if lo_open else value < lo):
                problems.append(f"{name} must be {'>' if lo_open else '>='} {lo}; got {value}")
                return False
            if hi is not None and value > hi:
                problems.append(f"{name} must be <= {hi}; got {value}")
                return False
            return True

        choice("data.source", self.source, SOURCES)
        if self.source in ("file", "json") and not self.path:
            problems.append(f"data.path is required for source {self.source!r}")
        if self.source == "file":
            schema = self.schema if isinstance(self.schema, dict) else {}
            if not schema.get("timestamp") or not schema.get("value") or not schema.get("features"):
                problems.append("data.schema needs timestamp, value and a non-empty features list")
        number("data.min_weight_fraction", self.min_weight_fraction, 0.0, 1.0)
        number("data.window", self.window, 1, integer=True)
        if self.source == "synthetic":
            syn = self.synthetic if isinstance(self.synthetic, dict) else {}
            number("data.synthetic.n_groups", syn.get("n_groups"), 2, integer=True)
            number("data.synthetic.per_group", syn.get("per_group"), 2, integer=True)
            number("data.synthetic.length", syn.get("length"), 4, integer=True)
            number("data.synthetic.noise_sd", syn.get("noise_sd"), 0.0)
            number("data.synthetic.feature_alignment", syn.get("feature_alignment"), 0.0, 1.0)

        choice("metrics.a_metric", self.a_metric, A_METRICS)
        choice("metrics.e_metric", self.e_metric, E_METRICS)
        choice("metrics.alpha_orientation", self.alpha_orientation, ALPHA_ORIENTATIONS)
        choice("clusterer.kind", self.clusterer, CLUSTERERS)
        choice("clusterer.linkage", self.linkage, LINKAGES)
        choice("clusterer.pam_init", self.pam_init, PAM_INITS)

        choice("search.method", self.method, METHODS)
        ok_min = number("search.k_min", self.k_min, 1, integer=True)
        ok_max = number("search.k_max", self.k_max, 1, integer=True)
        if ok_min and ok_max:
            if self.k_min > self.k_max:
                problems.append(f"search.k_min ({self.k_min}) exceeds search.k_max ({self.k_max})")
            elif self.method == "two-step" and self.k_max - self.k_min < 2:
                problems.append("two-step needs a k range of at least 3 values")
        number("search.lambda", self.lam, 0.0)
        number("search.eps_b", self.eps_b, 0.0)
        number("search.delta_alpha", self.delta_alpha, 0.0, 1.0, lo_open=True)
        if number("search.alpha_step", self.alpha_step, 0.0, 1.0, lo_open=True):
            if abs(1.0 / self.alpha_step - round(1.0 / self.alpha_step)) > 1e-9:
                problems.append(f"search.alpha_step must divide 1 evenly; got {self.alpha_step}")
        if not isinstance(self.lambdas, list) or not self.lambdas:
            problems.append("search.lambdas must be a non-empty list")
        else:
            for lam in self.lambdas:
                number("search.lambdas[]", lam, 0.0)

        choice("tree.mode", self.tree_mode, TREE_MODES)
        number("tree.max_depth", self.max_depth, 1, integer=True)

        number("evolve.population", self.population, 2, integer=True)
        number("evolve.generations", self.generations, 0, integer=True)
        number("evolve.rate", self.rate, 0.0, 1.0)
        choice("evolve.order", self.order, ORDERS)
        number("evolve.k1", self.k1, 1, integer=True)
        number("evolve.k2", self.k2, 1, integer=True)
        number("evolve.sweep_k", self.sweep_k, 1, integer=True)
        if not isinstance(self.alphas, list) or not self.alphas:
            problems.append("evolve.alphas must be a non-empty list")
        else:
            for a in self.alphas:
                number("evolve.alphas[]", a, 0.0, 1.0)

        number("seed", self.seed, 0, integer=True)
        number("workers", self.workers, 1, integer=True)
        if not self.outdir:
            problems.append("output.outdir must not be empty")
        return problems


# ─────────────────────────────────────────────
#  Dataset
# ─────────────────────────────────────────────
def load_dataset(cfg: RunConfig):
    """Returns (dataset, ground-truth labels or None)."""
    if cfg.source == "synthetic":
        syn = cfg.synthetic
        return gen_synthetic(int(syn["n_groups"]), int(syn["per_group"]), int(syn["length"]),
                             float(syn["noise_sd"]), float(syn["feature_alignment"]),
                             derive_seed(cfg.seed, SEED_DATA))
    if cfg.source == "json":
        try:
            data = json.loads(Path(cfg.path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise XClustersError(f"cannot read dataset {cfg.path}: {e}") from e
        return dataset_from_dict(data), None

    relation = load_temporal_relation(cfg.path, cfg.schema)
    combo = cfg.combo_features or cfg.schema["features"]
    dataset = aggregate_demographics(relation, combo, cfg.min_weight_fraction)
    return smooth_dataset(dataset, cfg.window, cfg.normalize_series), None


def make_evaluator(cfg: RunConfig, dataset, ctx) -> Evaluator:
    clusterer = make_clusterer(cfg.clusterer, cfg.linkage, derive_seed(cfg.seed, SEED_CLUSTERER), cfg.pam_init)
    measure = ClusteringMeasure(dataset, ctx, clusterer, CartTrainer(), cfg.tree_mode, cfg.max_depth)
    return Evaluator(measure, cfg.lam, cfg.k_min, cfg.k_max, cfg.normalize, cfg.workers)


# ─────────────────────────────────────────────
#  Methods
# ─────────────────────────────────────────────
@dataclass
class RunResult:
    clustering: object
    summary: dict
    tree: object = None
    evaluator: Evaluator = None
    report: object = None
    sweep: list = None
    front: object = None
    alternatives: list = field(default_factory=list)


def _from_report(report, evaluator, summary=None) -> RunResult:
    best = report.best
    return RunResult(best.clustering, summary or report.to_dict(), best.tree, evaluator, report)


def run_xclusters(cfg, dataset, ctx) -> RunResult:
    ev = make_evaluator(cfg, dataset, ctx)
    return _from_report(xclusters_optimize(ev, eps_b=cfg.eps_b, delta_alpha=cfg.delta_alpha), ev)


def run_grid(cfg, dataset, ctx) -> RunResult:
    ev = make_evaluator(cfg, dataset, ctx)
    return _from_report(grid_search(ev, alpha_grid=alpha_grid(cfg.alpha_step)), ev)


def run_two_step(cfg, dataset, ctx) -> RunResult:
    ev = make_evaluator(cfg, dataset, ctx)
    return _from_report(two_step(ev), ev)


def run_lambda_sweep(cfg, dataset, ctx) -> RunResult:
    ev = make_evaluator(cfg, dataset, ctx)
    reports = lambda_sweep(ev, [float(x) for x in cfg.lambdas], cfg.eps_b, cfg.delta_alpha)
    chosen = next((r for r in reports if r.extra["lambda"] == float(cfg.lam)), reports[0])
    summary = chosen.to_dict()
    summary["sweep"] = [{"lambda": r.extra["lambda"], **r.best.to_dict(), "evaluations": r.evaluations}
                        for r in reports]
    result = _from_report(chosen, ev, summary)
    result.sweep = reports
    return result


def run_evolve(cfg, dataset, ctx) -> RunResult:
    front = evolve_pareto(dataset, ctx, cfg.generations, cfg.population, cfg.rate,
                          derive_seed(cfg.seed, SEED_EVOLVE), (cfg.k_min, cfg.k_max), cfg.linkage,
                          cfg.max_depth, workers=cfg.workers)
    pick = front.closest_to_utopia()
    summary = {"method": "evolve", "front_size": len(front), "partitions_evaluated": len(front.evaluated),
               "chosen": {"k": pick.clustering.k, "variance": pick.variance, "weighted_f1": pick.f1,
                          "genome": pick.genome.digest()}}
    return RunResult(pick.clustering, summary, front=front)


def run_lexicographic(cfg, dataset, ctx) -> RunResult:
    clustering = lexicographic(dataset, ctx, cfg.order, cfg.k1, cfg.k2, cfg.linkage)
    return RunResult(clustering, {"method": "lexicographic", "order": cfg.order,
                                  "k1": cfg.k1, "k2": cfg.k2, "k": clustering.k})


def run_combined_sweep(cfg, dataset, ctx) -> RunResult:
    clusterings = combined_sweep(dataset, ctx, [float(a) for a in cfg.alphas], cfg.sweep_k, cfg.linkage)
    scores = []
    for c in clusterings:
        trees = per_cluster_trees(dataset, c, cfg.max_depth, verbose=False)
        scores.append(weighted_average_f1(trees, c, dataset.weights))
    pick = int(np.argmax(scores))
    summary = {"method": "combined-sweep", "k": cfg.sweep_k,
               "results": [{"alpha": c.alpha, "weighted_f1": s} for c, s in zip(clusterings, scores)],
               "chosen_alpha": clusterings[pick].alpha}
    return RunResult(clusterings[pick], summary, alternatives=clusterings)


METHOD_RUNNERS = {
    "xclusters": run_xclusters,
    "grid": run_grid,
    "two-step": run_two_step,
    "lambda-sweep": run_lambda_sweep,
    "evolve": run_evolve,
    "lexicographic": run_lexicographic,
    "combined-sweep": run_combined_sweep,
}


# ─────────────────────────────────────────────
#  Artifacts
# ─────────────────────────────────────────────
def explanation_metrics(dataset, ctx, clustering, tree: ExplainTree, max_depth: int) -> dict:
    trees = per_cluster_trees(dataset, clustering, max_depth)
    return {
        "k": clustering.k,
        "a_distortion": a_distortion(clustering.assignment, ctx.a_matrix),
        "within_cluster_variance": within_cluster_variance(clustering, dataset.series_matrix),
        "multiclass": {"node_count": tree.node_count, "depth": tree.depth, **tree.metrics.to_dict()},
        "per_cluster": [{"cluster": t.target, "node_count": t.node_count, "depth": t.depth,
                         **t.metrics.to_dict()} for t in trees],
        "weighted_average_f1": weighted_average_f1(trees, clustering, dataset.weights),
    }


def write_tree_files(outdir: Path, tree: ExplainTree, feature_names) -> list:
    data = tree_to_dict(tree)
    data["feature_names"] = list(feature_names)
    return [atomic_write_text(outdir / "tree.dot", export_dot(tree, feature_names)),
            write_json(outdir / "tree.json", data)]


def write_artifacts(cfg: RunConfig, dataset, ctx, result: RunResult, extra_manifest: dict) -> list:
    outdir = Path(cfg.outdir)
    tree = result.tree if isinstance(result.tree, ExplainTree) else multiclass_tree(dataset, result.clustering)
    files = [write_clusters_csv(outdir / "clusters.csv", dataset, result.clustering)]
    files += write_tree_files(outdir, tree, dataset.feature_names)
    files.append(write_json(outdir / "metrics.json",
                            explanation_metrics(dataset, ctx, result.clustering, tree, cfg.max_depth)))
    if result.evaluator is not None:
        files.append(write_cache_csv(outdir / "cache.csv", result.evaluator))
    if result.report is not None and result.report.method == "xclusters":
        files.append(write_trace_csv(outdir / "trace.csv", result.report))
    if result.sweep:
        files.append(write_sweep_csv(outdir / "sweep.csv", result.sweep))
    if result.front is not None:
        files.append(write_front_csv(outdir / "front.csv", result.front))
        if cfg.dump_front:
            files += write_front_members(outdir / "front", result.front)
    for c in result.alternatives:
        files.append(write_clusters_csv(outdir / f"clusters_alpha_{c.alpha:g}.csv", dataset, c))
    if cfg.dump_matrices:
        files += write_matrices_csv(ctx, outdir / "distances")

    manifest = {
        "tool": "xclusters",
        "version": __version__,
        "config": cfg.to_dict(),
        "dataset": {"n": dataset.n, "features": len(dataset.feature_names),
                    "total_weight": dataset.total_weight, "dropped_weight": dataset.dropped_weight,
                    "meta": dataset.meta},
        "result": result.summary,
        **extra_manifest,
        "files": sorted(str(Path(p).relative_to(outdir)) for p in files),
    }
    files.append(write_json(outdir / "manifest.json", manifest))
    return files


def print_summary(title: str, rows):
    table = Table(title=title, show_header=False, box=None, padding=(0, 2))
    table.add_column("key", style="bold cyan")
    table.add_column("value")
    for key, value in rows:
        table.add_row(key, value)
    console.print(table)


# ─────────────────────────────────────────────
#  Commands
# ─────────────────────────────────────────────
def prepare(cfg: RunConfig):
    """Validate, load and measure distances; nothing is written here."""
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    dataset, truth = load_dataset(cfg)
    if cfg.k_max > dataset.n:
        raise ConfigError([f"search.k_max ({cfg.k_max}) exceeds the number of demographics ({dataset.n})"])
    ctx = build_context(dataset, cfg.a_metric, cfg.e_metric, cfg.alpha_orientation)
    return dataset, truth, ctx


def run(cfg: RunConfig) -> RunResult:
    t0 = time.monotonic()
    dataset, truth, ctx = prepare(cfg)
    log("RUN", f"method={cfg.method} n={dataset.n} k=[{cfg.k_min},{cfg.k_max}] λ={cfg.lam} seed={cfg.seed}")
    result = METHOD_RUNNERS[cfg.method](cfg, dataset, ctx)

    extra = {}
    if truth is not None:
        extra["ground_truth"] = [int(x) for x in truth]
    write_artifacts(cfg, dataset, ctx, result, extra)

    c = result.clustering
    rows = [("method", cfg.method), ("demographics", str(dataset.n)), ("k", str(c.k)),
            ("alpha", f"{c.alpha:.6g}")]
    if result.report is not None:
        best = result.report.best
        rows += [("D", f"{best.D:.6g}"), ("N", f"{best.N:.6g}"), ("objective", f"{best.objective:.6g}"),
                 ("evaluations", str(result.report.evaluations))]
    if result.front is not None:
        rows.append(("front size", str(len(result.front))))
    rows += [("wall time", f"{time.monotonic() - t0:.2f}s"), ("output", str(cfg.outdir))]
    print_summary("xclusters run", rows)
    return result


def run_monotonicity(cfg: RunConfig):
    dataset, _, ctx = prepare(cfg)
    ev = make_evaluator(cfg, dataset, ctx)
    report = monotonicity_report(ev, alpha_grid=alpha_grid(cfg.alpha_step))
    outdir = Path(cfg.outdir)
    files = report.write(outdir)
    files.append(write_cache_csv(outdir / "cache.csv", ev))
    write_json(outdir / "manifest.json", {
        "tool": "xclusters", "version": __version__, "command": "monotonicity",
        "config": cfg.to_dict(), "violations": report.violations,
        "files": sorted(str(Path(p).relative_to(outdir)) for p in files),
    })
    print_summary("monotonicity", [(name, f"{v} violation(s)") for name, v in report.violations.items()])
    return report


def build_config(args) -> RunConfig:
    """Defaults < config file < XCLUSTERS_OUTDIR < command-line flags."""
    cfg = RunConfig()
    if args.config:
        cfg.load_config(args.config)
    if os.environ.get(ENV_OUTDIR):
        cfg.outdir = os.environ[ENV_OUTDIR]

    overrides = {
        "method": "method", "k_min": "k_min", "k_max": "k_max", "lam": "lam", "eps_b": "eps_b",
        "delta_alpha": "delta_alpha", "seed": "seed", "workers": "workers", "outdir": "outdir",
        "clusterer": "clusterer", "linkage": "linkage", "a_metric": "a_metric", "e_metric": "e_metric",
        "tree_mode": "tree_mode", "generations": "generations", "population": "population",
    }
    for dest, attr in overrides.items():
        val = getattr(args, dest, None)
        if val is not None:
            setattr(cfg, attr, val)
    if args.synthetic:
        cfg.source = "synthetic"
    if args.data:
        cfg.path = args.data
        cfg.source = "json" if args.data.lower().endswith(".json") else "file"
    return cfg


def cmd_run(args) -> int:
    run(build_config(args))
    return EXIT_OK


def cmd_monotonicity(args) -> int:
    run_monotonicity(build_config(args))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    dataset, truth = gen_synthetic(args.groups, args.per_group, args.length, args.noise,
                                   args.alignment, derive_seed(args.seed, SEED_DATA))
    out = Path(args.out)
    write_json(out, dataset_to_dict(dataset))
    truth_path = out.with_name(out.stem + "_truth.csv")
    write_csv(truth_path, ("id", "group"), [(i, int(g)) for i, g in enumerate(truth)])
    info(f"wrote {dataset.n} demographics to {out} and ground truth to {truth_path}")
    return EXIT_OK


def cmd_export_dot(args) -> int:
    try:
        data = json.loads(Path(args.tree).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise XClustersError(f"cannot read tree {args.tree}: {e}") from e
    dot = export_dot(tree_from_dict(data), data.get("feature_names"))
    if args.out:
        atomic_write_text(args.out, dot)
    else:
        sys.stdout.write(dot)
    return EXIT_OK


def _add_run_flags(p):
    p.add_argument("--config", default=None, help="JSON config file or a previous run's manifest.json")
    p.add_argument("--data", default=None, help="CSV temporal relation, or a dataset .json from gen-data")
    p.add_argument("--synthetic", action="store_true", help="Generate the dataset from data.synthetic")
    p.add_argument("--outdir", default=None, help=f"Output directory (default: ./{DEFAULT_OUTDIR}, env {ENV_OUTDIR})")
    p.add_argument("--k-min", dest="k_min", type=int, default=None)
    p.add_argument("--k-max", dest="k_max", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="Weight on N (default 1)")
    p.add_argument("--eps-b", dest="eps_b", type=float, default=None, help="Pruning tolerance (default 0.05)")
    p.add_argument("--delta-alpha", dest="delta_alpha", type=float, default=None)
    p.add_argument("--clusterer", choices=CLUSTERERS, default=None)
    p.add_argument("--linkage", choices=LINKAGES, default=None)
    p.add_argument("--a-metric", dest="a_metric", choices=A_METRICS, default=None)
    p.add_argument("--e-metric", dest="e_metric", choices=E_METRICS, default=None)
    p.add_argument("--tree-mode", dest="tree_mode", choices=TREE_MODES, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None, help="Concurrent evaluations (default: CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="xclusters — explainable clustering of time-series demographics",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python3 xclusters.py run --synthetic
  python3 xclusters.py run --config run.json --method grid
  python3 xclusters.py run --data sales.csv --config schema.json --lambda 0.5
  python3 xclusters.py monotonicity --synthetic --outdir mono/
  python3 xclusters.py gen-data --groups 4 --per-group 15 --out data.json
  python3 xclusters.py export-dot xclusters_out/tree.json --out tree.dot
        """
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="Run one method end to end and write artifacts")
    _add_run_flags(p)
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--population", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("monotonicity", help="Average D and N over the grid per k and per alpha")
    _add_run_flags(p)
    p.set_defaults(func=cmd_monotonicity)

    p = sub.add_parser("gen-data", help="Write a synthetic dataset with ground-truth groups")
    p.add_argument("--groups", type=int, default=3)
    p.add_argument("--per-group", dest="per_group", type=int, default=20)
    p.add_argument("--length", type=int, default=30)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--alignment", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-dot", help="Convert a tree.json into Graphviz DOT")
    p.add_argument("tree")
    p.add_argument("--out", default=None, help="Write to a file instead of stdout")
    p.set_defaults(func=cmd_export_dot)
    return parser


# ─────────────────────────────────────────────
#  Entry Point
# ─────────────────────────────────────────────
def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        for problem in e.problems:
            error(f"config: {problem}")
        return EXIT_CONFIG
    except XClustersError as e:
        error(str(e))
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
