"""
命令行入口
子命令：simulate / estimate / cv / reproduce
退出码：0 成功，1 数值或内部错误，2 输入或配置错误
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from pydantic import ValidationError

from keceni_analysis.analysis.bandwidth import cv_select, default_grid, pooled_deltas
from keceni_analysis.analysis.dissimilarity import get_metric
from keceni_analysis.analysis.estimator import KeceniEstimator, Kernel
from keceni_analysis.analysis.nuisance import fit_bundle, save_model
from keceni_analysis.analysis.variance import hac_variance, influence_vector
from keceni_analysis.core.config import RunConfig, read_config_file, resolve_run_config, settings
from keceni_analysis.core.errors import ConfigError, KeceniInputError, KeceniNumericalError
from keceni_analysis.core.models import SimConfig
from keceni_analysis.core.storage import StorageManager
from keceni_analysis.data.loader import load_dataset, load_scenario
from keceni_analysis.data.simulation import simulate_replication, write_simulation

logger = logging.getLogger(__name__)

ESTIMATE_COLUMNS = ["rep", "target", "scenario", "theta", "d_hat", "lambda", "sigma", "ci_lo", "ci_hi"]


def setup_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else getattr(logging, settings.LOG_LEVEL, logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _add_run_options(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--nodes", help="node CSV: id,y,t,x1..xp")
    p.add_argument("--edges", help="edge CSV: src,dst")
    p.add_argument("--metric", choices=["summary-l1", "wasserstein-treatment"])
    p.add_argument("--empty-policy", dest="empty_policy", choices=["midpoint", "exclude"])
    p.add_argument("--kernel", choices=["triangular", "box"])
    p.add_argument("--mc-draws", dest="mc_draws", type=int)
    p.add_argument("--integration", choices=["auto", "exact", "mc"])
    p.add_argument("--seed", type=int)
    p.add_argument("--outcome-model", dest="outcome_model",
                   choices=["linear", "logistic", "kernel", "kernel-wasserstein"])
    p.add_argument("--outcome-map", dest="outcome_map")
    p.add_argument("--propensity-model", dest="propensity_model", choices=["logistic", "kernel", "kernel-wasserstein"])
    p.add_argument("--propensity-map", dest="propensity_map")
    p.add_argument("--alpha-mu", dest="alpha_mu", type=float)
    p.add_argument("--alpha-pi", dest="alpha_pi", type=float)
    p.add_argument("--nuisance-bandwidth", dest="nuisance_bandwidth", help="median | loo | <float>")
    p.add_argument("--standardize", action="store_true", default=None)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keceni", description="Kernel-smoothed doubly robust node-wise estimation")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate synthetic datasets")
    sim.add_argument("--config", help="flat key = value file with SimConfig fields")
    sim.add_argument("--experiment", choices=["nodewise", "dr", "ate"], default=None)
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--rho", type=float)
    sim.add_argument("--beta", type=float)
    sim.add_argument("--out")

    est = sub.add_parser("estimate", help="estimate θ for a scenario")
    _add_run_options(est)
    est.add_argument("--scenario", help="scenario JSON")
    est.add_argument("--lambda", dest="bandwidth", help="bandwidth value or 'cv'")
    est.add_argument("--variance", choices=["none", "simple", "full"])
    est.add_argument("--hac-radius", dest="hac_radius", type=int)
    est.add_argument("--alpha", type=float, help="1 - confidence level")
    est.add_argument("--mc-draws-full", dest="mc_draws_full", type=int)
    est.add_argument("--save-models", action="store_true")
    est.add_argument("--cv-grid-size", dest="cv_grid_size", type=int)

    cv = sub.add_parser("cv", help="leave-neighborhood-out bandwidth selection")
    _add_run_options(cv)
    cv.add_argument("--grid", help="comma-separated λ values (default: geometric grid)")
    cv.add_argument("--cv-grid-size", dest="cv_grid_size", type=int)

    rep = sub.add_parser("reproduce", help="run a scaled experiment and check it against thresholds")
    rep.add_argument("experiment", choices=["A1", "A2", "A3", "A4", "A5", "A6"])
    rep.add_argument("--scale", choices=["smoke", "desk", "full"], default="desk")
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--threads", type=int)
    rep.add_argument("--out")
    return parser


RUN_KEYS = set(RunConfig.model_fields)


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k in RUN_KEYS}
    return resolve_run_config(getattr(args, "config", None), overrides)


def _fit(rc: RunConfig):
    if not rc.nodes or not rc.edges:
        raise ConfigError("--nodes and --edges are required")
    ds, report = load_dataset(rc.nodes, rc.edges, with_report=True)
    bundle, ds_fit = fit_bundle(
        ds,
        outcome_model=rc.outcome_model,
        outcome_map=rc.outcome_map,
        propensity_model=rc.propensity_model,
        propensity_map=rc.propensity_map,
        alpha_mu=rc.alpha_mu,
        alpha_pi=rc.alpha_pi,
        bandwidth=rc.nuisance_bandwidth,
        eps=rc.propensity_eps,
        standardize=rc.standardize,
    )
    estimator = KeceniEstimator(ds_fit, bundle, mc_draws=rc.mc_draws, seed=rc.seed,
                                integration=rc.integration, threads=rc.threads)
    return ds, report, bundle, estimator


def _cv_grid(args: argparse.Namespace, rc: RunConfig, estimator, metric) -> Optional[List[float]]:
    """--grid 优先；否则按 cv_grid_size 生成几何网格，默认大小时交给 cv_select"""
    text = getattr(args, "grid", None)
    if text:
        try:
            return [float(v) for v in text.split(",") if v.strip()]
        except ValueError as e:
            raise ConfigError(f"invalid --grid: {text}") from e
    if rc.cv_grid_size != settings.CV_GRID_SIZE:
        return default_grid(pooled_deltas(estimator, metric), size=rc.cv_grid_size)
    return None


def cmd_simulate(args: argparse.Namespace) -> int:
    values = read_config_file(args.config) if args.config else {}
    for key in ("experiment", "n", "reps", "seed", "rho", "beta"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    try:
        cfg = SimConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid simulation config: {e}") from e
    out = Path(args.out or settings.OUTPUT_DIR)
    reps = [simulate_replication(cfg, r) for r in range(cfg.reps)]
    write_simulation(out, cfg, reps, command="simulate")
    print(f"wrote {cfg.reps} replication(s) to {out}")
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    rc = _run_config(args)
    if not rc.scenario:
        raise ConfigError("--scenario is required")
    unsaveable = {rc.outcome_model, rc.propensity_model} & {"kernel-wasserstein"}
    if getattr(args, "save_models", False) and unsaveable:
        raise ConfigError("--save-models does not support kernel-wasserstein nuisance models")
    ds, report, bundle, estimator = _fit(rc)
    sc = load_scenario(rc.scenario, ds.graph, ds.ids)
    metric = get_metric(rc.metric, rc.empty_policy)
    store = StorageManager(rc.out)

    cv_result = None
    bandwidth = rc.bandwidth
    if bandwidth == "cv":
        grid = _cv_grid(args, rc, estimator, metric)
        cv_result = cv_select(estimator.ds, bundle, metric, rc.kernel, grid=grid, estimator=estimator)
        bandwidth = cv_result.chosen
        store.save_csv("cv.csv", cv_result.to_frame())
    kernel = Kernel(float(bandwidth), rc.kernel)
    est = estimator.estimate(sc, metric, kernel)
    est.quality_flags.extend(ds.quality_flags)

    variance = None
    if rc.variance != "none":
        iv = influence_vector(estimator, metric, kernel, sc, est, mode=rc.variance, mc_draws_full=rc.mc_draws_full)
        variance = hac_variance(iv, ds.graph, rc.hac_radius, rc.alpha, est.theta)
        est.sigma2, est.ci = variance.sigma2, variance.ci
        store.save_csv("influence.csv", pd.DataFrame({"node": ds.ids, "w": iv.w}))

    per_node = est.per_node_frame()
    per_node.insert(0, "id", ds.ids)
    store.save_csv("per_node.csv", per_node)
    store.save_json("estimate.json", est.to_dict() | ({"variance": variance.to_dict()} if variance else {}))
    store.save_rows("estimates.csv", [{
        "rep": 0, "target": ds.ids[est.target], "scenario": est.scenario, "theta": est.theta,
        "d_hat": est.d_hat, "lambda": est.bandwidth,
        "sigma": variance.sigma if variance else None,
        "ci_lo": variance.ci[0] if variance else None,
        "ci_hi": variance.ci[1] if variance else None,
    }], ESTIMATE_COLUMNS)
    if getattr(args, "save_models", False):
        save_model(bundle.outcome, store.path("outcome_model.json"))
        save_model(bundle.propensity, store.path("propensity_model.json"))
    store.save_manifest("estimate", rc.model_dump(), {
        "quality_report": report,
        "chosen_lambda": cv_result.chosen if cv_result else None,
    })
    print(f"theta = {est.theta:.6g} (lambda = {est.bandwidth:.4g}, d_hat = {est.d_hat:.4g})")
    if variance:
        print(f"{100 * variance.level:.0f}% CI = [{variance.ci[0]:.6g}, {variance.ci[1]:.6g}]")
    return 0


def cmd_cv(args: argparse.Namespace) -> int:
    rc = _run_config(args)
    ds, report, bundle, estimator = _fit(rc)
    metric = get_metric(rc.metric, rc.empty_policy)
    grid = _cv_grid(args, rc, estimator, metric)
    result = cv_select(estimator.ds, bundle, metric, rc.kernel, grid=grid, estimator=estimator)
    store = StorageManager(rc.out)
    result.to_csv(store.path("cv.csv"))
    store.save_json("cv.json", result.to_dict())
    per_node = result.per_node_frame()
    per_node.insert(1, "id", ds.ids)
    store.save_csv("cv_per_node.csv", per_node)
    store.save_manifest("cv", rc.model_dump(), {"quality_report": report})
    print(f"chosen lambda = {result.chosen:.6g}")
    return 0


def cmd_reproduce(args: argparse.Namespace) -> int:
    from keceni_analysis.cli.reproduce import run_experiment

    out = Path(args.out or settings.OUTPUT_DIR) / args.experiment
    report = run_experiment(args.experiment, args.scale, out, seed=args.seed, threads=args.threads)
    for row in report:
        status = "PASS" if row["passed"] else "FAIL"
        print(f"[{status}] {row['criterion']}: {row['value']:.4g} (threshold {row['threshold']})")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "cv": cmd_cv,
    "reproduce": cmd_reproduce,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args)
    except (KeceniInputError, ValidationError) as e:
        logger.error("输入错误: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeceniNumericalError as e:
        logger.error("数值错误: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("内部错误: %s", e)
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
