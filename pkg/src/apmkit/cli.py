"""Command-line front end.

Every subcommand is a thin wrapper over one library operation; the CLI
adds argument parsing, error mapping and nothing else. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric failure, 1 anything
else. With ``--json-errors`` failures print a machine-readable JSON
object to stderr instead of a plain message.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .crf import CrfConfig, crf_refine
from .errors import ConfigError, DataError, ToolkitError
from .folds import site_strat_vector, stratified_kfold, uniform_kfold
from .lamap import (
    DEFAULT_CATCHMENT_RADIUS,
    DEFAULT_KERNEL_BANDWIDTH,
    LamapConfig,
    build_site_models,
    lamap_surface,
)
from .metrics import MetricsReport, volume_gain
from .pipeline import (
    PipelineConfig,
    build_feature_stack,
    evaluate_surface,
    run_pipeline,
)
from .pseudolabel import BranchPair, DplConfig, confident_pseudolabel, dpl_objective
from ._rng import module_rng
from .raster.distance import distance_map, load_targets
from .raster.grid import load_raster, save_raster
from .raster.labels import DEFAULT_LABEL_RADIUS, rasterize_labels
from .raster.sites import filter_sites, read_sites_csv
from .raster.tiling import load_plan, save_plan, stitch, tile_plan

logger = logging.getLogger(__name__)


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _load_sites(path: str, period: str | None) -> list:
    sites = read_sites_csv(path)
    return filter_sites(sites, period=period) if period else sites


# --- subcommand handlers ------------------------------------------------------


def _cmd_derive_features(args) -> None:
    dem = load_raster(args.dem)
    stack = build_feature_stack(dem, args.targets or ())
    save_raster(stack, args.out)


def _cmd_distance_map(args) -> None:
    grid = load_raster(args.grid)
    points, lines = load_targets(args.targets)
    save_raster(distance_map(grid, points, lines), args.out)


def _cmd_rasterize_labels(args) -> None:
    grid = load_raster(args.grid)
    sites = _load_sites(args.sites, args.period)
    save_raster(rasterize_labels(grid, sites, args.radius), args.out)


def _parse_band_list(stack, spec: str) -> tuple[int, ...]:
    indices = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        indices.append(int(token) if token.lstrip("-").isdigit() else stack.band_index(token))
    if not indices:
        raise ConfigError("--bands given but empty")
    return tuple(indices)


def _cmd_lamap(args) -> None:
    stack = load_raster(args.stack)
    sites = _load_sites(args.sites, args.period)
    positives = filter_sites(sites, polarity="positive")
    if not positives:
        raise DataError("no positive sites to model")
    cfg = LamapConfig(
        catchment_radius=args.catchment,
        kernel_bandwidth=args.bandwidth,
        bands=_parse_band_list(stack, args.bands) if args.bands else None,
    )
    models = build_site_models(stack, positives, cfg)
    save_raster(lamap_surface(stack, models, cfg), args.out)


def _cmd_crf_refine(args) -> None:
    cfg = CrfConfig.from_json(args.config) if args.config else CrfConfig()
    overrides = {
        "beta": args.beta,
        "sigma": args.sigma,
        "compression": args.gamma,
        "temperature": args.temperature,
        "iterations": args.iters,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    logits = load_raster(args.logits)
    guidance = load_raster(args.guidance)
    save_raster(crf_refine(logits, guidance, cfg), args.out)


def _cmd_pseudolabel(args) -> None:
    pair = BranchPair(load_raster(args.branch1), load_raster(args.branch2))
    cfg_args = _read_json(args.config) if args.config else {}
    cfg_args.setdefault("rng_seed", args.seed)
    try:
        cfg = DplConfig(**cfg_args)
    except TypeError as exc:
        raise ConfigError(f"bad pseudolabel config: {exc}") from exc
    labeled = None
    if args.labels:
        labeled = (pair.y1, pair.y2, load_raster(args.labels))
    breakdown = dpl_objective(labeled, [pair], cfg, step=args.step)
    rng = module_rng(args.seed, "pseudolabel")
    masked = confident_pseudolabel(pair, cfg, alpha=args.alpha, rng=rng)
    save_raster(masked, args.out_raster)
    doc = {"step": args.step, "loss_kind": cfg.loss_kind, **breakdown.as_dict()}
    _write_json(args.out_json, doc)


def _cmd_split_folds(args) -> None:
    sites = read_sites_csv(args.sites)
    if args.strategy == "stratified":
        if not args.stack:
            raise ConfigError("--strategy stratified requires --stack")
        stack = load_raster(args.stack)
        if args.labels:
            labels = load_raster(args.labels)
        else:
            labels = rasterize_labels(stack, sites, args.catchment)
        vectors = [site_strat_vector(s, stack, labels, args.catchment) for s in sites]
        assignment = stratified_kfold(sites, vectors, args.k, args.seed)
    else:
        assignment = uniform_kfold(sites, args.k, args.seed)
    assignment.save(args.out)


def _cmd_stitch(args) -> None:
    if args.out_plan:
        grid = load_raster(args.grid)
        plan = tile_plan(grid, args.tile, args.overlap)
        save_plan(args.out_plan, plan, grid.shape, grid.geotransform)
        return
    if not (args.plan and args.pred and args.out):
        raise ConfigError("stitch needs --plan, --pred and --out (or --out-plan)")
    windows, shape, gt = load_plan(args.plan)
    if len(args.pred) != len(windows):
        raise DataError(
            f"plan has {len(windows)} windows but {len(args.pred)} predictions given"
        )
    grids = [load_raster(p) for p in args.pred]
    stitched = stitch(
        [g.data for g in grids], windows, shape, gt, grids[0].band_names
    )
    save_raster(stitched, args.out)


def _cmd_evaluate(args) -> None:
    surface = load_raster(args.pred)
    sites = _load_sites(args.sites, args.period)
    report = evaluate_surface(
        surface, sites, n_bins=args.bins, metadata={"period": args.period}
    )
    if args.baseline_report:
        baseline = MetricsReport.from_dict(_read_json(args.baseline_report))
        report.volume_gain = volume_gain(report, baseline)
        report.baseline_name = baseline.metadata.get("surface") or "baseline"
    _write_json(args.out, report.to_dict())


def _cmd_run(args) -> None:
    cfg = PipelineConfig.from_json(args.config)
    cap = _thread_cap(args)
    if cap is not None:
        cfg.threads = min(cfg.threads, cap)
    run_pipeline(cfg)


def _thread_cap(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("APMKIT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"APMKIT_THREADS must be an integer, got {env!r}") from exc
    return None


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apmkit",
        description="Raster toolkit for archaeological predictive mapping.",
    )
    parser.add_argument(
        "--json-errors", action="store_true",
        help="print failures as a JSON object on stderr",
    )
    parser.add_argument(
        "--threads", type=int, default=None,
        help="cap worker threads (default: APMKIT_THREADS or 1)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("derive-features", help="terrain + distance feature stack from a DEM")
    p.add_argument("--dem", required=True, help="input DEM raster")
    p.add_argument("--targets", nargs="*", help="historical-targets JSON files")
    p.add_argument("--out", required=True, help="output stack raster")
    p.set_defaults(func=_cmd_derive_features)

    p = sub.add_parser("distance-map", help="exact distance to point/line targets")
    p.add_argument("--grid", required=True, help="reference raster")
    p.add_argument("--targets", required=True, help="targets JSON (points, lines)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_distance_map)

    p = sub.add_parser("rasterize-labels", help="1/0 label disks around sites")
    p.add_argument("--grid", required=True, help="reference raster")
    p.add_argument("--sites", required=True, help="sites CSV")
    p.add_argument("--period", help="restrict to one period")
    p.add_argument("--radius", type=float, default=DEFAULT_LABEL_RADIUS,
                   help="disk radius in map units")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rasterize_labels)

    p = sub.add_parser("lamap", help="site-affinity potential surface")
    p.add_argument("--stack", required=True, help="feature stack raster")
    p.add_argument("--sites", required=True, help="sites CSV")
    p.add_argument("--period", help="restrict to one period")
    p.add_argument("--catchment", type=float, default=DEFAULT_CATCHMENT_RADIUS,
                   help="catchment radius in map units")
    p.add_argument("--bandwidth", type=float, default=DEFAULT_KERNEL_BANDWIDTH,
                   help="distance-kernel bandwidth in map units")
    p.add_argument("--bands", help="comma-separated band names or indices")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_lamap)

    p = sub.add_parser("crf-refine", help="mean-field refinement of a logit raster")
    p.add_argument("--logits", required=True, help="1- or 2-band logit raster")
    p.add_argument("--guidance", required=True, help="guidance feature stack")
    p.add_argument("--config", help="settings JSON")
    p.add_argument("--beta", type=float, help="bilateral feature scale")
    p.add_argument("--sigma", type=float, help="spatial stddev in pixels")
    p.add_argument("--gamma", type=int, help="guidance compression factor")
    p.add_argument("--temperature", type=float, help="unary temperature")
    p.add_argument("--iters", type=int, help="mean-field iterations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_crf_refine)

    p = sub.add_parser("pseudolabel", help="dual-branch pseudolabel and loss breakdown")
    p.add_argument("--branch1", required=True, help="branch-1 probability raster")
    p.add_argument("--branch2", required=True, help="branch-2 probability raster")
    p.add_argument("--labels", help="label raster for the supervised term")
    p.add_argument("--config", help="objective settings JSON")
    p.add_argument("--alpha", type=float, help="fixed mixture coefficient")
    p.add_argument("--step", type=int, default=0, help="training step for the ramps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-raster", required=True, help="masked pseudolabel raster")
    p.add_argument("--out-json", required=True, help="loss-breakdown JSON")
    p.set_defaults(func=_cmd_pseudolabel)

    p = sub.add_parser("split-folds", help="site-level k-fold assignment")
    p.add_argument("--sites", required=True, help="sites CSV")
    p.add_argument("--stack", help="feature stack (stratified strategy)")
    p.add_argument("--labels", help="label raster; derived from sites when omitted")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--strategy", choices=("stratified", "uniform"), default="stratified")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--catchment", type=float, default=DEFAULT_CATCHMENT_RADIUS,
                   help="stratification catchment radius")
    p.add_argument("--out", required=True, help="folds JSON")
    p.set_defaults(func=_cmd_split_folds)

    p = sub.add_parser("stitch", help="plan windows or blend window predictions")
    p.add_argument("--grid", help="reference raster (planning mode)")
    p.add_argument("--tile", type=int, default=128, help="window size in pixels")
    p.add_argument("--overlap", type=float, default=0.9, help="window overlap fraction")
    p.add_argument("--out-plan", help="write the window plan JSON and exit")
    p.add_argument("--plan", help="window plan JSON (stitching mode)")
    p.add_argument("--pred", nargs="+", help="per-window prediction rasters, plan order")
    p.add_argument("--out", help="stitched output raster")
    p.set_defaults(func=_cmd_stitch)

    p = sub.add_parser("evaluate", help="score a surface at labeled sites")
    p.add_argument("--pred", required=True, help="probability surface raster")
    p.add_argument("--sites", required=True, help="sites CSV")
    p.add_argument("--period", help="restrict to one period")
    p.add_argument("--bins", type=int, default=6, help="reliability bins")
    p.add_argument("--baseline-report", help="baseline report JSON for volume gain")
    p.add_argument("--out", default="report.json", help="report JSON path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="execute a configured pipeline")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "stitch" and not args.out_plan and args.grid and not args.plan:
        parser.error("stitch: use --out-plan with --grid, or --plan/--pred/--out")
    try:
        args.func(args)
    except ToolkitError as exc:
        _report_error(exc, args.json_errors)
        return exc.exit_code
    except OSError as exc:
        _report_error(DataError(str(exc)), args.json_errors)
        return DataError.exit_code
    return 0


def _report_error(exc: ToolkitError, as_json: bool) -> None:
    if as_json:
        doc = {
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": exc.exit_code,
        }
        print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    else:
        print(f"apmkit: error: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
