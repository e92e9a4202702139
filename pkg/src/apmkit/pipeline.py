"""Batch pipeline: a configured run of the toolkit stages.

A run is driven by one JSON config and one seed. Stages execute in a
fixed order (features, labels, lamap, crf, pseudolabel, evaluate), each
writing its artifacts into the output directory and its wall time into
the run manifest. Randomness is stream-split per module from the run
seed, so reruns with an identical config and seed produce byte-identical
rasters and reports; the manifest is the only file allowed to differ
(it records timings).

On a stage failure the run aborts with the failing stage named, and that
stage's partial outputs are moved under a ``failed/`` prefix so they are
never mistaken for good artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._rng import module_rng
from .crf import CrfConfig, crf_refine
from .errors import ConfigError, DataError, ToolkitError
from .lamap import LamapConfig, build_site_models, lamap_surface
from .metrics import (
    MetricsReport,
    ScoredSample,
    aul,
    auroc,
    bin_analysis,
    confusion_from_counts,
    find_count_correlation,
    surface_density,
    volume_gain,
    write_density_csv,
)
from .pseudolabel import BranchPair, DplConfig, confident_pseudolabel, dpl_objective
from .raster.distance import distance_map, load_targets
from .raster.grid import RasterGrid, load_raster, save_raster
from .raster.labels import DEFAULT_LABEL_RADIUS, rasterize_labels
from .raster.sites import filter_sites, read_sites_csv
from .raster.terrain import derive_terrain
from .raster.tiling import extract_window, stitch, tile_plan

logger = logging.getLogger(__name__)

STAGES = ("features", "labels", "lamap", "crf", "pseudolabel", "evaluate")


@dataclass
class PipelineConfig:
    """Validated run configuration.

    Attributes mirror the JSON schema; see ``from_json``. Only the stages
    listed in ``stages`` run, in canonical order.
    """

    output_dir: str
    stages: tuple[str, ...]
    seed: int = 0
    dem: str | None = None
    stack: str | None = None
    sites: str | None = None
    branch1: str | None = None
    branch2: str | None = None
    logits: str | None = None
    historical_targets: tuple[str, ...] = ()
    period: str | None = None
    tile_size: int = 128
    overlap: float = 0.9
    label_radius: float = DEFAULT_LABEL_RADIUS
    threads: int = 1
    lamap: dict = field(default_factory=dict)
    crf: dict = field(default_factory=dict)
    dpl: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        if not self.output_dir:
            raise ConfigError("output_dir is required")
        aliases = {"derive-features": "features"}
        stages = tuple(aliases.get(s, s) for s in self.stages)
        for s in stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage '{s}'; expected one of {STAGES}")
        if not stages:
            raise ConfigError("no stages requested")
        # Keep canonical order regardless of listing order.
        self.stages = tuple(s for s in STAGES if s in stages)
        if self.tile_size < 1:
            raise ConfigError(f"tile_size must be >= 1, got {self.tile_size}")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        self._require_inputs()

    def _require_inputs(self) -> None:
        def need(cond, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        if "features" in self.stages:
            need(self.dem, "stage 'features' requires inputs.dem")
        if "labels" in self.stages:
            need(self.sites, "stage 'labels' requires inputs.sites")
        if "lamap" in self.stages:
            need(self.sites, "stage 'lamap' requires inputs.sites")
            need(
                self.stack or "features" in self.stages,
                "stage 'lamap' requires inputs.stack or the features stage",
            )
        if "crf" in self.stages:
            need(
                self.logits or self.branch1,
                "stage 'crf' requires inputs.logits or inputs.branch1",
            )
            need(
                self.stack or "features" in self.stages,
                "stage 'crf' requires inputs.stack or the features stage",
            )
        if "pseudolabel" in self.stages:
            need(
                self.branch1 and self.branch2,
                "stage 'pseudolabel' requires inputs.branch1 and inputs.branch2",
            )
        if "evaluate" in self.stages:
            need(self.sites, "stage 'evaluate' requires inputs.sites")
            need(
                "lamap" in self.stages or "crf" in self.stages,
                "stage 'evaluate' requires a surface stage (lamap or crf)",
            )

    @staticmethod
    def from_json(source: str | os.PathLike | dict) -> "PipelineConfig":
        """Load and validate a config document (path or dict)."""
        if isinstance(source, dict):
            doc = dict(source)
        else:
            with open(source, "r", encoding="utf-8") as fh:
                try:
                    doc = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("pipeline config must be a JSON object")
        inputs = doc.get("inputs", {})
        if not isinstance(inputs, dict):
            raise ConfigError("'inputs' must be an object")
        known = {
            "output_dir", "stages", "seed", "inputs", "period", "tile_size",
            "overlap", "label_radius", "threads", "lamap", "crf", "dpl", "step",
        }
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
        known_inputs = {
            "dem", "stack", "sites", "branch1", "branch2", "logits",
            "historical_targets",
        }
        for key in inputs:
            if key not in known_inputs:
                raise ConfigError(f"unknown input key '{key}'")
        try:
            return PipelineConfig(
                output_dir=doc.get("output_dir", ""),
                stages=tuple(doc.get("stages", [])),
                seed=int(doc.get("seed", 0)),
                dem=inputs.get("dem"),
                stack=inputs.get("stack"),
                sites=inputs.get("sites"),
                branch1=inputs.get("branch1"),
                branch2=inputs.get("branch2"),
                logits=inputs.get("logits"),
                historical_targets=tuple(inputs.get("historical_targets", [])),
                period=doc.get("period"),
                tile_size=int(doc.get("tile_size", 128)),
                overlap=float(doc.get("overlap", 0.9)),
                label_radius=float(doc.get("label_radius", DEFAULT_LABEL_RADIUS)),
                threads=int(doc.get("threads", 1)),
                lamap=dict(doc.get("lamap", {})),
                crf=dict(doc.get("crf", {})),
                dpl=dict(doc.get("dpl", {})),
                step=int(doc.get("step", 0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc

    def canonical_dict(self) -> dict:
        return {
            "output_dir": self.output_dir,
            "stages": list(self.stages),
            "seed": self.seed,
            "inputs": {
                "dem": self.dem,
                "stack": self.stack,
                "sites": self.sites,
                "branch1": self.branch1,
                "branch2": self.branch2,
                "logits": self.logits,
                "historical_targets": list(self.historical_targets),
            },
            "period": self.period,
            "tile_size": self.tile_size,
            "overlap": self.overlap,
            "label_radius": self.label_radius,
            "threads": self.threads,
            "lamap": self.lamap,
            "crf": self.crf,
            "dpl": self.dpl,
            "step": self.step,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _json_bytes(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")


def build_feature_stack(
    dem: RasterGrid, target_paths: Sequence[str | os.PathLike] = ()
) -> RasterGrid:
    """Terrain feature stack from a DEM, plus optional distance bands.

    Bands: elevation, slope, aspect, hydro_proximity, then one
    ``dist_<name>`` band per historical-targets file (JSON with "points"
    and "lines").
    """
    terrain = derive_terrain(dem)
    bands = [dem.band(0)] + [terrain.band(i) for i in range(terrain.bands)]
    names = ["elevation", *terrain.band_names]
    for target_path in target_paths:
        points, lines = load_targets(target_path)
        dist = distance_map(dem, points, lines)
        bands.append(dist.band(0))
        names.append(f"dist_{Path(target_path).stem}")
    return RasterGrid(
        np.stack([np.where(dem.nodata_mask, np.nan, b) for b in bands]).astype(np.float32),
        dem.geotransform,
        dem.nodata_mask,
        tuple(names),
        {"source": "derive_features"},
    )


def emit_surface_products(
    surface: RasterGrid,
    out_dir: str | os.PathLike,
    stem: str,
    baseline: RasterGrid | None = None,
) -> list[str]:
    """Write a surface raster, its density CSV and an optional difference.

    The difference raster is ``surface - baseline`` (signed) and requires
    both grids on the same frame.

    Returns the list of written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[str] = []
    raster_path = out / f"{stem}.grid"
    save_raster(surface, raster_path)
    paths.append(str(raster_path))
    density_path = out / f"{stem}_density.csv"
    write_density_csv(density_path, surface_density(surface))
    paths.append(str(density_path))
    if baseline is not None:
        if not surface.same_frame(baseline):
            raise DataError("surface and baseline are on different frames")
        mask = surface.nodata_mask | baseline.nodata_mask
        diff = surface.band(0).astype(np.float64) - baseline.band(0).astype(np.float64)
        diff_grid = RasterGrid(
            np.where(mask, np.nan, diff).astype(np.float32)[None, :, :],
            surface.geotransform,
            mask,
            ("difference",),
            {"difference": "surface_minus_baseline"},
        )
        diff_path = out / f"{stem}_difference.grid"
        save_raster(diff_grid, diff_path)
        paths.append(str(diff_path))
    return paths


class _Run:
    """Mutable state threaded through the stages of one pipeline run."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.stack: RasterGrid | None = None
        self.labels: RasterGrid | None = None
        self.baseline: RasterGrid | None = None
        self.surface: RasterGrid | None = None
        self.sites = read_sites_csv(cfg.sites) if cfg.sites else []
        self.period_sites = (
            filter_sites(self.sites, period=cfg.period) if cfg.period else self.sites
        )
        self.artifacts: dict[str, list[str]] = {}

    def write_raster(self, stage: str, name: str, grid: RasterGrid) -> Path:
        path = self.out / name
        save_raster(grid, path)
        self.artifacts.setdefault(stage, []).append(str(path))
        return path

    def write_bytes(self, stage: str, name: str, blob: bytes) -> Path:
        path = self.out / name
        path.write_bytes(blob)
        self.artifacts.setdefault(stage, []).append(str(path))
        return path

    def get_stack(self) -> RasterGrid:
        if self.stack is None:
            if not self.cfg.stack:
                raise ConfigError("no feature stack available; run the features stage")
            self.stack = load_raster(self.cfg.stack)
        return self.stack


def _stage_features(run: _Run) -> None:
    dem = load_raster(run.cfg.dem)
    stack = build_feature_stack(dem, run.cfg.historical_targets)
    run.stack = stack
    run.write_raster("features", "stack.grid", stack)


def _stage_labels(run: _Run) -> None:
    grid = run.get_stack() if (run.cfg.stack or "features" in run.cfg.stages) else None
    if grid is None:
        raise ConfigError("stage 'labels' needs a reference frame (stack or dem)")
    labels = rasterize_labels(grid, run.period_sites, run.cfg.label_radius)
    run.labels = labels
    run.write_raster("labels", "labels.grid", labels)


def _stage_lamap(run: _Run) -> None:
    cfg = run.cfg
    stack = run.get_stack()
    positives = filter_sites(run.period_sites, polarity="positive")
    if not positives:
        raise DataError("no positive sites for the surface stage")
    lamap_cfg_args = dict(cfg.lamap)
    if "bands" in lamap_cfg_args and lamap_cfg_args["bands"] is not None:
        lamap_cfg_args["bands"] = tuple(lamap_cfg_args["bands"])
    lcfg = LamapConfig(**lamap_cfg_args)
    models = build_site_models(stack, positives, lcfg)
    surface = lamap_surface(stack, models, lcfg)
    run.baseline = surface
    if run.surface is None:
        run.surface = surface
    run.write_raster("lamap", "lamap_surface.grid", surface)


def _stage_crf(run: _Run) -> None:
    cfg = run.cfg
    stack = run.get_stack()
    ccfg = CrfConfig.from_json(cfg.crf) if cfg.crf else CrfConfig()
    if cfg.logits:
        logits = load_raster(cfg.logits)
    else:
        branch = load_raster(cfg.branch1)
        p = np.clip(branch.band(0).astype(np.float64), 1e-7, 1.0 - 1e-7)
        logits = RasterGrid(
            np.log(p / (1.0 - p)).astype(np.float32)[None, :, :],
            branch.geotransform,
            branch.nodata_mask,
            ("logit",),
            {"source": "branch1_logit_transform"},
        )
    if not logits.same_frame(stack):
        raise DataError("logits and feature stack are on different frames")
    if logits.height > cfg.tile_size or logits.width > cfg.tile_size:
        plan = tile_plan(logits, cfg.tile_size, cfg.overlap)
        guidance_data = stack.data
        logits_data = logits.data
        mask = logits.nodata_mask | stack.nodata_mask

        def refine_one(window):
            sub_logits = RasterGrid(
                np.ascontiguousarray(extract_window(logits_data, window)),
                logits.geotransform,
                extract_window(mask, window),
                logits.band_names,
            )
            sub_guidance = RasterGrid(
                np.ascontiguousarray(extract_window(guidance_data, window)),
                stack.geotransform,
                extract_window(mask, window),
                stack.band_names,
            )
            refined = crf_refine(sub_logits, sub_guidance, ccfg)
            return np.where(
                refined.nodata_mask, 0.5, refined.band(0).astype(np.float64)
            )

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                tiles = list(pool.map(refine_one, plan))
        else:
            tiles = [refine_one(w) for w in plan]
        stitched = stitch(
            tiles, plan, logits.shape, logits.geotransform, ("probability",)
        )
        values = np.where(mask, np.nan, stitched.band(0)).astype(np.float32)
        refined_grid = RasterGrid(
            values[None, :, :], logits.geotransform, mask,
            ("probability",), {"refinement": "mean_field_dense_crf", "tiled": True},
        )
    else:
        refined_grid = crf_refine(logits, stack, ccfg)
    run.surface = refined_grid
    run.write_raster("crf", "refined_surface.grid", refined_grid)


def _stage_pseudolabel(run: _Run) -> None:
    cfg = run.cfg
    y1 = load_raster(cfg.branch1)
    y2 = load_raster(cfg.branch2)
    pair = BranchPair(y1, y2)
    dcfg_args = dict(cfg.dpl)
    dcfg_args.setdefault("rng_seed", cfg.seed)
    dcfg = DplConfig(**dcfg_args)
    rng = module_rng(cfg.seed, "pseudolabel")
    labeled = None
    if run.labels is not None:
        labeled = (y1, y2, run.labels)
    breakdown = dpl_objective(labeled, [pair], dcfg, step=cfg.step)
    masked = confident_pseudolabel(pair, dcfg, rng=rng)
    run.write_raster("pseudolabel", "pseudolabel.grid", masked)
    doc = {"step": cfg.step, "loss_kind": dcfg.loss_kind, **breakdown.as_dict()}
    run.write_bytes("pseudolabel", "loss_breakdown.json", _json_bytes(doc))


def sample_surface_sites(surface: RasterGrid, sites) -> list[ScoredSample]:
    """Read the surface value under each site's containing pixel.

    Sites outside the frame or on masked pixels are skipped with a
    warning. Unlabeled sites keep a None label for the PU metrics.
    """
    samples = []
    for site in sites:
        if not surface.contains(site.x, site.y):
            logger.warning("site '%s' outside the evaluated surface; skipped", site.site_id)
            continue
        row, col = surface.pixel_of(site.x, site.y)
        if surface.nodata_mask[row, col]:
            logger.warning("site '%s' falls on masked pixels; skipped", site.site_id)
            continue
        score = float(surface.band(0)[row, col])
        label = site.polarity if site.polarity in ("positive", "negative") else None
        samples.append(ScoredSample(score, label, site.find_count))
    return samples


def evaluate_surface(
    surface: RasterGrid,
    sites,
    n_bins: int = 6,
    metadata: dict | None = None,
) -> MetricsReport:
    """Score a probability surface at the given sites.

    AUROC, confusion metrics and the reliability bins need both labeled
    classes; AUL needs positives; the find-count correlation needs 3+
    sites with counts. Metrics without enough data stay None.

    Raises:
        DataError: when no site can be sampled from the surface.
    """
    samples = sample_surface_sites(surface, sites)
    if not samples:
        raise DataError("no evaluable sites on the surface")
    report = MetricsReport(metadata={
        "bins": "equal_width",
        "volume": "radar_polygon_area",
        **(metadata or {}),
    })
    labeled = [s for s in samples if s.label is not None]
    has_pos = any(s.label == "positive" for s in labeled)
    has_neg = any(s.label == "negative" for s in labeled)
    if has_pos and has_neg:
        report.auroc = auroc(labeled)
        tp = sum(1 for s in labeled if s.label == "positive" and s.score >= 0.5)
        fp = sum(1 for s in labeled if s.label == "negative" and s.score >= 0.5)
        fn = sum(1 for s in labeled if s.label == "positive" and s.score < 0.5)
        tn = sum(1 for s in labeled if s.label == "negative" and s.score < 0.5)
        cm = confusion_from_counts(tp, fp, fn, tn)
        report.dice, report.iou = cm.dice, cm.iou
        report.f1, report.accuracy = cm.f1, cm.accuracy
        report.bins = bin_analysis(labeled, n_bins)
    if has_pos:
        scores = np.array([s.score for s in samples])
        flags = np.array([s.label == "positive" for s in samples])
        report.aul = aul(scores, flags)
    with_counts = [s for s in samples if s.find_count is not None]
    if len(with_counts) >= 3:
        report.find_count_rho = find_count_correlation(samples)
    density = surface_density(surface)
    report.density_histogram = [float(v) for v in density.histogram]
    return report


def _stage_evaluate(run: _Run) -> None:
    surface = run.surface
    if surface is None:
        raise ConfigError("evaluate stage found no surface to score")
    surface_name = "crf" if "crf" in run.cfg.stages else "lamap"
    report = evaluate_surface(
        surface,
        run.period_sites,
        metadata={"surface": surface_name, "period": run.cfg.period},
    )
    if run.baseline is not None and run.surface is not run.baseline:
        if report.auroc is not None:
            base_report = evaluate_surface(run.baseline, run.period_sites)
            if base_report.auroc is not None:
                try:
                    report.volume_gain = volume_gain(report, base_report)
                    report.baseline_name = "lamap"
                except DataError:
                    logger.warning("baseline radar area is zero; volume gain omitted")
        products = emit_surface_products(
            surface, run.out, "surface", baseline=run.baseline
        )
        run.artifacts.setdefault("evaluate", []).extend(products)
    run.write_bytes("evaluate", "report.json", _json_bytes(report.to_dict()))


_STAGE_FUNCS = {
    "features": _stage_features,
    "labels": _stage_labels,
    "lamap": _stage_lamap,
    "crf": _stage_crf,
    "pseudolabel": _stage_pseudolabel,
    "evaluate": _stage_evaluate,
}


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute the configured stages and write the run manifest.

    Returns the manifest dict (also written to ``manifest.json``).

    Raises:
        ToolkitError: re-raised from the failing stage, which is named in
            the message; its partial outputs move under ``failed/``.
    """
    run = _Run(cfg)
    manifest_stages = []
    for stage in cfg.stages:
        start = time.perf_counter()
        try:
            _STAGE_FUNCS[stage](run)
        except Exception as exc:
            _quarantine_outputs(run, stage)
            if isinstance(exc, ToolkitError):
                raise type(exc)(f"stage '{stage}' failed: {exc}") from exc
            raise ToolkitError(f"stage '{stage}' failed: {exc}") from exc
        manifest_stages.append(
            {
                "name": stage,
                "wall_time_s": time.perf_counter() - start,
                "artifacts": run.artifacts.get(stage, []),
            }
        )
    manifest = {
        "toolkit_version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "stages": manifest_stages,
    }
    (run.out / "manifest.json").write_bytes(_json_bytes(manifest))
    return manifest


def _quarantine_outputs(run: _Run, stage: str) -> None:
    """Move the failing stage's partial outputs under ``failed/``."""
    paths = run.artifacts.get(stage, [])
    if not paths:
        return
    failed_dir = run.out / "failed"
    failed_dir.mkdir(exist_ok=True)
    for p in paths:
        src = Path(p)
        if src.exists():
            shutil.move(str(src), str(failed_dir / src.name))
    run.artifacts[stage] = [str(failed_dir / Path(p).name) for p in paths]
