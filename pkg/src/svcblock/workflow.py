"""End-to-end steps: simulate, select, fit, diagnose and predict.

Every step reads its inputs from the paths in a :class:`RunConfig`, writes
plain CSV/JSON/GeoJSON/text outputs to ``output_dir`` and returns the list
of files written.  Outputs carry no timestamps and floats are written with
``repr`` so identical configs give byte-identical files.
"""
from __future__ import annotations

import csv
import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diagnostics import (CvReport, criteria_table, fit_report, loo_cv,
                          reports_json)
from .geo import (IngestError, extent_predictors, parse_plots, parse_polygons,
                  parse_raster, partition_cells, polygon_centroid, polygons_to_geojson,
                  write_plots, write_polygons, write_raster)
from .mcmc import (PosteriorSamples, effective_sample_size, gelman_rubin, parameter_summary,
                   run_mcmc, summary_table)
from .model import Dataset, ModelSpec
from .prediction import (REGION, PredictionUnit, aggregate_totals, areal_total, block_total,
                         geojson_join, joint_ppd, summarize, summary_header, totals_table,
                         write_summary_csv)
from .selection import backward_select
from .simulate import simulate

log = logging.getLogger(__name__)

SELECTED_FILE = "selected_predictors.txt"


def stage_seed(seed, stage: str) -> int:
    """Independent, reproducible seed for a named stage of the run."""
    key = zlib.crc32(stage.encode())
    return int(np.random.SeedSequence(seed, spawn_key=(key,)).generate_state(1)[0])


def _out(cfg: RunConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def load_plots(cfg: RunConfig) -> Dataset:
    cfg.require("plots")
    return parse_plots(cfg.plots)


def resolve_predictors(cfg: RunConfig, ds: Dataset) -> tuple:
    """Explicit predictors, else the output of the select step, else all."""
    if cfg.predictors is not None:
        names = tuple(cfg.predictors)
    else:
        path = cfg.output_dir / SELECTED_FILE
        if path.exists():
            names = tuple(line.strip() for line in path.read_text().splitlines() if line.strip())
        else:
            names = tuple(ds.names)
    unknown = [n for n in names if n not in ds.names]
    if unknown:
        raise KeyError(f"predictor(s) {unknown} not in {cfg.plots}")
    return names


def _model(cfg, name, ds):
    return ModelSpec.from_name(name, ds.p, cfg.nu)


def _draws_path(cfg, label):
    return cfg.output_dir / f"draws_{label}.csv"


# ------------------------------------------------------------------ simulate

def cmd_simulate(cfg: RunConfig) -> list:
    plots, blowdowns, rasters, truth = simulate(cfg.simulation, cfg.seed)
    for p in (cfg.plots.parent, cfg.polygons.parent, cfg.raster_dir):
        p.mkdir(parents=True, exist_ok=True)
    write_plots(cfg.plots, plots)
    write_polygons(cfg.polygons, blowdowns)
    files = [cfg.plots, cfg.polygons]
    for name, r in rasters.items():
        path = cfg.raster_dir / f"{name}.asc"
        write_raster(path, r)
        files.append(path)
    path = _out(cfg) / "truth.json"
    path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    files.append(path)
    return files


# -------------------------------------------------------------------- select

def cmd_select(cfg: RunConfig) -> list:
    ds = load_plots(cfg)
    trace = backward_select(ds, cfg.candidates, cfg.selection)
    out = _out(cfg)
    trace.to_csv(out / "selection_trace.csv")
    (out / SELECTED_FILE).write_text("".join(f"{n}\n" for n in trace.chosen))
    log.info("selected predictors: %s (LOO MSPE %.4g)", ", ".join(trace.chosen) or "none",
             trace.chosen_mspe)
    return [out / "selection_trace.csv", out / SELECTED_FILE]


# ----------------------------------------------------------------------- fit

def fit_models(cfg: RunConfig, ds: Dataset) -> dict:
    fits = {}
    for name in cfg.models:
        spec = _model(cfg, name, ds)
        mcfg = cfg.mcmc.with_seed(stage_seed(cfg.seed, f"fit:{spec.label}"))
        fits[spec.label] = run_mcmc(ds, spec, cfg.priors_for(ds, spec), mcfg)
    return fits


def cmd_fit(cfg: RunConfig) -> list:
    ds = load_plots(cfg)
    ds = ds.subset(resolve_predictors(cfg, ds))
    fits = fit_models(cfg, ds)
    out = _out(cfg)
    files = []
    for label, s in fits.items():
        s.to_csv(_draws_path(cfg, label))
        files.append(_draws_path(cfg, label))
    tag = f"{100 * cfg.level:g}"
    path = out / "parameter_summary.txt"
    path.write_text(f"Posterior median ({tag}% credible interval)\n"
                    + summary_table(fits, cfg.level) + "\n")
    files.append(path)
    path = out / "parameter_summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "parameter", "median", "lower", "upper", "rhat", "ess",
                    "acceptance"])
        for label, s in fits.items():
            summ = parameter_summary(s, cfg.level)
            rhat = gelman_rubin(s) if s.by_chain().shape[0] > 1 else np.full(len(s.names), np.nan)
            ess = effective_sample_size(s)
            acc = float(np.mean(s.acceptance["covariance"]))
            for j, n in enumerate(s.names):
                med, lo, hi = summ[n]
                w.writerow([label, n, repr(med), repr(lo), repr(hi), repr(float(rhat[j])),
                            repr(float(ess[j])), repr(acc)])
    files.append(path)
    return files


def load_fits(cfg: RunConfig, ds: Dataset) -> dict:
    """Posterior draws written by the fit step, keyed by model label."""
    fits = {}
    for name in cfg.models:
        spec = _model(cfg, name, ds)
        path = _draws_path(cfg, spec.label)
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run the fit step first")
        s = PosteriorSamples.from_csv(path, spec, ds.names)
        s.priors = cfg.priors_for(ds, spec)
        fits[spec.label] = s
    return fits


# ------------------------------------------------------------------ diagnose

def _write_holdouts(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "observed", "mean", "median", "sd", "lower", "upper", "crps",
                    "covered"])
        for r in records:
            w.writerow([r.id, repr(r.observed), repr(r.mean), repr(r.median), repr(r.sd),
                        repr(r.lower), repr(r.upper), repr(r.crps), int(r.covered)])


def cmd_diagnose(cfg: RunConfig) -> list:
    ds = load_plots(cfg)
    ds = ds.subset(resolve_predictors(cfg, ds))
    fits = load_fits(cfg, ds)
    reports = {label: fit_report(s, ds, cfg.dic_plugin) for label, s in fits.items()}
    cvs = {}
    out = _out(cfg)
    files = []
    if cfg.loo:
        for label, s in fits.items():
            mcfg = cfg.mcmc.with_seed(stage_seed(cfg.seed, f"loo:{label}"))
            # default priors are rebuilt from each fold's training data
            pri = None if cfg.default_prior_family else s.priors
            cvs[label] = loo_cv(ds, s.spec, pri, mcfg, cfg.level, cfg.workers)
            path = out / f"loo_{label}.csv"
            _write_holdouts(path, cvs[label].records)
            files.append(path)
    path = out / "criteria_table.txt"
    path.write_text(criteria_table(reports, cvs) + "\n")
    files.append(path)
    path = out / "criteria.json"
    brief = {m: CvReport(c.mspe, c.crps, c.ci_cover) for m, c in cvs.items()}
    path.write_text(reports_json(reports, brief) + "\n")
    files.append(path)
    return files


# ------------------------------------------------------------------- predict

def load_rasters(cfg: RunConfig, names) -> dict:
    rasters = {}
    for n in names:
        path = cfg.raster_dir / f"{n}.asc"
        if not path.exists():
            raise IngestError(f"raster for predictor {n!r} not found at {path}")
        rasters[n] = parse_raster(path, n)
    return rasters


def _polygon_units(args):
    polys, rasters, cell_area = args
    out = []
    for p in polys:
        c = polygon_centroid(p)
        areal = PredictionUnit(c, p.area, extent_predictors(rasters, p.to_shapely(), c), p.id)
        part = partition_cells(p, cell_area, rasters=rasters)
        cells = [PredictionUnit(cell.centroid, cell.area, cell.predictors, p.id)
                 for cell in part.cells]
        out.append((areal, cells))
    return out


def build_units(polygons, rasters, cell_area, workers=1):
    """Areal unit and block cells for every polygon, in polygon order."""
    if workers > 1 and len(polygons) > 1:
        chunks = [list(c) for c in np.array_split(np.array(polygons, dtype=object),
                                                  min(workers, len(polygons)))]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_polygon_units, [(c, rasters, cell_area) for c in chunks if c]))
        return [u for part in parts for u in part]
    return _polygon_units((polygons, rasters, cell_area))


def thin_for_prediction(samples: PosteriorSamples, max_draws: int):
    """Evenly spaced subset of draws and their keys (row indices)."""
    if max_draws <= 0 or max_draws >= samples.M:
        keys = np.arange(samples.M)
        return samples, keys
    keys = np.unique(np.linspace(0, samples.M - 1, max_draws).round().astype(int))
    return samples.take(keys), keys


def predict_totals(samples: PosteriorSamples, ds: Dataset, polygons, units, seed,
                   max_joint=2000, workers=1, draw_keys=None):
    """Per-draw areal and block totals for each polygon.

    Returns ``(areal, block)`` dicts mapping polygon id to draws of the
    total (m3).
    """
    sub = samples
    keys = np.arange(samples.M) if draw_keys is None else draw_keys
    areal_units = [a for a, _ in units]
    cell_units = [c for _, cells in units for c in cells]
    ppd_a = joint_ppd(sub, ds, None, areal_units, seed=stage_seed(seed, "areal"),
                      draw_keys=keys, max_joint=max_joint, workers=workers)
    ppd_b = joint_ppd(sub, ds, None, cell_units, seed=stage_seed(seed, "block"),
                      draw_keys=keys, max_joint=max_joint, workers=workers)
    areal, block = {}, {}
    start = 0
    for j, (p, (_, cells)) in enumerate(zip(polygons, units)):
        areal[p.id] = areal_total(ppd_a.draws[:, j], p.area)
        stop = start + len(cells)
        block[p.id] = block_total(ppd_b.draws[:, start:stop], [c.area for c in cells], p.area)
        start = stop
    return areal, block


def _totals_csv(path, group_draws, areas, level):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "group"] + summary_header(level)[2:])
        for mode, groups in group_draws.items():
            for g, draws in groups.items():
                s = summarize(draws, level)
                w.writerow([mode, g, repr(float(areas[g])), repr(s.mean), repr(s.median),
                            repr(s.sd), repr(s.cv), repr(s.lower), repr(s.upper)])


def cmd_predict(cfg: RunConfig) -> list:
    ds = load_plots(cfg)
    ds = ds.subset(resolve_predictors(cfg, ds))
    cfg.require("polygons", "raster_dir")
    polygons = parse_polygons(cfg.polygons)
    spec = _model(cfg, cfg.predict_model, ds)
    path = _draws_path(cfg, spec.label)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; fit model {spec.label!r} first")
    samples = PosteriorSamples.from_csv(path, spec, ds.names)
    rasters = load_rasters(cfg, ds.names)
    units = build_units(polygons, rasters, cfg.cell_area, cfg.workers)
    samples, keys = thin_for_prediction(samples, cfg.max_draws)
    areal, block = predict_totals(samples, ds, polygons, units, cfg.seed, cfg.max_joint,
                                  cfg.workers, keys)
    out = _out(cfg)
    files = []
    summaries = {"areal": {}, "block": {}}
    for mode, totals in (("areal", areal), ("block", block)):
        recs = []
        for p in polygons:
            s = summarize(totals[p.id], cfg.level)
            summaries[mode][p.id] = s
            recs.append((p.id, p.subregion, p.area, s))
        path = out / f"ppd_{mode}.csv"
        write_summary_csv(path, recs, cfg.level)
        files.append(path)

    path = out / "blowdowns_ppd.geojson"
    joined = geojson_join(polygons_to_geojson(polygons), summaries)
    path.write_text(json.dumps(joined, indent=1, sort_keys=True) + "\n")
    files.append(path)

    path = out / "cv_vs_area.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "subregion", "area_ha", "n_cells", "areal_cv_pct", "block_cv_pct"])
        for p, (_, cells) in zip(polygons, units):
            w.writerow([p.id, p.subregion, repr(p.area), len(cells),
                        repr(summaries["areal"][p.id].cv), repr(summaries["block"][p.id].cv)])
    files.append(path)

    grouping = {p.id: p.subregion for p in polygons}
    labels = sorted({p.subregion for p in polygons})
    areas = {g: 0.0 for g in labels}
    for p in polygons:
        areas[p.subregion] += p.area
    areas[REGION] = sum(areas[g] for g in labels)
    groups = {"areal": aggregate_totals(areal, grouping, labels),
              "block": aggregate_totals(block, grouping, labels)}
    path = out / "totals.csv"
    _totals_csv(path, groups, areas, cfg.level)
    files.append(path)
    tag = f"{100 * cfg.level:g}"
    path = out / "totals_table.txt"
    parts = [f"{mode.capitalize()} estimate: median ({tag}% credible interval)\n"
             + totals_table(g, areas, cfg.level) for mode, g in groups.items()]
    path.write_text("\n\n".join(parts) + "\n")
    files.append(path)
    return files


def run_all(cfg: RunConfig) -> list:
    files = []
    for step in (cmd_simulate, cmd_select, cmd_fit, cmd_diagnose, cmd_predict):
        files += step(cfg)
    return files
