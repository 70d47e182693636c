"""Pipeline commands.

    lesionmil phantom-cohort --config cfg.yaml
    lesionmil extract        --config cfg.yaml
    lesionmil evaluate       --config cfg.yaml [--variant misvm-q|miles-q]
    lesionmil densemap       --config cfg.yaml [--model-dir DIR]
    lesionmil report         --config cfg.yaml

All outputs are byte-identical across reruns with the same config and
seeds; wall-clock timestamps only ever go to ``<output_dir>/run.log``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import dataclasses
import datetime
import io
import csv
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from lesionmil import densemap as dm
from lesionmil import plots, store, texture
from lesionmil.config import (
    ConfigError,
    DataError,
    PipelineConfig,
    load_config,
    stage_seed,
)
from lesionmil.evaluation import (
    CvPlan,
    EvaluationReport,
    HygieneLog,
    ParamGrid,
    dice,
    fisher_rz,
    laa_percentage,
    make_cv_plan,
    nested_cv,
    spearman,
)
from lesionmil.mil import predict_instance
from lesionmil.svm import ConvergenceError
from lesionmil.volume import (
    PhantomSpec,
    Volume,
    VolumeIOError,
    generate_phantom,
    load_volume,
    sample_patches,
    save_volume,
    synthetic_expert_masks,
)


def _log(cfg: PipelineConfig, message: str) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(cfg.output_dir / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {message}\n")


def _subject_id(i: int) -> str:
    return f"subj{i:03d}"


# ---------------------------------------------------------------------------
# phantom-cohort


def cmd_phantom_cohort(cfg: PipelineConfig) -> list[store.ManifestEntry]:
    """Generate the cohort: alternating mild/severe phantom profiles, weakly
    labeled by thresholding the realized lesion fraction."""
    out = cfg.cohort_dir()
    out.mkdir(parents=True, exist_ok=True)
    base_seed = stage_seed(cfg.seed, "cohort")
    records = []
    for i in range(cfg.cohort.subjects):
        profile = cfg.cohort.mild if i % 2 == 0 else cfg.cohort.severe
        seed = base_seed + i
        spec = PhantomSpec(
            dims=cfg.cohort.dims, spacing=cfg.cohort.spacing,
            background_mean=profile.background_mean, background_std=profile.background_std,
            lesion_count=profile.lesion_count, lesion_radius_mm=profile.lesion_radius_mm,
            lesion_mean=profile.lesion_mean, lesion_std=profile.lesion_std,
            smoothing_mm=profile.smoothing_mm, seed=seed,
        )
        vol, lesion_mask, fraction = generate_phantom(spec)
        sid = _subject_id(i)
        save_volume(vol, out / f"{sid}.hdr")
        save_volume(Volume(data=lesion_mask.astype("u1"), spacing=vol.spacing),
                    out / f"{sid}_lesion.hdr")
        records.append((sid, seed, fraction))

    fractions = np.array([r[2] for r in records])
    if cfg.cohort.label_threshold == "median":
        threshold = float(np.median(fractions))
    else:
        threshold = float(cfg.cohort.label_threshold)
    entries = [
        store.ManifestEntry(subject_id=sid, seed=seed, lesion_fraction=frac,
                            label=1 if frac > threshold else -1)
        for sid, seed, frac in records
    ]
    store.write_manifest(entries, out / "manifest.csv")
    store.dump_json({"label_threshold_used": threshold, "cohort": cfg.cohort.to_dict()},
                    out / "cohort.json")
    _log(cfg, f"phantom-cohort: {len(entries)} subjects -> {out}")
    return entries


# ---------------------------------------------------------------------------
# extract


def _extract_subject(args) -> tuple:
    (sid, hdr, lesion_hdr, schema, n_patches, size, seed, levels, distances,
     window, scales, sketch_size) = args
    v = load_volume(hdr)
    lesion = load_volume(lesion_hdr).data.astype(bool)
    patches = sample_patches(v, n_patches, size, seed, source_id=sid)
    cooc_rows, sketch_rows, origins, fracs = [], [], [], []
    for p in patches:
        ox, oy, oz = p.origin
        region = lesion[ox : ox + size, oy : oy + size, oz : oz + size]
        fracs.append(float(region.mean()))
        origins.append(p.origin)
        if schema in ("cooc", "both"):
            cooc_rows.append(texture.cooc_features(p, levels, distances, window).values)
        if schema in ("gauss", "both"):
            responses = texture.gauss_filter_bank(p, v.spacing, scales)
            sketch_rows.append(texture.response_sketch(responses, sketch_size))
    cooc = np.vstack(cooc_rows) if cooc_rows else None
    sketch = np.stack(sketch_rows) if sketch_rows else None
    return sid, cooc, sketch, np.array(origins), np.array(fracs)


def cmd_extract(cfg: PipelineConfig) -> None:
    """Sample patches and compute feature artifacts for every subject.

    Always writes the fold-independent artifacts (co-occurrence matrices
    and/or response sketches).  A whole-cohort binning fit plus feature
    matrices are additionally exported under ``exploratory/``; those are
    for inspection only and are never used by the evaluation protocol."""
    cohort = cfg.cohort_dir()
    manifest = cohort / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no cohort manifest at {manifest}; run phantom-cohort first")
    entries = store.read_manifest(manifest)
    feat = cfg.features
    base_seed = stage_seed(cfg.seed, "patches")
    jobs = []
    for idx, e in enumerate(sorted(entries, key=lambda e: e.subject_id)):
        hdr = cohort / f"{e.subject_id}.hdr"
        lesion_hdr = cohort / f"{e.subject_id}_lesion.hdr"
        if not hdr.exists() or not lesion_hdr.exists():
            raise DataError(f"missing volume files for {e.subject_id} in {cohort}")
        jobs.append((e.subject_id, hdr, lesion_hdr, feat.schema, feat.patches_per_subject,
                     feat.patch_size, base_seed + idx, feat.levels, feat.distances,
                     feat.window, feat.scales, feat.sketch_size))

    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_extract_subject, jobs))
    else:
        results = [_extract_subject(j) for j in jobs]

    fstore = store.FeatureStore(cfg.features_dir())
    fstore.write_meta({
        "schema": feat.schema,
        "n_patches": feat.patches_per_subject,
        "patch_size": feat.patch_size,
        "sketch_size": feat.sketch_size,
        "channels": texture.channel_ids(feat.scales),
        "subjects": [e.subject_id for e in sorted(entries, key=lambda e: e.subject_id)],
        "features": feat.to_dict(),
    })
    for sid, cooc, sketch, origins, fracs in results:
        fstore.write_subject(sid, cooc, sketch, origins, fracs)

    _write_exploratory_exports(cfg, fstore, results)
    _log(cfg, f"extract: {len(results)} subjects, schema {feat.schema}")


def _write_exploratory_exports(cfg, fstore, results) -> None:
    feat = cfg.features
    exp_dir = cfg.features_dir() / "exploratory"
    exp_dir.mkdir(parents=True, exist_ok=True)
    bins = None
    if feat.schema in ("gauss", "both"):
        channels = texture.channel_ids(feat.scales)
        pooled = {
            ch: np.concatenate([sk[:, row, :].ravel() for _, _, sk, _, _ in results])
            for row, ch in enumerate(channels)
        }
        bins = texture.fit_adaptive_bins(pooled, provenance="whole-cohort-exploratory")
        store.dump_json(bins.to_dict(), exp_dir / "bins_cohort.json")
    for sid, cooc, sketch, _, _ in results:
        parts = []
        if cooc is not None:
            parts.append(cooc)
        if sketch is not None:
            channels = texture.channel_ids(feat.scales)
            parts.append(np.vstack([
                texture.sketch_features(sketch[p], bins, channels)
                for p in range(sketch.shape[0])
            ]))
        matrix = np.hstack(parts)
        store.export_features_csv(exp_dir / f"{sid}_features.csv", sid, matrix)
        store.export_features_blob(exp_dir / f"{sid}_features.bin",
                                   exp_dir / f"{sid}_features.meta.json",
                                   matrix, feat.schema)


# ---------------------------------------------------------------------------
# evaluate


def _build_source(cfg: PipelineConfig, entries):
    fstore = store.FeatureStore(cfg.features_dir())
    if not (cfg.features_dir() / "store.json").exists():
        raise DataError(f"no feature store at {cfg.features_dir()}; run extract first")
    meta = fstore.meta
    if meta["schema"] != cfg.features.schema:
        raise DataError(
            f"feature store holds schema {meta['schema']!r}, config wants "
            f"{cfg.features.schema!r}; re-run extract"
        )
    if cfg.features.schema == "cooc":
        return store.fixed_source_from_store(fstore, entries,
                                             cfg.features.instance_label_threshold)
    return store.SketchFeatureSource(fstore, entries, cfg.features.schema,
                                     cfg.features.scales,
                                     cfg.features.instance_label_threshold)


def cmd_evaluate(cfg: PipelineConfig, variant: str | None = None) -> EvaluationReport:
    """Nested cross-validation with grid search; writes the report, the CV
    plan, per-fold model bundles and the SVG plots."""
    manifest = cfg.cohort_dir() / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no cohort manifest at {manifest}")
    entries = store.read_manifest(manifest)
    variant = variant or cfg.variant_internal
    source = _build_source(cfg, entries)
    strata = store.severity_strata(entries)
    cv_seed = stage_seed(cfg.seed, "cv")
    plan = make_cv_plan([e.subject_id for e in entries], strata, seed=cv_seed,
                        n_folds=cfg.cv.outer_folds)
    grid = ParamGrid(
        poly_degrees=cfg.grid.poly_degrees, rbf_sigmas=cfg.grid.rbf_sigmas,
        costs=cfg.grid.costs, quantiles=cfg.grid.quantiles,
    )
    hygiene = HygieneLog()
    run = nested_cv(
        source, variant, grid, plan, inner_folds=cfg.cv.inner_folds, seed=cv_seed,
        workers=cfg.workers, hygiene=hygiene,
        metadata={"schema": cfg.features.schema, "variant_cli": variant.replace("_", "-")},
    )

    out = cfg.output_dir / f"evaluate-{variant.replace('_', '-')}"
    out.mkdir(parents=True, exist_ok=True)
    store.dump_json(run.report.to_dict(), out / "report.json")
    store.dump_json(plan.to_dict(), out / "plan.json")
    _write_report_csv(run.report, out / "report.csv")

    frac_by_sid = {e.subject_id: e.lesion_fraction for e in entries}
    curves = {}
    scatter_x, scatter_y = [], []
    for art in run.artifacts:
        store.save_model_bundle(out / "models" / f"fold{art.fold}", art.model,
                                bins=art.materialized.bins,
                                extra={"fold": art.fold, "params": art.params})
        curves[f"fold {art.fold}"] = (art.test_posteriors, art.test_labels)
        for sid in art.test_ids:
            bag = art.materialized.bags[sid]
            post = predict_instance(art.model, bag.instances)
            scatter_x.append(frac_by_sid[sid])
            scatter_y.append(float((post >= 0.5).mean()) * 100.0)
    plots_dir = out / "plots"
    plots_dir.mkdir(exist_ok=True)
    (plots_dir / "roc.svg").write_text(plots.svg_roc(curves), encoding="utf-8")
    (plots_dir / "scatter.svg").write_text(
        plots.svg_scatter(scatter_x, scatter_y, "true lesion fraction",
                          "positive-patch percentage", "patch percentage vs ground truth"),
        encoding="utf-8",
    )
    _log(cfg, f"evaluate: variant {variant} mean AUC "
              f"{run.report.aggregate['mean_bag_auc']:.3f} -> {out}")
    return run.report


def _write_report_csv(report: EvaluationReport, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fold", "kernel", "C", "q", "bag_auc", "separability",
                     "instance_auc", "n_test_bags", "converged"])
    for fr in report.folds:
        kernel = fr.params["kernel"]
        detail = fr.params.get("degree", fr.params.get("sigma", ""))
        writer.writerow([
            fr.fold, f"{kernel}:{detail}", fr.params["C"], fr.params["q"],
            repr(fr.bag_auc), repr(fr.separability),
            repr(fr.instance_auc) if fr.instance_auc is not None else "",
            fr.n_test_bags, int(fr.converged),
        ])
    agg = report.aggregate
    writer.writerow(["mean", "", "", "", repr(agg["mean_bag_auc"]),
                     repr(agg["mean_separability"]),
                     repr(agg["mean_instance_auc"]) if agg["mean_instance_auc"] is not None else "",
                     "", ""])
    writer.writerow(["sd", "", "", "", repr(agg["sd_bag_auc"]),
                     repr(agg["sd_separability"]), "", "", ""])
    path.write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# densemap


def cmd_densemap(cfg: PipelineConfig, model_dir: str | Path | None = None) -> dict:
    """Dense slice maps for every subject plus the correlation/agreement
    statistics table against the manifest's lesion fractions.

    Without ``model_dir`` each subject is scored by the bundle of the CV
    fold that held it out (leakage-free); with ``model_dir`` a single bundle
    (possibly a constant stub) scores everyone."""
    manifest = cfg.cohort_dir() / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no cohort manifest at {manifest}")
    entries = store.read_manifest(manifest)
    settings = dm.DenseSettings(
        schema=cfg.features.schema, patch_size=cfg.features.patch_size,
        step=cfg.densemap.step, slice_count=cfg.densemap.slice_count,
        slice_stride=cfg.densemap.slice_stride,
        posterior_threshold=cfg.densemap.posterior_threshold,
        scales=cfg.features.scales, levels=cfg.features.levels,
        distances=cfg.features.distances, window=cfg.features.window,
    )

    plan = None
    bundles: dict[int, tuple] = {}
    if model_dir is not None:
        single = store.load_model_bundle(Path(model_dir))
        assign = {e.subject_id: -1 for e in entries}
        bundles[-1] = single
    else:
        eval_dir = cfg.output_dir / f"evaluate-{cfg.variant}"
        plan_path = eval_dir / "plan.json"
        if not plan_path.exists():
            raise DataError(f"no evaluation outputs at {eval_dir}; run evaluate first")
        plan = CvPlan.from_dict(store.load_json(plan_path))
        assign = plan.assignment
        for fold in range(plan.n_folds):
            bundles[fold] = store.load_model_bundle(eval_dir / "models" / f"fold{fold}")

    out = cfg.output_dir / "densemap"
    maps_dir = out / "maps"
    overlay_dir = out / "overlays"
    maps_dir.mkdir(parents=True, exist_ok=True)
    overlay_dir.mkdir(parents=True, exist_ok=True)

    expert_seed = stage_seed(cfg.seed, "experts")
    per_subject = []
    hygiene_violations = 0
    for idx, e in enumerate(sorted(entries, key=lambda e: e.subject_id)):
        sid = e.subject_id
        model, bins, _ = bundles[assign[sid]]
        if not isinstance(model, float) and sid in model.train_subjects:
            hygiene_violations += 1
        v = load_volume(cfg.cohort_dir() / f"{sid}.hdr")
        lesion = load_volume(cfg.cohort_dir() / f"{sid}_lesion.hdr").data.astype(bool)
        lmap = dm.dense_map(v, sid, model, bins, settings)
        slices = [s.z for s in lmap.slices]
        expert_a, expert_b, expected_dice = synthetic_expert_masks(
            lesion, cfg.cohort.expert_keep_prob, cfg.cohort.expert_ring_add_prob,
            cfg.cohort.expert_ring_voxels, seed=expert_seed + idx,
        )
        rec = {
            "subject_id": sid,
            "lesion_fraction": e.lesion_fraction,
            "label": e.label,
            "classifier_pct": dm.lesion_percentage(lmap),
            "laa_pct": laa_percentage(v, cfg.densemap.laa_threshold),
            "expert1_pct": dm.mask_percentage_on_slices(expert_a, v.mask, slices),
            "expert2_pct": dm.mask_percentage_on_slices(expert_b, v.mask, slices),
            "agree_pct": dm.mask_percentage_on_slices(expert_a & expert_b, v.mask, slices),
            "dice_experts": dice(expert_a, expert_b),
            "expected_dice": expected_dice,
            "skipped_centers": sum(s.skipped for s in lmap.slices),
            "slice_fallback": lmap.slice_fallback,
        }
        per_subject.append(rec)
        _write_map_csv(maps_dir / f"{sid}.csv", lmap)
        for k in range(len(lmap.slices)):
            pgm = dm.slice_overlay_pgm(lmap, k, v.dims)
            (overlay_dir / f"{sid}_z{lmap.slices[k].z:03d}.pgm").write_bytes(pgm)

    stats = _densemap_stats(per_subject, hygiene_violations)
    store.dump_json(stats, out / "stats.json")
    _write_correlation_csv(stats["correlations"], out / "correlations.csv")
    _write_subject_csv(per_subject, out / "subjects.csv")
    _augment_report(cfg, stats)
    _log(cfg, f"densemap: {len(per_subject)} subjects -> {out}")
    return stats


def _densemap_stats(per_subject: list[dict], hygiene_violations: int) -> dict:
    fractions = [r["lesion_fraction"] for r in per_subject]
    methods = ["classifier_pct", "laa_pct", "expert1_pct", "expert2_pct", "agree_pct"]
    correlations = []
    rho_by_method = {}
    n = len(per_subject)
    for m in methods:
        values = [r[m] for r in per_subject]
        try:
            rho, p = spearman(values, fractions, method="t" if n >= 10 else "auto")
            correlations.append({"method": m, "reference": "lesion_fraction",
                                 "rho": rho, "p": p, "n": n, "status": "ok"})
            rho_by_method[m] = rho
        except ValueError as exc:
            correlations.append({"method": m, "reference": "lesion_fraction",
                                 "rho": None, "p": None, "n": n,
                                 "status": f"degenerate: {exc}"})
    comparisons = []
    for m in methods[1:]:
        if "classifier_pct" in rho_by_method and m in rho_by_method:
            z, p = fisher_rz(rho_by_method["classifier_pct"], n, rho_by_method[m], n)
            comparisons.append({"a": "classifier_pct", "b": m, "z": z, "p": p})
    dices = [r["dice_experts"] for r in per_subject]
    expected = [r["expected_dice"] for r in per_subject]
    return {
        "n_subjects": n,
        "correlations": correlations,
        "fisher_comparisons": comparisons,
        "dice": {
            "mean_experts": float(np.mean(dices)),
            "mean_expected": float(np.mean(expected)),
            "per_subject": dices,
        },
        "hygiene_violations": hygiene_violations,
        "per_subject": per_subject,
    }


def _write_map_csv(path: Path, lmap) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject_id", "z", "x", "y", "posterior", "label"])
    for row in dm.lesion_map_rows(lmap):
        writer.writerow([row[0], row[1], row[2], row[3], repr(row[4]), row[5]])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_correlation_csv(correlations: list[dict], path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "reference", "rho", "p", "n", "status"])
    for c in correlations:
        writer.writerow([c["method"], c["reference"],
                         repr(c["rho"]) if c["rho"] is not None else "",
                         repr(c["p"]) if c["p"] is not None else "", c["n"], c["status"]])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_subject_csv(per_subject: list[dict], path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = ["subject_id", "lesion_fraction", "label", "classifier_pct", "laa_pct",
            "expert1_pct", "expert2_pct", "agree_pct", "dice_experts",
            "expected_dice", "skipped_centers", "slice_fallback"]
    writer.writerow(cols)
    for r in per_subject:
        writer.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _augment_report(cfg: PipelineConfig, stats: dict) -> None:
    eval_report = cfg.output_dir / f"evaluate-{cfg.variant}" / "report.json"
    if not eval_report.exists():
        return
    report = EvaluationReport.from_dict(store.load_json(eval_report))
    report.correlations = stats["correlations"]
    report.dice_scores = stats["dice"]
    store.dump_json(report.to_dict(), cfg.output_dir / "densemap" / "report.json")


# ---------------------------------------------------------------------------
# report


def cmd_report(cfg: PipelineConfig) -> str:
    """Condense evaluation and dense-map outputs into a markdown summary."""
    lines = ["# Pipeline summary", ""]
    for variant in ("misvm-q", "miles-q"):
        path = cfg.output_dir / f"evaluate-{variant}" / "report.json"
        if not path.exists():
            continue
        rep = EvaluationReport.from_dict(store.load_json(path))
        agg = rep.aggregate
        lines += [
            f"## {variant} / {rep.schema_id}", "",
            "| fold | kernel | C | q | AUCx100 | Sx100 |",
            "|---|---|---|---|---|---|",
        ]
        for fr in rep.folds:
            detail = fr.params.get("degree", fr.params.get("sigma", ""))
            lines.append(
                f"| {fr.fold} | {fr.params['kernel']}:{detail} | {fr.params['C']:g} "
                f"| {fr.params['q']:g} | {100 * fr.bag_auc:.1f} | {100 * fr.separability:.1f} |"
            )
        lines += [
            "",
            f"mean AUCx100 = {100 * agg['mean_bag_auc']:.1f} +- {100 * agg['sd_bag_auc']:.1f}; "
            f"mean Sx100 = {100 * agg['mean_separability']:.1f}",
            f"hygiene: {rep.hygiene_violations} violations in {rep.hygiene_events} checks",
            "",
        ]
    stats_path = cfg.output_dir / "densemap" / "stats.json"
    if stats_path.exists():
        stats = store.load_json(stats_path)
        lines += ["## dense-map correlations (vs lesion fraction)", "",
                  "| method | rho | p | status |", "|---|---|---|---|"]
        for c in stats["correlations"]:
            rho = f"{c['rho']:.3f}" if c["rho"] is not None else "-"
            p = f"{c['p']:.2e}" if c["p"] is not None else "-"
            lines.append(f"| {c['method']} | {rho} | {p} | {c['status']} |")
        lines += ["", f"expert Dice mean = {stats['dice']['mean_experts']:.3f} "
                      f"(expected {stats['dice']['mean_expected']:.3f})", ""]
    text = "\n".join(lines)
    out = cfg.output_dir / "summary.md"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    _log(cfg, f"report -> {out}")
    return text


# ---------------------------------------------------------------------------
# click wiring


def _load(config_path: str, seed: int | None, workers: int | None,
          schema: str | None, variant: str | None) -> PipelineConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if workers is not None:
        cfg = dataclasses.replace(cfg, workers=max(1, workers))
    if schema is not None:
        cfg = dataclasses.replace(cfg, features=dataclasses.replace(cfg.features, schema=schema))
    if variant is not None:
        cfg = dataclasses.replace(cfg, variant=variant)
    return cfg


_common = [
    click.option("--config", "config_path", required=True, type=click.Path(), help="YAML config"),
    click.option("--seed", type=int, default=None, help="override the master seed"),
    click.option("--workers", type=int, default=None, help="worker process count"),
    click.option("--schema", type=click.Choice(["cooc", "gauss", "both"]), default=None),
    click.option("--variant", type=click.Choice(["misvm-q", "miles-q"]), default=None),
]


def _with_common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
def cli():
    """Weakly supervised lesion detection pipeline."""


@cli.command("phantom-cohort")
@_with_common
def _phantom_cohort(config_path, seed, workers, schema, variant):
    cmd_phantom_cohort(_load(config_path, seed, workers, schema, variant))


@cli.command("extract")
@_with_common
def _extract(config_path, seed, workers, schema, variant):
    cmd_extract(_load(config_path, seed, workers, schema, variant))


@cli.command("evaluate")
@_with_common
def _evaluate(config_path, seed, workers, schema, variant):
    cfg = _load(config_path, seed, workers, schema, variant)
    report = cmd_evaluate(cfg)
    click.echo(f"mean bag AUC: {report.aggregate['mean_bag_auc']:.3f}")


@cli.command("densemap")
@_with_common
@click.option("--model-dir", type=click.Path(), default=None,
              help="score all subjects with one bundle instead of per-fold models")
def _densemap(config_path, seed, workers, schema, variant, model_dir):
    cmd_densemap(_load(config_path, seed, workers, schema, variant), model_dir=model_dir)


@cli.command("report")
@_with_common
def _report(config_path, seed, workers, schema, variant):
    click.echo(cmd_report(_load(config_path, seed, workers, schema, variant)))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except click.Abort:
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except (DataError, VolumeIOError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
