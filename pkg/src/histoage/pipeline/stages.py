"""
stages.py
One function per pipeline stage. Each reads its predecessors' artifacts from
the work tree, writes its own, and records both in a stage manifest.
"""
import json
import logging

import numpy as np
import pandas as pd

from histoage.age.attention import out_of_fold_patch_predictions, rank_attention_patches, region_enrichment, top_patches
from histoage.age.bootstrap import bootstrap_fit_predict, format_mae_table, mae, mae_table, spearman
from histoage.cdl.networks import CDLModel, EncoderConfig
from histoage.cdl.training import extract_features, load_model, read_embeddings, save_model, train_cdl, write_embeddings
from histoage.clustering import cluster_slide, combine_all, mean_inertia_curve, read_features, write_features
from histoage.config.settings import PipelineConfig
from histoage.epi.comparison import (
    arm_curves,
    classify_diseases,
    cox_design,
    fit_arm,
    format_accuracy_table,
    hazard_comparison,
    hr_table,
    join_predictions,
    validate_cohort,
)
from histoage.epi.cox import kaplan_meier
from histoage.imaging.tiler import list_slides, load_patch_stack, patch_manifest, quantize, read_slide, save_patch_stack, tile
from histoage.pipeline import report
from histoage.pipeline.artifacts import StageRun, WorkTree, require
from histoage.synth.cohort import gen_subjects, latent_ages, read_cohort, read_truth, spec_from_config, write_cohort, write_truth
from histoage.synth.slides import dominant_region, gen_slides, read_mask
from histoage.utils.errors import DataError, NumericFailure
from histoage.utils.parallel import ordered_map
from histoage.utils.rng import derive_seed, numpy_rng

logger = logging.getLogger(__name__)

MODEL_SCALES = ("S1", "S2")
CURVE_HORIZON_YEARS = 20.0
SURVIVAL_ARMS = ("actual", "predicted")
write_csv = report.write_csv


# ---------------------- Helpers ----------------------

def model_scales(config: PipelineConfig) -> list:
    return [s for s in config.scales if s in MODEL_SCALES]


def primary_scale(config: PipelineConfig) -> str:
    """Scale whose predicted age feeds the downstream disease and survival models."""
    for scale in ("S3", "S1", "S2"):
        if scale in config.scales:
            return scale
    raise DataError("no scale selected")


def input_paths(config: PipelineConfig, tree: WorkTree):
    if config.synth.enabled:
        return tree.slides, tree.cohort
    return config.paths.slides_dir, config.paths.cohort_file


def _load_cohort(config: PipelineConfig, tree: WorkTree, run: StageRun) -> pd.DataFrame:
    _, cohort_path = input_paths(config, tree)
    run.read(cohort_path)
    return validate_cohort(read_cohort(cohort_path))


def _truth(config: PipelineConfig, tree: WorkTree) -> dict | None:
    if config.synth.enabled and tree.truth.exists():
        return read_truth(tree.truth)
    return None


def _gbt_params(config: PipelineConfig) -> dict:
    g = config.gbt
    return {"depth": g.depth, "trees": g.trees, "eta": g.eta, "lam": g.lam, "colsample": g.colsample, "min_child": g.min_child}


# ---------------------- Stages ----------------------

def run_synth(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    with StageRun(tree, "synth", config, clean=[tree / "synth", tree / "truth"]) as run:
        if not config.synth.enabled:
            run.note("generator disabled; external slides and cohort are used")
            logger.info("Synthetic generator disabled - using external inputs")
            return []
        spec = spec_from_config(config.synth)
        cohort, truth = gen_subjects(spec, config.seed)
        run.wrote(write_cohort(cohort, tree.cohort), write_truth(truth, tree.truth))
        if not config.synth.tabular_only:
            paths = gen_slides(cohort, latent_ages(truth), config.seed, tree.slides, tree.masks, spec,
                               size=config.synth.slide_size, ppi=config.synth.ppi)
            run.wrote(tree.slides, tree.masks)
            logger.info(f"Synthetic slides written - {len(paths)}")
        return run.outputs


def _cap_patches(patches: list, limit: int, seed: int, slide_id: str, scale: str) -> list:
    """Keep at most `limit` foreground patches per slide, chosen by a seeded draw."""
    foreground = [i for i, p in enumerate(patches) if p.foreground]
    if limit <= 0 or len(foreground) <= limit:
        return patches
    keep = set(np.asarray(foreground)[np.sort(numpy_rng(seed, "cap", slide_id, scale).choice(len(foreground), limit, replace=False))].tolist())
    for i in foreground:
        if i not in keep:
            patches[i].image = None
    return patches


def run_tile(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    slides_dir, _ = input_paths(config, tree)
    scales = model_scales(config)
    with StageRun(tree, "tile", config, clean=[tree / "patches"]) as run:
        paths = list_slides(require(slides_dir, "tile"))
        if not paths:
            raise DataError(f"no slides found in {slides_dir}")
        run.read(*paths, *[p.with_suffix(".json") for p in paths])

        def work(path):
            slide = read_slide(path)
            per_scale = {}
            for scale in scales:
                patches = tile(slide, scale, min_fraction=config.tiling.min_tissue_fraction)
                patches = _cap_patches(patches, config.tiling.max_patches_per_slide, config.seed, slide.slide_id, scale)
                for p in patches:
                    if p.image is not None:
                        p.image = quantize(p.image)
                per_scale[scale] = patches
            info = {"slide_id": slide.slide_id, "subject_pid": slide.subject_pid, "width_px": slide.width_px,
                    "height_px": slide.height_px, "ppi": slide.resolution_ppi}
            return info, per_scale

        results = ordered_map(work, paths)
        index = pd.DataFrame([info for info, _ in results])
        duplicated = index["slide_id"][index["slide_id"].duplicated()].tolist()
        if duplicated:
            raise DataError(f"duplicate slide ids: {duplicated[:5]}")
        run.wrote(write_csv(index, tree.slide_index))
        for scale in scales:
            patches = [p for _, per_scale in results for p in per_scale[scale]]
            stored = sum(1 for p in patches if p.image is not None)
            if stored == 0:
                logger.warning(f"No foreground patches at scale {scale}")
            run.wrote(save_patch_stack(tree.patch_stack(scale), patches, {"scale_tag": scale}),
                      write_csv(patch_manifest(patches), tree.patch_manifest(scale)))
            logger.info(f"TILED - {scale} - {len(patches)} patches - {stored} stored")
        return run.outputs


def run_pretrain(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    cdl = config.cdl
    with StageRun(tree, "pretrain", config, clean=[tree / "models"]) as run:
        for scale in model_scales(config):
            run.read(tree.patch_stack(scale))
            images, index, _ = load_patch_stack(tree.patch_stack(scale))
            model = CDLModel(EncoderConfig(blocks=cdl.blocks, widths=cdl.widths, dim=config.embedding_dim(scale)),
                             scale_tag=scale, seed=derive_seed(config.seed, "init", scale))
            logger.info(f"PRETRAIN START - {scale} - {len(index)} patches - {model.num_parameters()} parameters")
            result = train_cdl(model, images, index["patch_id"].tolist(), epochs=cdl.epochs, batch_size=cdl.batch_size,
                               lr=cdl.lr, momentum=cdl.momentum, weight_decay=cdl.weight_decay, policy=config.augment,
                               seed=config.seed, collapse_patience=cdl.collapse_patience)
            if not result.losses:
                raise NumericFailure(f"every {scale} training epoch was aborted")
            epochs = [e + 1 for e in range(cdl.epochs) if e not in result.aborted_epochs]
            history = pd.DataFrame({"epoch": epochs, "loss": result.losses, "collapse_std": result.collapse_std, "lr": result.lrs})
            run.wrote(save_model(tree.model(scale), model, result), write_csv(history, tree.training_log(scale)))
            for message in result.warnings:
                run.note(f"{scale}: {message}")
        return run.outputs


def run_embed(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    with StageRun(tree, "embed", config, clean=[tree / "embeddings"]) as run:
        for scale in model_scales(config):
            run.read(tree.model(scale), tree.patch_stack(scale))
            model = load_model(tree.model(scale), scale)
            images, index, _ = load_patch_stack(tree.patch_stack(scale))
            features = extract_features(model, images)
            run.wrote(write_embeddings(tree.embeddings(scale), features, index["patch_id"].tolist(),
                                       index["slide_id"].tolist(), scale))
            logger.info(f"EMBEDDED - {scale} - {features.shape[0]} patches x {features.shape[1]} dims")
        return run.outputs


def run_cluster(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    c = config.cluster
    with StageRun(tree, "cluster", config, clean=[tree / "features"]) as run:
        per_scale = {}
        for scale in model_scales(config):
            run.read(tree.embeddings(scale))
            features, index, _ = read_embeddings(tree.embeddings(scale))
            groups = index.groupby("slide_id", sort=True).indices
            slide_ids = sorted(groups)
            per_scale[scale] = ordered_map(
                lambda sid: cluster_slide(features[groups[sid]], sid, scale, seed=config.seed, k=c.k,
                                          restarts=c.restarts, max_iter=c.max_iter),
                slide_ids,
            )
            run.wrote(write_features(tree.features(scale), per_scale[scale]))
            curve = mean_inertia_curve({sid: features[groups[sid]] for sid in slide_ids}, max_k=c.elbow_max_k,
                                       seed=config.seed, restarts=c.restarts)
            run.wrote(write_csv(curve, tree.inertia(scale)))
            logger.info(f"CLUSTERED - {scale} - {len(slide_ids)} slides")
        if "S3" in config.scales:
            combined = combine_all(per_scale["S1"], per_scale["S2"])
            run.wrote(write_features(tree.features("S3"), combined))
        return run.outputs


def _subject_features(features: list, slide_index: pd.DataFrame) -> pd.DataFrame:
    """Slide vectors mapped to subjects; a subject with several slides gets their mean."""
    owner = dict(zip(slide_index["slide_id"], slide_index["subject_pid"]))
    rows = {}
    for f in features:
        if f.slide_id not in owner:
            raise DataError(f"slide {f.slide_id} is not in the slide index")
        rows.setdefault(owner[f.slide_id], []).append(f.vector)
    pids = sorted(rows)
    matrix = np.stack([np.mean(rows[p], axis=0) for p in pids]) if pids else np.zeros((0, 0))
    frame = pd.DataFrame(matrix, columns=[f"g{i}" for i in range(matrix.shape[1])])
    frame.insert(0, "pid", pids)
    return frame


def run_predict_age(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    with StageRun(tree, "predict-age", config, clean=[tree / "age"]) as run:
        cohort = _load_cohort(config, tree, run)
        run.read(tree.slide_index)
        slide_index = pd.read_csv(tree.slide_index, dtype={"slide_id": str, "subject_pid": str})
        truth = _truth(config, tree)
        latent = latent_ages(truth) if truth else None
        summary = {}
        for scale in config.scales:
            run.read(tree.features(scale))
            subjects = _subject_features(read_features(tree.features(scale)), slide_index)
            data = subjects.merge(cohort[["pid", "sex", "age"]], on="pid", how="inner").sort_values("pid", kind="mergesort")
            missing = len(subjects) - len(data)
            if missing:
                logger.warning(f"{missing} subjects with slides are not in the cohort; left out of {scale}")
            if data.empty:
                raise DataError(f"no subject has both a {scale} slide feature and a cohort record")
            vector_cols = [col for col in data.columns if col.startswith("g")]
            result = bootstrap_fit_predict(data[vector_cols].to_numpy(), data["age"].to_numpy(), data["sex"].tolist(),
                                           pids=data["pid"].tolist(), bootstraps=config.gbt.bootstraps,
                                           seed=derive_seed(config.seed, "age", scale), **_gbt_params(config))
            predictions = result.frame()
            run.wrote(write_csv(predictions, tree.predictions(scale)), write_csv(mae_table(result, scale), tree.mae(scale)))
            stats = {"n": len(predictions), "mae": mae(predictions["predicted_age"], predictions["actual_age"]),
                     "spearman": spearman(predictions["predicted_age"], predictions["actual_age"]),
                     "oob_fallbacks": int((predictions["oob"] == 0).sum())}
            if latent:
                hidden = predictions["pid"].map(latent)
                stats["spearman_latent"] = spearman(predictions["predicted_age"], hidden)
                stats["mae_latent"] = mae(predictions["predicted_age"], hidden)
            summary[scale] = stats
            logger.info(f"AGE PREDICTED - {scale} - MAE {stats['mae']:.2f} - Spearman {stats['spearman']:.3f}")
        tree.age_summary.parent.mkdir(parents=True, exist_ok=True)
        with open(tree.age_summary, "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        run.wrote(tree.age_summary)
        return run.outputs


def _prediction_frame(config: PipelineConfig, tree: WorkTree, run: StageRun) -> pd.DataFrame:
    cohort = _load_cohort(config, tree, run)
    scale = primary_scale(config)
    run.read(tree.predictions(scale))
    predictions = pd.read_csv(tree.predictions(scale), dtype={"pid": str})
    return join_predictions(cohort, predictions)


def run_classify(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    e = config.epi
    with StageRun(tree, "classify", config) as run:
        frame = _prediction_frame(config, tree, run)
        accuracy, probabilities = classify_diseases(frame, folds=e.folds, seed=config.seed, ridge=e.logistic_ridge, max_iter=e.max_newton)
        run.wrote(write_csv(accuracy, tree.accuracy), write_csv(probabilities, tree.disease_probabilities))
        return run.outputs


def run_survive(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    e = config.epi
    with StageRun(tree, "survive", config) as run:
        for stale in (tree.hr_comparison, tree.hr_overlap, tree.kaplan_meier, *[tree.curves(a) for a in SURVIVAL_ARMS]):
            stale.unlink(missing_ok=True)
        grid_step = e.curve_step
        if config.synth.enabled and config.synth.tabular_only:
            frame = _load_cohort(config, tree, run).sort_values("pid", kind="mergesort").reset_index(drop=True)
            fits = {"actual": fit_arm(frame, "actual", lam=e.cox_lambda)}
            table, probabilities = hr_table(fits), None
            run.note("tabular-only cohort: actual-age arm only")
        else:
            frame = _prediction_frame(config, tree, run)
            run.read(tree.disease_probabilities)
            probabilities = pd.read_csv(tree.disease_probabilities, dtype={"pid": str})
            fits, table, overlap = hazard_comparison(frame, probabilities, lam=e.cox_lambda, mode=e.disease_mode)
            run.wrote(write_csv(overlap, tree.hr_overlap))
        run.wrote(write_csv(table, tree.hr_comparison))
        for arm, fit in fits.items():
            X = cox_design(frame, arm, probabilities, e.disease_mode)
            curves = arm_curves(fit, X, frame["sex"], horizon=CURVE_HORIZON_YEARS, step=grid_step)
            run.wrote(write_csv(curves[["stratum", "t", "survival"]], tree.curves(arm)))
        km = []
        for sex, part in frame.groupby("sex", sort=True):
            curve = kaplan_meier(part["followup_years"], part["event"])
            curve.insert(0, "stratum", sex)
            km.append(curve)
        run.wrote(write_csv(pd.concat(km, ignore_index=True), tree.kaplan_meier))
        return run.outputs


def attention_scale(config: PipelineConfig) -> str:
    scales = model_scales(config)
    if not scales:
        raise DataError("attention ranking needs a patch-level scale (S1 or S2)")
    return scales[0]


def _patch_regions(tree: WorkTree, scale: str, patch_ids: list) -> dict:
    manifest = pd.read_csv(tree.patch_manifest(scale), dtype={"slide_id": str, "patch_id": str})
    manifest = manifest.set_index("patch_id").loc[patch_ids]
    regions = {}
    for slide_id, part in manifest.groupby("slide_id", sort=True):
        mask = read_mask(slide_id, tree.masks)
        for patch_id, row in part.iterrows():
            regions[patch_id] = dominant_region(mask, int(row.origin_x), int(row.origin_y), int(row.side_px))
    return regions


def run_attention(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    scale = attention_scale(config)
    with StageRun(tree, "attention", config, clean=[tree / "attention"]) as run:
        cohort = _load_cohort(config, tree, run)
        run.read(tree.embeddings(scale), tree.slide_index)
        features, index, _ = read_embeddings(tree.embeddings(scale))
        slide_index = pd.read_csv(tree.slide_index, dtype={"slide_id": str, "subject_pid": str})
        index = index.assign(pid=index["slide_id"].map(dict(zip(slide_index["slide_id"], slide_index["subject_pid"]))))
        index = index.merge(cohort[["pid", "sex", "age"]], on="pid", how="left")
        known = index["age"].notna().to_numpy()
        if not known.all():
            logger.warning(f"{int((~known).sum())} patches belong to subjects outside the cohort; not ranked")
        index, features = index[known].reset_index(drop=True), features[known]
        predicted = out_of_fold_patch_predictions(features, index["pid"], index["sex"], index["age"],
                                                  folds=config.gbt.attention_folds,
                                                  seed=derive_seed(config.seed, "attention", scale), **_gbt_params(config))
        ranked = rank_attention_patches(index["patch_id"], index["slide_id"], index["pid"], index["sex"], index["age"], predicted)
        run.wrote(write_csv(ranked, tree.ranked(scale)))
        if config.synth.enabled and tree.masks.is_dir():
            run.read(tree.patch_manifest(scale))
            regions = _patch_regions(tree, scale, ranked["patch_id"].tolist())
            region_frame = pd.DataFrame({"patch_id": ranked["patch_id"], "region": ranked["patch_id"].map(regions)})
            enrichment = {region: region_enrichment(ranked, regions, region=region) for region in ("epidermis", "nevus", "collagen")
                          if region in set(regions.values())}
            tree.enrichment.parent.mkdir(parents=True, exist_ok=True)
            with open(tree.enrichment, "w", encoding="utf-8") as f:
                json.dump(enrichment, f, indent=2, sort_keys=True)
            run.wrote(write_csv(region_frame, tree.regions(scale)), tree.enrichment)
        return run.outputs


def run_report(config: PipelineConfig) -> list:
    tree = WorkTree(config.work_dir)
    out = tree.report
    r = config.report
    with StageRun(tree, "report", config, clean=[out]) as run:
        tables = []
        for scale in config.scales:
            run.read(tree.mae(scale))
            tables.append(pd.read_csv(tree.mae(scale), dtype={"age_bin": str}))
        maes = pd.concat(tables, ignore_index=True)
        run.wrote(report.write_table(maes, out / "mae_table.csv", format_mae_table(maes)))

        run.read(tree.accuracy)
        accuracy = pd.read_csv(tree.accuracy)
        run.wrote(report.write_table(accuracy, out / "accuracy_table.csv", format_accuracy_table(accuracy)))

        run.read(tree.hr_comparison)
        hr = pd.read_csv(tree.hr_comparison)
        run.wrote(write_csv(hr, out / "hr_comparison.csv"))
        if r.svg:
            run.wrote(report.write_text(report.hr_svg(hr), out / "hr_comparison.svg"))
        for arm in SURVIVAL_ARMS:
            if not tree.curves(arm).exists():
                continue
            run.read(tree.curves(arm))
            curves = pd.read_csv(tree.curves(arm), dtype={"stratum": str})
            run.wrote(write_csv(curves, out / f"survival_curves_{arm}.csv"))
            if r.svg:
                run.wrote(report.write_text(report.curves_svg(curves, f"Survival ({arm} age and diseases)"),
                                            out / f"survival_curves_{arm}.svg"))

        for scale in model_scales(config):
            run.read(tree.inertia(scale))
            curve = pd.read_csv(tree.inertia(scale))
            run.wrote(write_csv(curve, out / f"inertia_{scale}.csv"))
            if r.svg:
                run.wrote(report.write_text(report.inertia_svg(curve, f"Mean k-means inertia ({scale})"), out / f"inertia_{scale}.svg"))

        scale = primary_scale(config)
        run.read(tree.predictions(scale))
        scatter = pd.read_csv(tree.predictions(scale), dtype={"pid": str})[["pid", "sex", "actual_age", "predicted_age"]]
        run.wrote(write_csv(scatter, out / "age_scatter.csv"))
        if r.svg:
            run.wrote(report.write_text(report.scatter_svg(scatter), out / "age_scatter.svg"))

        patch_scale = attention_scale(config)
        run.read(tree.ranked(patch_scale), tree.patch_stack(patch_scale))
        ranked = pd.read_csv(tree.ranked(patch_scale), dtype={"patch_id": str, "slide_id": str, "pid": str})
        regions = None
        if tree.regions(patch_scale).exists():
            run.read(tree.regions(patch_scale))
            region_frame = pd.read_csv(tree.regions(patch_scale), dtype=str)
            regions = dict(zip(region_frame["patch_id"], region_frame["region"]))
        cells = top_patches(ranked, per_subject=1, limit=r.montage_rows * r.montage_cols)
        images, index, _ = load_patch_stack(tree.patch_stack(patch_scale))
        position = dict(zip(index["patch_id"], range(len(index))))
        wanted = {pid: images[position[pid]] for pid in cells["patch_id"] if pid in position}
        run.wrote(report.emit_montage(cells, wanted, out / "montage.png", r.montage_rows, r.montage_cols, regions))
        return run.outputs


STAGES = {
    "synth": run_synth,
    "tile": run_tile,
    "pretrain": run_pretrain,
    "embed": run_embed,
    "cluster": run_cluster,
    "predict-age": run_predict_age,
    "classify": run_classify,
    "survive": run_survive,
    "attention": run_attention,
    "report": run_report,
}
IMAGE_STAGES = ("tile", "pretrain", "embed", "cluster", "predict-age", "classify", "attention", "report")


def run_all(config: PipelineConfig) -> list:
    outputs = []
    for name, stage in STAGES.items():
        if config.synth.enabled and config.synth.tabular_only and name in IMAGE_STAGES:
            logger.info(f"Stage {name} skipped - tabular-only cohort")
            continue
        outputs.extend(stage(config))
    return outputs
