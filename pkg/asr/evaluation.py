"""
Reconstruction metrics and the two-stage experiment.

Stage 1 trains every (variant, seed) run and scores its reconstructions of
the test patches.  Stage 2 pools each run's latents over bags and selects,
prunes and tests a decision tree on the resulting features.  Results are
written per run, so an interrupted experiment keeps what it finished and
``assemble_report`` can rebuild the tables at any time.

Output layout::

    <out>/config.ini
    <out>/stage1/<variant>/seed<seed>/   train_log.csv best.ckpt summary.json metrics.json recon.png
    <out>/stage1/results.csv
    <out>/stage2/<variant>/seed<seed>/   features_<subset>.csv tree.* metrics.json cv_table.csv pruning_path.csv
    <out>/stage2/results.csv
    <out>/report.json
"""

import concurrent.futures
import csv
import dataclasses
import json
import logging
import os

import numpy as np
from PIL import Image
from skimage.metrics import structural_similarity

from asr import autodiff as ad
from asr import classify, datasets, renderer, training
from asr.errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

RECON_METRICS = ("mae", "mse", "ssim", "mmse")
CLASSIFICATION_METRICS = ("accuracy", "precision", "recall", "f1", "leaves")


@dataclasses.dataclass
class ReconMetrics:
    mae: float
    mse: float
    mmse: float
    ssim: float

    def as_dict(self):
        return dataclasses.asdict(self)


def _check_pair(y, yhat):
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    yhat = np.asarray(getattr(yhat, "data", yhat), dtype=np.float64)

    if y.shape != yhat.shape:
        raise DimensionError(f"compute_metrics: shapes differ - {y.shape} vs {yhat.shape}")
    if y.ndim == 3:
        y, yhat = y[None], yhat[None]
    if y.ndim != 4 or y.shape[1] != 3:
        raise DimensionError(f"compute_metrics: expected [3,H,W] or [B,3,H,W] images, got {y.shape}")

    return y, yhat


def image_ssim(y, yhat):
    """SSIM of one [3,H,W] pair: Gaussian window (sigma 1.5), data range 1, averaged over channels."""
    return float(
        structural_similarity(
            y,
            yhat,
            channel_axis=0,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
        )
    )


def per_image_metrics(y, yhat, margin=16):
    """ReconMetrics of every image of a batch."""
    y, yhat = _check_pair(y, yhat)
    diff = yhat - y
    height, width = y.shape[-2:]

    if margin < 0 or 2 * margin >= min(height, width):
        raise ConfigurationError(f"margin {margin} leaves no interior in a {height}x{width} image")

    results = []
    for k in range(y.shape[0]):
        with ad.no_grad():
            masked = training.mmse(ad.Tensor(y[k], dtype=np.float64), ad.Tensor(yhat[k], dtype=np.float64), margin)
        results.append(
            ReconMetrics(
                mae=float(np.mean(np.abs(diff[k]))),
                mse=float(np.mean(diff[k] ** 2)),
                mmse=float(masked.item()),
                ssim=image_ssim(y[k], yhat[k]),
            )
        )
    return results


def mean_metrics(metrics):
    return ReconMetrics(**{key: float(np.mean([getattr(m, key) for m in metrics])) for key in RECON_METRICS})


def compute_metrics(y, yhat, margin=16):
    """Reconstruction metrics of an image pair (or their mean over a batch)."""
    return mean_metrics(per_image_metrics(y, yhat, margin))


def reconstruct(model, images, batch_size=32):
    """Yield ``(inputs, reconstructions, canvases)`` numpy batches in evaluation mode.

    ``canvases`` is the list of per-scale canvases plus the background canvas
    for ASR models and None for the Baseline.
    """
    images = datasets.as_image_set(images)
    model.eval()

    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            x = images.load(np.arange(start, min(start + batch_size, len(images))))
            yhat, latent = model(ad.Tensor(x))

            canvases = None
            if model.kind == "asr":
                canvases = [np.asarray(c.data) for c in latent.canvases]
                canvases.append(renderer.background_canvas(latent.bg, model.config.image_side))

            yield x, np.asarray(yhat.data), canvases


def evaluate_reconstruction(model, images, margin=16, batch_size=32):
    metrics = []
    for x, yhat, _ in reconstruct(model, images, batch_size):
        metrics.extend(per_image_metrics(x, yhat, margin))
    return mean_metrics(metrics)


def save_reconstruction_grid(inputs, reconstructions, path, canvases=None):
    """One row per sample: input, reconstruction, then each canvas (per scale, background)."""
    columns = [inputs, reconstructions] + list(canvases or [])
    count, _, height, width = inputs.shape

    grid = np.ones((count * (height + 2), len(columns) * (width + 2), 3))
    for r in range(count):
        for c, column in enumerate(columns):
            top, left = r * (height + 2) + 1, c * (width + 2) + 1
            grid[top : top + height, left : left + width] = np.clip(column[r].transpose(1, 2, 0), 0.0, 1.0)

    Image.fromarray(np.round(grid * 255).astype(np.uint8), mode="RGB").save(path, format="PNG")
    return path


def write_reconstructions(model, images, path, samples=8):
    """Reconstruction grid of the first ``samples`` images."""
    images = datasets.as_image_set(images)
    count = min(samples, len(images))
    subset = datasets.ArrayImages(images.load(np.arange(count)))
    x, yhat, canvases = next(reconstruct(model, subset, batch_size=count))
    return save_reconstruction_grid(x, yhat, path, canvases)


def dominant_ellipse(latent, scales, sample=0):
    """The primitive of one sample with the largest absorbed mass (semi-axes times mean absorption).

    Returns
    -------
    dict
        ``scale``, ``cell`` (row, col), ``axes`` (semi-axes in pixels, w * r and h * r) and ``rotation``.
    """
    best_mass, best = -np.inf, None
    for j, (scale, params) in enumerate(zip(scales, latent.scales)):
        w, h, d, a = (np.asarray(t.data)[sample] for t in params)
        mass = w * h * a.mean(axis=-1)
        row, col = np.unravel_index(int(np.argmax(mass)), mass.shape)
        if mass[row, col] * scale.spacing**2 > best_mass:
            best_mass = mass[row, col] * scale.spacing**2
            best = {
                "scale": j,
                "cell": (int(row), int(col)),
                "axes": (float(w[row, col]) * scale.spacing, float(h[row, col]) * scale.spacing),
                "rotation": float(d[row, col]),
            }
    return best


def ellipse_recovery(latent, truths, scales, tolerance=0.2):
    """Fraction of scenes whose dominant primitive has both ground-truth semi-axes within ``tolerance``.

    ``truths`` are the records of ``datasets.single_ellipse_scenes``; axes are compared in sorted order.
    """
    if latent.batch != len(truths):
        raise DimensionError(f"ellipse_recovery: {latent.batch} latents for {len(truths)} scenes")
    if not truths:
        return 0.0

    hits = 0
    for sample, truth in enumerate(truths):
        found = sorted(dominant_ellipse(latent, scales, sample)["axes"])
        expected = sorted((truth["rx"], truth["ry"]))
        hits += all(abs(f - e) <= tolerance * e for f, e in zip(found, expected))
    return hits / len(truths)


# Experiment.


def flatten_cases(cases):
    return [patch for case_id in sorted(cases) for patch in cases[case_id]]


def _dataset(config):
    root = config.data.root
    return datasets.load_dataset(root, os.path.join(root, config.data.manifest))


def build_bags(records, grouped, config):
    """Bags of every subset, drawn once from the configured seed."""
    labels = {r.case_id: r.class_label for r in records}
    bags = {}
    for index, subset in enumerate(datasets.SUBSETS):
        bags[subset] = datasets.make_bags(
            grouped[subset],
            labels,
            bag_size=config.data.bag_size,
            bags_per_case=config.data.bags_per_case,
            seed=config.classify.seed + index,
        )
    return bags


def run_dir(out_dir, stage, variant, seed):
    return os.path.join(out_dir, stage, variant, f"seed{seed}")


def stage1_run(config, variant, seed, out_dir):
    """Train (or resume) one run and score it on the test patches."""
    directory = run_dir(out_dir, "stage1", variant, seed)
    metrics_path = os.path.join(directory, "metrics.json")

    if os.path.isfile(metrics_path):
        logger.info(f"stage 1: {variant} seed {seed} already finished")
        with open(metrics_path, encoding="utf-8") as src:
            return json.load(src)

    _, grouped = _dataset(config)
    test_images = datasets.PatchImages(flatten_cases(grouped["test"]))

    with ad.precision(config.training.precision):
        run = training.RunSpec.from_config(config, variant, seed, directory)
        result = training.train(run, flatten_cases(grouped["train"]), flatten_cases(grouped["val"]), config)
        model = result.model

        metrics = evaluate_reconstruction(model, test_images, config.loss.margin, config.training.eval_batch_size)
        write_reconstructions(model, test_images, os.path.join(directory, "recon.png"), config.output.recon_samples)

    last = result.log[-1]
    entry = {"variant": variant, "seed": seed, "best_epoch": result.best_epoch, "epochs": len(result.log)}
    entry.update(metrics.as_dict())
    entry["usage"] = [last[key] for key in sorted(last) if key.startswith("usage_")]

    with open(metrics_path, "w", encoding="utf-8") as out:
        json.dump(entry, out, indent=2, sort_keys=True)

    logger.info(f"stage 1: {variant} seed {seed}: " + " ".join(f"{k} {entry[k]:.5f}" for k in RECON_METRICS))

    return entry


def bag_features(model, bags, batch_size=None):
    return [classify.extract_features(model, bag, batch_size) for bag in bags]


def stage2_run(config, variant, seed, out_dir, bags, grid=None, jobs=1):
    """Bag features of one trained run and the tree selected on them."""
    directory = run_dir(out_dir, "stage2", variant, seed)
    os.makedirs(directory, exist_ok=True)

    model, _ = training.load_run(run_dir(out_dir, "stage1", variant, seed))
    names = classify.feature_names_for(model)

    rows = {}
    with ad.precision(config.training.precision):
        for subset in datasets.SUBSETS:
            rows[subset] = bag_features(model, bags[subset], config.training.eval_batch_size)
            classify.write_features(rows[subset], names, os.path.join(directory, f"features_{subset}.csv"))

    result = classify.select_and_evaluate(
        rows["train"],
        rows["val"],
        rows["test"],
        grid or classify.GridSpec.from_config(config.classify),
        feature_names=names,
        folds=config.classify.folds,
        seed=config.classify.seed,
        jobs=jobs,
    )
    classify.write_selection(result, directory)

    accuracy = result.metrics["accuracy"]
    logger.info(f"stage 2: {variant} seed {seed}: accuracy {accuracy:.4f}, {result.tree.n_leaves} leaves")

    return result


def _stage1_task(args):
    return stage1_run(*args)


def run_experiment(config, out_dir=None, variants=None, seeds=None, jobs=None):
    """Run both stages for every (variant, seed) and assemble the report.

    Returns
    -------
    dict
        The assembled report (also written to ``<out>/report.json``).
    """
    out_dir = out_dir or config.output.root
    variants = tuple(variants or config.training.variants)
    seeds = tuple(seeds or config.training.seeds)
    jobs = jobs or config.training.jobs

    unknown = [v for v in variants if v not in training.VARIANTS]
    if unknown:
        raise ConfigurationError(f"unknown variant(s) {unknown}")

    os.makedirs(out_dir, exist_ok=True)
    config.write(out_dir)

    tasks = [(config, variant, seed, out_dir) for variant in variants for seed in seeds]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_stage1_task, tasks))
    else:
        for task in tasks:
            _stage1_task(task)

    records, grouped = _dataset(config)
    bags = build_bags(records, grouped, config)

    for variant in variants:
        for seed in seeds:
            stage2_run(config, variant, seed, out_dir, bags)

    report = assemble_report(out_dir, config)
    report["class_distribution"] = datasets.class_distribution(records, grouped, bags)

    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as out:
        json.dump(report, out, indent=2, sort_keys=True)

    return report


# Report assembly.


def _runs(out_dir, stage, filename):
    """(variant, seed, path) of every finished run of a stage, in sorted order."""
    base = os.path.join(out_dir, stage)
    found = []
    if not os.path.isdir(base):
        return found
    for variant in sorted(os.listdir(base)):
        variant_dir = os.path.join(base, variant)
        if not os.path.isdir(variant_dir):
            continue
        for name in sorted(os.listdir(variant_dir)):
            path = os.path.join(variant_dir, name, filename)
            if name.startswith("seed") and os.path.isfile(path):
                found.append((variant, int(name[4:]), path))
    order = {variant: index for index, variant in enumerate(training.VARIANTS)}
    return sorted(found, key=lambda item: (order.get(item[0], len(order)), item[0], item[1]))


def _table_with_means(rows, columns):
    """Rows followed by one "Mean" row per variant."""
    table = []
    for variant in dict.fromkeys(row["variant"] for row in rows):
        members = [row for row in rows if row["variant"] == variant]
        table.extend(members)
        mean = {"variant": variant, "seed": "Mean"}
        mean.update({column: float(np.mean([row[column] for row in members])) for column in columns})
        table.append(mean)
    return table


def _write_csv(rows, columns, path):
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(["variant", "seed"] + list(columns))
        for row in rows:
            values = [f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in columns]
            writer.writerow([row["variant"], row["seed"]] + values)
    return path


def _mean_importances(vectors):
    names = list(vectors[0])
    return {name: float(np.mean([v[name] for v in vectors])) for name in names}


def assemble_report(out_dir, config=None):
    """Rebuild the stage tables and the report from the per-run result files."""
    stage1 = []
    for variant, seed, path in _runs(out_dir, "stage1", "metrics.json"):
        with open(path, encoding="utf-8") as src:
            entry = json.load(src)
        stage1.append(dict(entry, variant=variant, seed=seed))

    stage2, importances = [], {}
    for variant, seed, path in _runs(out_dir, "stage2", "metrics.json"):
        with open(path, encoding="utf-8") as src:
            entry = json.load(src)
        row = {"variant": variant, "seed": seed}
        row.update({key: float(entry["metrics"][key]) for key in CLASSIFICATION_METRICS})
        stage2.append(row)
        importances.setdefault(variant, []).append(entry["importances"])

    if not stage1 and not stage2:
        raise ConfigurationError(f"no finished runs under {out_dir}")

    stage1_table = _table_with_means(stage1, RECON_METRICS)
    stage2_table = _table_with_means(stage2, CLASSIFICATION_METRICS)

    if stage1:
        _write_csv(stage1_table, RECON_METRICS, os.path.join(out_dir, "stage1", "results.csv"))
    if stage2:
        _write_csv(stage2_table, CLASSIFICATION_METRICS, os.path.join(out_dir, "stage2", "results.csv"))

    mean_importances = {variant: _mean_importances(vectors) for variant, vectors in importances.items()}
    pooled = [v for variant, vectors in importances.items() if training.model_kind(variant) == "asr" for v in vectors]

    report = {
        "stage1": stage1_table,
        "stage2": stage2_table,
        "importances": mean_importances,
        "importances_asr": _mean_importances(pooled) if pooled else {},
        "scale_usage": {f"{row['variant']}/seed{row['seed']}": row.get("usage", []) for row in stage1},
    }
    if config is not None:
        report["config_hash"] = config.config_hash()

    return report
