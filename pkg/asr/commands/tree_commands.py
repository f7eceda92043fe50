import json
import logging
import os
import sys

import click

from asr import autodiff as ad
from asr import classify, datasets, evaluation, training
from asr.commands import experiment_config

logger = logging.getLogger("asrCLI")


@click.command("features")
@click.option("--data", "data_root", type=click.Path(exists=True, file_okay=False), help="Prepared dataset directory.")
@click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), help="Directory for features_<subset>.csv - default = RUN."
)
@click.option("--config", "config_file", type=click.Path(exists=True), help="Experiment configuration (INI).")
@click.argument("run", type=click.Path(exists=True, file_okay=False))
@click.pass_context
def tree_features(ctx, run, data_root, out_dir, config_file):
    """
    Pool a trained run's latents over patch bags into one feature row per bag.

    [RUN] Run directory holding best.ckpt.

    ASR runs give 36 statistics of the ellipse variables; Baseline runs give the
    mean of every latent unit.
    """
    config = experiment_config(ctx, config_file, data__root=data_root)
    out_dir = out_dir or run

    records, grouped = datasets.load_dataset(config.data.root, os.path.join(config.data.root, config.data.manifest))
    bags = evaluation.build_bags(records, grouped, config)

    model, _ = training.load_run(run)
    names = classify.feature_names_for(model)
    os.makedirs(out_dir, exist_ok=True)

    with ad.precision(config.training.precision):
        for subset in datasets.SUBSETS:
            rows = evaluation.bag_features(model, bags[subset], config.training.eval_batch_size)
            path = classify.write_features(rows, names, os.path.join(out_dir, f"features_{subset}.csv"))
            logger.info(f"{subset}: {len(rows)} bags x {len(names)} features -> {path}")

    config.write(out_dir)


@click.command("tree")
@click.option(
    "--features",
    "features_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False),
    help="Directory holding features_train.csv, features_val.csv and features_test.csv.",
)
@click.option(
    "--grid-default",
    "grid_default",
    is_flag=True,
    default=False,
    help="Search the built-in 30-combination grid instead of the [classify] settings.",
)
@click.option("--jobs", type=int, help="Worker processes for cross-validation - default = [training] jobs.")
@click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), help="Output directory - default = the features directory."
)
@click.option("--config", "config_file", type=click.Path(exists=True), help="Experiment configuration (INI).")
@click.pass_context
def tree_fit(ctx, features_dir, grid_default, jobs, out_dir, config_file):
    """
    Select, prune and test a decision tree on bag features.

    Writes tree.txt, tree.dot, tree.json, metrics.json, cv_table.csv and pruning_path.csv.
    """
    config = experiment_config(ctx, config_file, training__jobs=jobs)
    out_dir = out_dir or features_dir

    rows = {}
    names = None
    for subset in datasets.SUBSETS:
        path = os.path.join(features_dir, f"features_{subset}.csv")
        if not os.path.isfile(path):
            logger.error(f"Missing feature file {path} - run 'asr features' first.")
            sys.exit(1)
        rows[subset], subset_names = classify.read_features(path)
        if names is not None and subset_names != names:
            logger.error(f"{path} has different feature columns than features_train.csv.")
            sys.exit(1)
        names = subset_names

    grid = classify.GridSpec() if grid_default else classify.GridSpec.from_config(config.classify)

    result = classify.select_and_evaluate(
        rows["train"],
        rows["val"],
        rows["test"],
        grid,
        feature_names=names,
        folds=config.classify.folds,
        seed=config.classify.seed,
        jobs=config.training.jobs,
    )
    classify.write_selection(result, out_dir)

    logger.info(classify.export_text(result.tree))
    logger.info(json.dumps({"params": result.params, "metrics": result.metrics}, indent=2, sort_keys=True, default=str))
