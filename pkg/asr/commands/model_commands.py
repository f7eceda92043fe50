import json
import logging
import os
import sys

import click
import numpy as np

from asr import autodiff as ad
from asr import datasets, evaluation, gradcheck, training
from asr.commands import experiment_config

logger = logging.getLogger("asrCLI")


@click.command("train")
@click.option(
    "--variant",
    type=click.Choice(training.VARIANTS),
    help="Model variant to train - default = [training] variant.",
)
@click.option("--seed", type=int, help="Run seed - default = the first of [training] seeds.")
@click.option("--data", "data_root", type=click.Path(exists=True, file_okay=False), help="Prepared dataset directory.")
@click.option("--max-epochs", "max_epochs", type=int, help="Epoch limit - default = 55 for incr, 50 otherwise.")
@click.option(
    "--out",
    "out_dir",
    type=click.Path(file_okay=False),
    help="Run directory - default = <root>/stage1/<variant>/seed<seed>.",
)
@click.option("--config", "config_file", type=click.Path(exists=True), help="Experiment configuration (INI).")
@click.pass_context
def model_train(ctx, variant, seed, data_root, max_epochs, out_dir, config_file):
    """
    Train one (variant, seed) run on the train patches, early-stopping on the val patches.
    """
    config = experiment_config(
        ctx, config_file, training__variant=variant, training__max_epochs=max_epochs, data__root=data_root
    )
    variant = config.training.variant
    seed = config.training.seeds[0] if seed is None else seed
    out_dir = out_dir or evaluation.run_dir(config.output.root, "stage1", variant, seed)

    _, grouped = datasets.load_dataset(config.data.root, os.path.join(config.data.root, config.data.manifest))

    config.write(out_dir)
    run = training.RunSpec.from_config(config, variant, seed, out_dir)

    logger.info(f"training {variant} seed {seed} -> {out_dir}")
    with ad.precision(config.training.precision):
        result = training.train(
            run, evaluation.flatten_cases(grouped["train"]), evaluation.flatten_cases(grouped["val"]), config
        )

    logger.info(
        f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.6f}) after {len(result.log)} epochs"
        + (" - stopped early" if result.stopped_early else "")
    )


@click.command("reconstruct")
@click.option("--data", "data_root", type=click.Path(exists=True, file_okay=False), help="Prepared dataset directory.")
@click.option(
    "--subset",
    default="test",
    show_default=True,
    type=click.Choice(datasets.SUBSETS),
    help="Subset whose patches are reconstructed.",
)
@click.option("--samples", type=int, help="Rows of the reconstruction grid - default = [output] recon_samples.")
@click.option(
    "--out", "out_file", type=click.Path(dir_okay=False), help="PNG file - default = <run>/recon_<subset>.png."
)
@click.option("--config", "config_file", type=click.Path(exists=True), help="Experiment configuration (INI).")
@click.argument("run", type=click.Path(exists=True, file_okay=False))
@click.pass_context
def model_reconstruct(ctx, run, data_root, subset, samples, out_file, config_file):
    """
    Reconstruct patches with a trained run, score them and write an image grid.

    [RUN] Run directory holding best.ckpt.

    Grid columns: input, reconstruction, then (ASR) each scale's canvas and the background.
    """
    config = experiment_config(ctx, config_file, data__root=data_root, output__recon_samples=samples)
    _, grouped = datasets.load_dataset(config.data.root, os.path.join(config.data.root, config.data.manifest))

    images = datasets.PatchImages(evaluation.flatten_cases(grouped[subset]))
    if len(images) == 0:
        logger.error(f"The {subset} subset has no patches.")
        sys.exit(1)

    model, _ = training.load_run(run)
    out_file = out_file or os.path.join(run, f"recon_{subset}.png")

    with ad.precision(config.training.precision):
        metrics = evaluation.evaluate_reconstruction(model, images, config.loss.margin, config.training.eval_batch_size)
        evaluation.write_reconstructions(model, images, out_file, config.output.recon_samples)

    logger.info(json.dumps(dict(metrics.as_dict(), subset=subset, patches=len(images)), indent=2, sort_keys=True))
    logger.info(f"reconstruction grid written to {out_file}")


@click.command("gradcheck")
@click.option(
    "--ops",
    default="all",
    show_default=True,
    help=f"Comma-separated operations to check, or all: {', '.join(gradcheck.CASES)}.",
)
@click.option(
    "--precision",
    default="f64",
    show_default=True,
    type=click.Choice(["f64", "f32"]),
    help="Tensor precision of the check.",
)
@click.option("--instances", default=100, show_default=True, type=int, help="Random instances per operation.")
@click.option("--seed", default=0, show_default=True, type=int, help="Seed of the random instances.")
def model_gradcheck(ops, precision, instances, seed):
    """
    Compare analytic gradients with central finite differences.

    Prints the maximum relative error per operation; exits 1 when any exceeds its tolerance.
    """
    rows = gradcheck.run_gradcheck(ops, instances=instances, seed=seed, precision=precision)

    width = max(len(row["op"]) for row in rows)
    logger.info(f"{'op':<{width}}  {'max rel err':>12}  {'tolerance':>9}  status")
    for row in rows:
        status = "ok" if row["passed"] else "FAIL"
        logger.info(f"{row['op']:<{width}}  {row['max_rel_err']:>12.3e}  {row['tolerance']:>9.0e}  {status}")

    failed = [row["op"] for row in rows if not row["passed"]]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
        sys.exit(1)

    worst = max(row["max_rel_err"] for row in rows)
    logger.info(f"all {len(rows)} operations passed (worst {np.format_float_scientific(worst, precision=3)})")
