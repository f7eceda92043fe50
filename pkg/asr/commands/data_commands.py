import logging
import os
import sys

import click

from asr import datasets
from asr.commands import experiment_config

logger = logging.getLogger("asrCLI")


def _log_distribution(records, root):
    _, grouped = datasets.load_dataset(root)
    table = datasets.class_distribution(records, grouped)

    for subset, row in table.items():
        counts = ", ".join(f"{label}: {v['examinations']} cases / {v['patches']} patches" for label, v in row.items())
        logger.info(f"{subset:>5} - {counts}")


@click.command("ingest")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Dataset directory - default = [data] root.")
@click.option("--seed", default=0, show_default=True, type=int, help="Seed of the examination-level split.")
@click.option("--config", "config_file", type=click.Path(exists=True), help="Experiment configuration (INI).")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def data_ingest(ctx, manifest, out_dir, seed, config_file):
    """
    Extract tissue patches from the raster exports listed in MANIFEST.

    [MANIFEST] CSV with case_id, class, sex, age, subset and image_path columns;
    an empty subset column lets the split assign it.
    """
    config = experiment_config(ctx, config_file)
    out_dir = out_dir or config.data.root

    records = datasets.ingest(manifest, out_dir, config.data, seed)

    if sum(r.patch_count for r in records) == 0:
        logger.error("No patches passed the tissue filter - check window and occupancy settings.")
        sys.exit(1)

    config.write(out_dir)
    logger.info(f"{len(records)} examinations ingested into {out_dir}")
    _log_distribution(records, out_dir)


@click.command("synth")
@click.option("--classes", type=int, help="Number of synthetic classes (1-3) - default = [data] synth_classes.")
@click.option("--cases", type=int, help="Examinations per class - default = [data] synth_cases_per_class.")
@click.option("--patches", type=int, help="Patches per examination - default = [data] synth_patches_per_case.")
@click.option("--seed", type=int, help="Generator seed - default = [data] synth_seed.")
@click.option("--side", type=int, help="Patch side in pixels - default = [model] image_side.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Dataset directory - default = [data] root.")
@click.option("--config", "config_file", type=click.Path(exists=True), help="Experiment configuration (INI).")
@click.pass_context
def data_synth(ctx, classes, cases, patches, seed, side, out_dir, config_file):
    """
    Generate the class-structured synthetic ellipse dataset.
    """
    config = experiment_config(
        ctx,
        config_file,
        data__synth_classes=classes,
        data__synth_cases_per_class=cases,
        data__synth_patches_per_case=patches,
        data__synth_seed=seed,
        data__root=out_dir,
    )
    data = config.data
    side = side or config.model.image_side

    if os.path.isfile(os.path.join(data.root, data.manifest)):
        logger.warning(f"overwriting the dataset in {data.root}")

    records = datasets.generate_synthetic_dataset(
        data.root,
        classes=data.synth_classes,
        cases_per_class=data.synth_cases_per_class,
        patches_per_case=data.synth_patches_per_case,
        seed=data.synth_seed,
        ratios=data.split_ratios,
        side=side,
    )

    config.write(data.root)
    logger.info(f"{len(records)} synthetic examinations written to {data.root}")
    _log_distribution(records, data.root)
