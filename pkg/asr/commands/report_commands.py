import json
import logging
import os

import click

from asr import evaluation
from asr.commands import experiment_config
from asr.training import VARIANTS

logger = logging.getLogger("asrCLI")


def _split_list(value, kind=str):
    if value is None:
        return None
    return tuple(kind(part.strip()) for part in value.split(",") if part.strip())


def _log_tables(report):
    for stage, columns in (("stage1", evaluation.RECON_METRICS), ("stage2", evaluation.CLASSIFICATION_METRICS)):
        if not report.get(stage):
            continue
        logger.info(f"{stage}: {'variant':<9} {'seed':>5} " + " ".join(f"{c:>9}" for c in columns))
        for row in report[stage]:
            values = " ".join(f"{row[c]:>9.4f}" for c in columns)
            logger.info(f"{stage}: {row['variant']:<9} {str(row['seed']):>5} {values}")

    top = sorted(report.get("importances_asr", {}).items(), key=lambda item: (-item[1], item[0]))[:5]
    if top:
        logger.info("ASR importances: " + ", ".join(f"{name} {value:.3f}" for name, value in top))


@click.command("evaluate")
@click.option("--variants", help=f"Comma-separated variants - default = [training] variants ({', '.join(VARIANTS)}).")
@click.option("--seeds", help="Comma-separated seeds - default = [training] seeds.")
@click.option("--jobs", type=int, help="Worker processes for Stage 1 runs - default = [training] jobs.")
@click.option("--data", "data_root", type=click.Path(exists=True, file_okay=False), help="Prepared dataset directory.")
@click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), help="Experiment directory - default = [output] root."
)
@click.option("--config", "config_file", type=click.Path(exists=True), help="Experiment configuration (INI).")
@click.pass_context
def report_evaluate(ctx, variants, seeds, jobs, data_root, out_dir, config_file):
    """
    Run the full two-stage experiment and write report.json.

    Finished runs are kept; re-running resumes an interrupted experiment.
    """
    config = experiment_config(
        ctx,
        config_file,
        training__variants=_split_list(variants),
        training__seeds=_split_list(seeds, int),
        training__jobs=jobs,
        data__root=data_root,
        output__root=out_dir,
    )

    report = evaluation.run_experiment(config)

    _log_tables(report)
    logger.info(f"report written to {os.path.join(config.output.root, 'report.json')}")


@click.command("report")
@click.argument("out_dir", type=click.Path(exists=True, file_okay=False))
def report_assemble(out_dir):
    """
    Rebuild the result tables and report.json from the finished runs under OUT_DIR.
    """
    config = None
    config_path = os.path.join(out_dir, "config.ini")
    if os.path.isfile(config_path):
        config = experiment_config(None, config_path)

    report = evaluation.assemble_report(out_dir, config)

    report_path = os.path.join(out_dir, "report.json")
    if os.path.isfile(report_path):
        with open(report_path, encoding="utf-8") as src:
            previous = json.load(src)
        if "class_distribution" in previous:
            report["class_distribution"] = previous["class_distribution"]

    with open(report_path, "w", encoding="utf-8") as out:
        json.dump(report, out, indent=2, sort_keys=True)

    _log_tables(report)
    logger.info(f"report written to {report_path}")
