import logging

from asr.config import load_config

logger = logging.getLogger("asrCLI")


def experiment_config(ctx, config_file=None, **overrides):
    """Resolve the experiment configuration for a command.

    A command's own ``--config`` wins over the group's ``--config_file``;
    ``overrides`` are ``section__key=value`` pairs from command options, where
    None means "not given".
    """
    path = config_file or (getattr(ctx, "obj", None) or {}).get("config_file")
    settings = {key.replace("__", "."): value for key, value in overrides.items()}

    config = load_config(path, settings)
    logger.debug(f"configuration {path or 'defaults'} (hash {config.config_hash()})")

    return config
