"""
Experiment configuration and logging setup.

Configuration lives in an INI file (see ``asr/data/experiment.ini`` for the
documented defaults).  Each section maps onto one dataclass; unknown sections
or keys are rejected.
"""

import configparser
import dataclasses
import hashlib
import io
import logging
import os
import sys
import typing
from dataclasses import dataclass, field

from asr.errors import ConfigurationError

# Default package logger - may be re-configured by set_logging.
logger = logging.getLogger("asr")
logger.setLevel(logging.WARNING)

handler = logging.StreamHandler(sys.stdout)
handler.setLevel(logging.WARNING)
log_format = logging.Formatter("%(asctime)s %(levelname)s: %(message)s", "%Y-%m-%d %H:%M:%S")
handler.setFormatter(log_format)
logger.addHandler(handler)

DEFAULTS_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "experiment.ini")

# Read by the command line (log_level, log_file); not part of the experiment.
CLI_SECTION = "logging"


def set_logging(log_file=None, log_level="INFO"):
    """Set the level of the asr package logger and optionally redirect it to a file.

    :param log_file: path of a log file; when given, stream handlers are replaced
    :param log_level: level name (DEBUG, INFO, ...) - invalid or empty names mean INFO
    """
    if log_level is None:
        set_level = logging.INFO
    else:
        # Make sure the caller gave us a valid "name" (INFO/DEBUG/etc) for logging level.
        level = getattr(logging, str(log_level).upper(), None)
        set_level = level if isinstance(level, int) else logging.INFO

    if log_file is None:
        logger.setLevel(set_level)

        for log_handler in logger.handlers:
            log_handler.setLevel(set_level)
    else:
        for log_handler in list(logger.handlers):
            logger.removeHandler(log_handler)

        logger.setLevel(set_level)

        fh = logging.FileHandler(log_file)
        fh.setLevel(set_level)
        fh.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
        logger.addHandler(fh)

    logger.debug(f"set log level: {set_level}")


@dataclass
class DataConfig:
    root: str = "dataset"
    manifest: str = "manifest.csv"
    window: int = 1024
    stride: int = 635
    occupancy_min: float = 0.8
    whiteness: float = 0.88
    patch_side: int = 256
    split_ratios: tuple = (15, 6, 9)
    bag_size: int = 16
    bags_per_case: int = 0
    synth_classes: int = 3
    synth_cases_per_class: int = 12
    synth_patches_per_case: int = 60
    synth_seed: int = 7


@dataclass
class ModelConfig:
    image_side: int = 256
    grids: tuple = (8, 4, 2)
    conv_channels: tuple = (32, 64, 128)
    conv_kernel: int = 5
    conv_stride: int = 2
    convs_per_block: int = 2
    background_hidden: int = 64
    sharpness: float = 1.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    baseline_encoder_channels: tuple = (16, 32, 64, 128, 256, 256)
    baseline_decoder_channels: tuple = (256, 128, 64, 32, 16, 16)
    baseline_latent: int = 200
    baseline_kernel: int = 3


@dataclass
class LossConfig:
    margin: int = 16
    lambda_a: float = 0.009
    alpha: float = 0.75
    scale_weights: tuple = (0.6, 0.9, 1.2)
    arv_channels: str = "sum"
    arv_normalizer: str = "locations"

    def validate(self, image_side=None):
        if self.margin < 0:
            raise ConfigurationError(f"loss margin must be >= 0, got {self.margin}")
        if image_side is not None and 2 * self.margin >= image_side:
            raise ConfigurationError(f"loss margin {self.margin} leaves no interior in a {image_side}-pixel image")
        if not 0.5 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie strictly inside (0.5, 1.0), got {self.alpha}")
        if self.arv_channels not in ("sum", "norm"):
            raise ConfigurationError(f"arv_channels must be 'sum' or 'norm', got {self.arv_channels!r}")
        if self.arv_normalizer not in ("locations", "variables"):
            raise ConfigurationError(f"arv_normalizer must be 'locations' or 'variables', got {self.arv_normalizer!r}")


@dataclass
class ScheduleConfig:
    gate_init: tuple = (1.0, 0.01, 0.01)
    gamma: tuple = (0.0, 0.1, 0.1)
    gate_start_epoch: tuple = (0, 8, 20)
    reg_start_epoch: int = 35


@dataclass
class TrainingConfig:
    variant: str = "base"
    variants: tuple = ("base", "reg", "incr", "baseline")
    seeds: tuple = (1, 2, 3, 4, 5)
    lr: float = 0.001
    batch_size: int = 32
    batches_per_epoch: int = 32
    max_epochs: typing.Optional[int] = None
    patience: int = 20
    precision: str = "f32"
    eval_batch_size: int = 32
    jobs: int = 1


@dataclass
class ClassifyConfig:
    impurities: tuple = ("gini", "entropy")
    max_depths: tuple = (3, 4, 5, 7, None)
    min_samples_leaf: tuple = (5, 10, 20)
    folds: int = 5
    seed: int = 0


@dataclass
class OutputConfig:
    root: str = "runs"
    recon_samples: int = 8


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_ini(self):
        """Canonical INI serialization of every setting."""
        parser = configparser.ConfigParser()
        for name, section in self.sections().items():
            parser[name] = {f.name: _format_value(getattr(section, f.name)) for f in dataclasses.fields(section)}

        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def config_hash(self):
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()[:12]

    def write(self, directory):
        """Echo the resolved configuration into an output directory as config.ini."""
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "config.ini")
        with open(path, "w", encoding="utf-8") as out:
            out.write(self.to_ini())
        return path

    def validate(self):
        self.loss.validate(self.model.image_side)

        if self.training.variant not in ("base", "reg", "incr", "baseline"):
            raise ConfigurationError(f"unknown variant {self.training.variant!r}")
        if len(self.model.grids) != len(self.model.conv_channels):
            raise ConfigurationError("model grids and conv_channels must list one entry per scale")
        if len(self.loss.scale_weights) != len(self.model.grids):
            raise ConfigurationError("loss scale_weights must list one weight per scale")
        for name in ("gate_init", "gamma", "gate_start_epoch"):
            if len(getattr(self.schedule, name)) != len(self.model.grids):
                raise ConfigurationError(f"schedule {name} must list one entry per scale")
        if self.training.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch normalization)")

        return self


def _format_value(value):
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_scalar(text):
    text = text.strip()
    if text.lower() == "none":
        return None
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def _parse_value(text, ftype, default):
    text = text.strip()

    if ftype is tuple or isinstance(default, tuple):
        if not text:
            return ()
        return tuple(_parse_scalar(part) for part in text.split(","))

    if text.lower() == "none" and typing.get_origin(ftype) is typing.Union:
        return None

    if typing.get_origin(ftype) is typing.Union:
        ftype = [arg for arg in typing.get_args(ftype) if arg is not type(None)][0]  # noqa: E721

    if ftype is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")

    return ftype(text)


def load_config(path=None, overrides=None):
    """Build an ExperimentConfig from defaults, an optional INI file and explicit overrides.

    Parameters
    ----------
    path : str
        INI file; missing keys keep their defaults.
    overrides : dict
        ``{"section.key": value}`` entries applied last (command-line values).

    Returns
    -------
    ExperimentConfig
    """
    config = ExperimentConfig()
    sections = config.sections()

    if path is not None:
        if not os.path.isfile(path):
            raise ConfigurationError(f"configuration file {path} not found")

        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigurationError(f"error reading configuration file {path}: {e}")

        for section_name in parser.sections():
            if section_name == CLI_SECTION:
                continue
            if section_name not in sections:
                raise ConfigurationError(f"unknown configuration section [{section_name}] in {path}")

            section = sections[section_name]
            known = {f.name: f for f in dataclasses.fields(section)}

            for key, text in parser.items(section_name):
                if key not in known:
                    raise ConfigurationError(f"unknown key {key!r} in section [{section_name}] of {path}")
                try:
                    value = _parse_value(text, known[key].type, getattr(section, key))
                except ValueError as e:
                    raise ConfigurationError(f"[{section_name}] {key}: {e}")
                setattr(section, key, value)

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section_name, _, key = dotted.partition(".")
        if section_name not in sections or not hasattr(sections[section_name], key):
            raise ConfigurationError(f"unknown configuration setting {dotted}")
        setattr(sections[section_name], key, value)

    logger.debug(f"load_config: {path or 'defaults'} -> hash {config.config_hash()}")

    return config.validate()
