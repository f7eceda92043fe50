"""
Losses, scale-gate schedule and the training loop for the four variants:

* ``base``     - ASR trained on the masked reconstruction error alone
* ``reg``      - ASR with the appearance regularizer active throughout
* ``incr``     - ASR with incrementally opened scale gates and a late regularizer
* ``baseline`` - the conventional convolutional autoencoder

DocString style: https://www.sphinx-doc.org/en/master/usage/extensions/example_numpy.html
"""

import csv
import dataclasses
import datetime
import json
import logging
import math
import os

import numpy as np

from asr import autodiff as ad
from asr import datasets
from asr.config import ExperimentConfig
from asr.errors import ConfigurationError, ContractError, DimensionError, TrainingDivergedError
from asr.model import build_model, load_model, save_model
from asr.optim import Adam

logger = logging.getLogger(__name__)

VARIANTS = ("base", "reg", "incr", "baseline")
MAX_EPOCHS = {"base": 50, "reg": 50, "incr": 55, "baseline": 50}

LOG_FILE = "train_log.csv"
CHECKPOINT_FILE = "best.ckpt"
SUMMARY_FILE = "summary.json"


def model_kind(variant):
    return "baseline" if variant == "baseline" else "asr"


def log_elapsed(msg, timedelta):
    """Log the elapsed time of a training stage."""
    elapsed = timedelta.total_seconds()
    logger.debug(f"{msg}: elapsed {elapsed:.3f}s")


# Losses.


def mmse(y, yhat, margin=16):
    """Mean squared error over the image interior, ignoring a ``margin``-pixel border.

    Parameters
    ----------
    y, yhat : Tensor or numpy.ndarray
        Images of identical shape [..., 3, H, W].
    margin : int
    """
    y, yhat = ad.as_tensor(y), ad.as_tensor(yhat)

    if y.shape != yhat.shape:
        raise DimensionError(f"mmse: shapes differ - {y.shape} vs {yhat.shape}")

    height, width = y.shape[-2:]
    if margin < 0 or 2 * margin >= min(height, width):
        raise ConfigurationError(f"mmse: margin {margin} leaves no interior in a {height}x{width} image")

    diff = yhat - y
    interior = diff[..., margin : height - margin, margin : width - margin]
    return ad.mean(interior * interior)


def _check_appearance(a, j):
    values = np.asarray(a.data)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ContractError(f"arv: scale {j} absorption outside [0, 1]")


def arv(latent, cfg):
    """Appearance regularization value of a StructuredLatent, averaged over the batch.

    Per image: (1/N) * sum_j w_j * sum_cells s(a), where s is the sum of
    per-channel powers a^alpha (``arv_channels = "sum"``) or the powered
    Euclidean norm |a|^alpha (``"norm"``), and N is the number of grid
    locations (``arv_normalizer = "locations"``) or of ellipse variables
    (``"variables"``).
    """
    if len(cfg.scale_weights) != len(latent.scales):
        raise ContractError(f"arv: {len(cfg.scale_weights)} scale weights for {len(latent.scales)} scales")

    locations = sum(int(np.prod(a.shape[1:3])) for _, _, _, a in latent.scales)
    normalizer = locations if cfg.arv_normalizer == "locations" else 6 * locations
    batch = latent.scales[0][3].shape[0]

    total = None
    for j, ((_, _, _, a), weight) in enumerate(zip(latent.scales, cfg.scale_weights)):
        _check_appearance(a, j)

        if cfg.arv_channels == "sum":
            term = ad.sum(ad.pow(a, cfg.alpha))
        else:
            term = ad.sum(ad.pow(ad.sum(a * a, axis=-1), cfg.alpha / 2))

        term = term * float(weight)
        total = term if total is None else total + term

    return total * (1.0 / (normalizer * batch))


@dataclasses.dataclass
class LossTerms:
    total: object
    mmse: object
    arv: object = None


def loss_terms(y, yhat, latent, cfg, reg_active):
    """Masked reconstruction error, regularizer and their combination."""
    recon = mmse(y, yhat, cfg.margin)

    if latent is None:
        return LossTerms(total=recon, mmse=recon)

    if not reg_active:
        with ad.no_grad():
            return LossTerms(total=recon, mmse=recon, arv=arv(latent, cfg))

    value = arv(latent, cfg)
    return LossTerms(total=recon + cfg.lambda_a * value, mmse=recon, arv=value)


def total_loss(y, yhat, latent, cfg, reg_active):
    """mmse + lambda_a * arv when the regularizer is active, else mmse alone."""
    return loss_terms(y, yhat, latent, cfg, reg_active).total


# Schedule.


def schedule_step(epoch, cfg, variant="incr"):
    """Scale gates and regularizer flag in effect during ``epoch`` (1-based).

    For the incremental variant gate j keeps its initial value up to and
    including its start epoch and then grows by gamma_j per completed epoch,
    clamped at 1.0; the regularizer switches on at ``reg_start_epoch``.
    Other variants train with all gates open.

    Returns
    -------
    tuple
        ``(gate_0, ..., gate_n, reg_active)``
    """
    if epoch < 1:
        raise ContractError(f"epochs are numbered from 1, got {epoch}")

    if variant != "incr":
        return tuple(1.0 for _ in cfg.gate_init) + (variant == "reg",)

    gates = []
    for init, gamma, start in zip(cfg.gate_init, cfg.gamma, cfg.gate_start_epoch):
        gate = float(init)
        for _ in range(int(start) + 1, epoch + 1):
            gate = min(1.0, gate + gamma)
        gates.append(gate)

    return tuple(gates) + (epoch >= cfg.reg_start_epoch,)


# Runs.


@dataclasses.dataclass
class RunSpec:
    variant: str = "base"
    seed: int = 1
    lr: float = 0.001
    batch_size: int = 32
    batches_per_epoch: int = 32
    max_epochs: int = 50
    patience: int = 20
    out_dir: str = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r} - expected one of {VARIANTS}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch normalization)")
        if self.batches_per_epoch < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batches_per_epoch, max_epochs and patience must be positive")

    @property
    def epoch_size(self):
        return self.batch_size * self.batches_per_epoch

    @classmethod
    def from_config(cls, config, variant=None, seed=None, out_dir=None):
        training = config.training
        variant = variant or training.variant
        return cls(
            variant=variant,
            seed=training.seeds[0] if seed is None else seed,
            lr=training.lr,
            batch_size=training.batch_size,
            batches_per_epoch=training.batches_per_epoch,
            max_epochs=training.max_epochs or MAX_EPOCHS.get(variant, 50),
            patience=training.patience,
            out_dir=out_dir,
        )


class EpochSampler:
    """Seeded index stream: concatenated permutations of the training set."""

    def __init__(self, size, seed):
        if size < 1:
            raise ConfigurationError("the training set is empty")
        self.size = size
        self.rng = np.random.default_rng(seed)
        self.pending = np.empty(0, dtype=int)

    def draw(self, count):
        while self.pending.size < count:
            self.pending = np.concatenate([self.pending, self.rng.permutation(self.size)])
        drawn, self.pending = self.pending[:count], self.pending[count:]
        return drawn


@dataclasses.dataclass
class TrainResult:
    model: object
    log: list
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    out_dir: str = None


def _as_float(value):
    return None if value is None else float(value.item())


def evaluate_loss(model, images, loss_cfg, reg_active, batch_size=32):
    """Mean loss terms over an image set in evaluation mode."""
    images = datasets.as_image_set(images)
    if len(images) == 0:
        raise ConfigurationError("the validation set is empty")

    was_training = model.training
    model.eval()
    sums = {"total": 0.0, "mmse": 0.0, "arv": 0.0}

    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            indices = np.arange(start, min(start + batch_size, len(images)))
            x = ad.Tensor(images.load(indices))
            yhat, latent = model(x)
            terms = loss_terms(x, yhat, latent if model.kind == "asr" else None, loss_cfg, reg_active)
            for key in sums:
                value = getattr(terms, key)
                if value is not None:
                    sums[key] += float(value.item()) * len(indices)

    model.train(was_training)
    return {key: value / len(images) for key, value in sums.items()}


def _format(value):
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return f"{value:.8g}"
    return value


def _write_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _format(value) for key, value in row.items()})


def read_log(path):
    with open(path, newline="", encoding="utf-8") as csvfile:
        return list(csv.DictReader(csvfile))


def train(run, train_images, val_images, config=None, model=None):
    """Train one (variant, seed) run with early stopping on the validation loss.

    Parameters
    ----------
    run : RunSpec
    train_images, val_images
        [N,3,S,S] arrays, lists of Patch or image sets from ``asr.datasets``.
    config : ExperimentConfig
        Model, loss, schedule and precision settings.
    model : Module
        Optional pre-built model; by default one is built and initialized from ``run.seed``.

    Returns
    -------
    TrainResult
        The model restored to its best-validation weights and the per-epoch log.
    """
    config = config or ExperimentConfig()
    train_images = datasets.as_image_set(train_images)
    val_images = datasets.as_image_set(val_images)

    if len(train_images) == 0:
        raise ConfigurationError("the training set is empty")
    if len(val_images) == 0:
        raise ConfigurationError("the validation set is empty")

    with ad.precision(config.training.precision):
        if model is None:
            model = build_model(model_kind(run.variant), config.model, seed=run.seed)
        return _train(run, model, train_images, val_images, config)


def _train(run, model, train_images, val_images, config):
    is_asr = model.kind == "asr"
    optimizer = Adam(model.parameters(), lr=run.lr)
    sampler = EpochSampler(len(train_images), run.seed)

    if run.out_dir:
        os.makedirs(run.out_dir, exist_ok=True)
        config.write(run.out_dir)

    log, best_state, best_gates = [], None, None
    best_epoch, best_val = 0, math.inf
    last_finite = None
    stopped_early = False

    logger.info(
        f"train: {run.variant} seed {run.seed}, {model.parameter_count()} parameters, {len(train_images)} images"
    )

    for epoch in range(1, run.max_epochs + 1):
        start_time = datetime.datetime.now()
        *gates, reg_active = schedule_step(epoch, config.schedule, run.variant)
        if is_asr:
            model.set_gates(gates)

        model.train()
        sums = {"train_loss": 0.0, "mmse": 0.0, "arv": 0.0}
        usage = np.zeros(len(gates))

        indices = sampler.draw(run.epoch_size)
        for batch_index in range(run.batches_per_epoch):
            batch = indices[batch_index * run.batch_size : (batch_index + 1) * run.batch_size]
            x = ad.Tensor(train_images.load(batch))

            yhat, latent = model(x)
            terms = loss_terms(x, yhat, latent if is_asr else None, config.loss, reg_active)
            loss = _as_float(terms.total)

            if not math.isfinite(loss):
                ad.current_graph().clear()
                raise TrainingDivergedError(
                    f"{run.variant} seed {run.seed}: loss {loss} at epoch {epoch}, batch {batch_index + 1}"
                    f" (last finite loss {last_finite})"
                )
            last_finite = loss

            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()

            sums["train_loss"] += loss
            sums["mmse"] += _as_float(terms.mmse)
            sums["arv"] += _as_float(terms.arv) or 0.0
            if is_asr:
                usage += latent.mean_absorption()

        val = evaluate_loss(model, val_images, config.loss, reg_active, config.training.eval_batch_size)
        if not math.isfinite(val["total"]):
            raise TrainingDivergedError(
                f"{run.variant} seed {run.seed}: validation loss {val['total']} at epoch {epoch}"
            )

        row = {"epoch": epoch}
        row.update({key: value / run.batches_per_epoch for key, value in sums.items()})
        row["val_loss"] = val["total"]
        row.update({f"gate_{j}": float(g) for j, g in enumerate(gates)})
        row["reg_active"] = bool(reg_active)
        row.update({f"usage_{j}": float(u) / run.batches_per_epoch for j, u in enumerate(usage)})
        log.append(row)

        logger.info(
            f"epoch {epoch}/{run.max_epochs}: train {row['train_loss']:.6f} val {row['val_loss']:.6f}"
            f" mmse {row['mmse']:.6f} arv {row['arv']:.6f} gates {[round(g, 4) for g in gates]} reg {bool(reg_active)}"
        )
        log_elapsed(f"epoch {epoch}", datetime.datetime.now() - start_time)

        if run.out_dir:
            _write_log(log, os.path.join(run.out_dir, LOG_FILE))

        if val["total"] < best_val:
            best_val, best_epoch = val["total"], epoch
            best_state = model.state_dict()
            best_gates = list(gates)
            if run.out_dir:
                path = os.path.join(run.out_dir, CHECKPOINT_FILE)
                save_model(model, path, variant=run.variant, seed=run.seed, epoch=epoch)
        elif epoch - best_epoch >= run.patience:
            logger.info(f"early stopping: no improvement since epoch {best_epoch}")
            stopped_early = True
            break

    if best_state is not None:
        model.load_state_dict(best_state)
        if is_asr:
            model.set_gates(best_gates)
    model.eval()

    result = TrainResult(model, log, best_epoch, best_val, stopped_early, run.out_dir)

    if run.out_dir:
        summary = {
            "variant": run.variant,
            "seed": run.seed,
            "config_hash": config.config_hash(),
            "parameters": model.parameter_count(),
            "epochs": len(log),
            "best_epoch": best_epoch,
            "best_val_loss": best_val,
            "stopped_early": stopped_early,
        }
        with open(os.path.join(run.out_dir, SUMMARY_FILE), "w", encoding="utf-8") as out:
            json.dump(summary, out, indent=2, sort_keys=True)

    return result


def load_run(run_dir):
    """Best checkpoint of a finished run: ``(model, metadata)``."""
    path = os.path.join(run_dir, CHECKPOINT_FILE)
    if not os.path.isfile(path):
        raise ConfigurationError(f"no checkpoint in {run_dir}")
    return load_model(path)
