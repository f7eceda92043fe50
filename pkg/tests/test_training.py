import json
import os

import numpy as np
import pytest

from asr import autodiff as ad
from asr import datasets, training
from asr.config import LossConfig, ScheduleConfig
from asr.errors import ConfigurationError, ContractError, DimensionError, TrainingDivergedError
from asr.model import StructuredLatent, build_model
from asr.optim import Adam
from asr.renderer import scale_configs


def _latent(scales, a_value=0.0, batch=1):
    vector = np.zeros((batch, 6 * sum(s.cells for s in scales)))
    latent = StructuredLatent.from_vector(vector, scales)
    for _, _, _, a in latent.scales:
        a.data[...] = a_value
    return latent


def test_mmse_identical_images(rng):
    y = rng.uniform(0, 1, (2, 3, 64, 64))
    assert training.mmse(y, y.copy()).item() == 0.0


def test_mmse_ignores_margin(f64, rng):
    y = rng.uniform(0, 1, (1, 3, 64, 64))
    yhat = y.copy()
    yhat[..., :16, :] = rng.uniform(0, 1, (1, 3, 16, 64))
    yhat[..., :, -16:] = 0.0
    assert training.mmse(y, yhat, 16).item() == 0.0


def test_mmse_uniform_offset(f64):
    y = np.full((1, 3, 64, 64), 0.5)
    assert training.mmse(y, y + 0.1, 16).item() == pytest.approx(0.01, abs=1e-12)


def test_mmse_errors():
    with pytest.raises(ConfigurationError):
        training.mmse(np.zeros((1, 3, 32, 32)), np.zeros((1, 3, 32, 32)), 16)
    with pytest.raises(DimensionError, match="shapes differ"):
        training.mmse(np.zeros((1, 3, 32, 32)), np.zeros((1, 3, 16, 16)), 2)


def test_arv_zero_appearance(f64):
    assert training.arv(_latent(scale_configs()), LossConfig()).item() == 0.0


def test_arv_single_location(f64):
    latent = _latent(scale_configs())
    latent.scales[0][3].data[0, 0, 0] = 1.0
    assert training.arv(latent, LossConfig()).item() == pytest.approx(0.6 * 3 / 84, abs=1e-12)


def test_arv_variants(f64):
    latent = _latent(scale_configs())
    latent.scales[2][3].data[0, 1, 1] = 0.25
    norm = LossConfig(arv_channels="norm", arv_normalizer="variables")
    expected = 1.2 * (3 * 0.25**2) ** (0.75 / 2) / 504
    assert training.arv(latent, norm).item() == pytest.approx(expected, abs=1e-12)


def test_arv_is_monotone_and_permutation_invariant(f64, rng):
    scales = scale_configs()
    latent = _latent(scales)
    a = latent.scales[1][3]
    a.data[...] = rng.uniform(0, 1, a.shape)
    base = training.arv(latent, LossConfig()).item()

    a.data[...] = a.data[:, ::-1, ::-1]
    assert training.arv(latent, LossConfig()).item() == pytest.approx(base, abs=1e-12)

    a.data[0, 2, 3, 1] = min(1.0, a.data[0, 2, 3, 1] + 0.1)
    assert training.arv(latent, LossConfig()).item() > base


def test_arv_rejects_absorption_outside_unit_interval():
    with pytest.raises(ContractError):
        training.arv(_latent(scale_configs(), a_value=1.5), LossConfig())


def test_total_loss(f64):
    scales = scale_configs()
    latent = _latent(scales)
    latent.scales[0][3].data[0, 0, 0] = 1.0
    y = np.full((1, 3, 256, 256), 0.5)
    yhat = y + np.sqrt(0.03)
    cfg = LossConfig()

    assert training.total_loss(y, yhat, latent, cfg, True).item() == pytest.approx(0.0301929, abs=1e-7)
    assert training.total_loss(y, yhat, latent, cfg, False).item() == training.mmse(y, yhat, 16).item()
    assert training.total_loss(y, y, latent, cfg, True).item() > 0.0


def test_regularizer_pushes_absorption_down(f64):
    latent = _latent(scale_configs(8, (2, 1)), a_value=0.5)
    a = latent.scales[0][3]
    a.requires_grad = True
    y = np.full((1, 3, 8, 8), 0.5)
    cfg = LossConfig(margin=1, scale_weights=(0.6, 0.9))

    with ad.Graph():
        training.total_loss(y, y, latent, cfg, True).backward()
    assert (a.grad > 0).all()


def test_schedule_table():
    cfg = ScheduleConfig()

    assert training.schedule_step(1, cfg) == (1.0, 0.01, 0.01, False)
    assert training.schedule_step(8, cfg)[1] == pytest.approx(0.01)
    assert training.schedule_step(9, cfg)[1] == pytest.approx(0.11)
    assert training.schedule_step(17, cfg)[1] == pytest.approx(0.91)
    assert training.schedule_step(18, cfg)[1] == 1.0
    assert training.schedule_step(20, cfg)[2] == pytest.approx(0.01)
    assert training.schedule_step(21, cfg)[2] == pytest.approx(0.11)
    assert training.schedule_step(34, cfg)[3] is False
    assert training.schedule_step(35, cfg)[3] is True

    previous = (0.0, 0.0, 0.0)
    for epoch in range(1, 56):
        gates = training.schedule_step(epoch, cfg)[:3]
        assert gates[0] == 1.0
        assert all(p <= g <= 1.0 for p, g in zip(previous, gates))
        previous = gates
    assert previous == (1.0, 1.0, 1.0)


def test_schedule_other_variants():
    cfg = ScheduleConfig()
    assert training.schedule_step(3, cfg, "base") == (1.0, 1.0, 1.0, False)
    assert training.schedule_step(3, cfg, "reg") == (1.0, 1.0, 1.0, True)

    with pytest.raises(ContractError):
        training.schedule_step(0, cfg)


def test_run_spec_from_config(tiny_config):
    run = training.RunSpec.from_config(tiny_config, "incr", 3)
    assert run.max_epochs == 55
    assert run.epoch_size == 8
    assert training.RunSpec.from_config(tiny_config, "baseline").max_epochs == 50

    with pytest.raises(ConfigurationError):
        training.RunSpec(variant="vae")


def test_epoch_sampler_covers_set_before_repeating():
    sampler = training.EpochSampler(10, seed=2)
    assert sorted(sampler.draw(10)) == list(range(10))
    assert np.array_equal(training.EpochSampler(10, 2).draw(25), training.EpochSampler(10, 2).draw(25))


def _run(config, tmp_path, variant="base", **kwargs):
    settings = dict(
        variant=variant,
        seed=1,
        lr=config.training.lr,
        batch_size=config.training.batch_size,
        batches_per_epoch=config.training.batches_per_epoch,
        max_epochs=2,
        patience=20,
        out_dir=str(tmp_path),
    )
    settings.update(kwargs)
    return training.RunSpec(**settings)


def test_train_writes_run_directory(tiny_config, tiny_images, tmp_path):
    result = training.train(_run(tiny_config, tmp_path), tiny_images, tiny_images[:4], tiny_config)

    assert len(result.log) == 2
    assert result.best_epoch in (1, 2)
    assert not result.model.training
    for name in (training.LOG_FILE, training.CHECKPOINT_FILE, training.SUMMARY_FILE, "config.ini"):
        assert os.path.isfile(os.path.join(tmp_path, name))

    rows = training.read_log(os.path.join(tmp_path, training.LOG_FILE))
    assert [row["epoch"] for row in rows] == ["1", "2"]
    assert {"train_loss", "val_loss", "mmse", "arv", "gate_0", "reg_active", "usage_0"} <= set(rows[0])

    with open(os.path.join(tmp_path, training.SUMMARY_FILE)) as src:
        summary = json.load(src)
    assert summary["config_hash"] == tiny_config.config_hash()

    model, metadata = training.load_run(str(tmp_path))
    assert metadata["epoch"] == result.best_epoch
    assert model.kind == "asr"


def test_same_run_same_log(tiny_config, tiny_images, tmp_path):
    first = training.train(_run(tiny_config, tmp_path / "a"), tiny_images, tiny_images[:4], tiny_config)
    second = training.train(_run(tiny_config, tmp_path / "b"), tiny_images, tiny_images[:4], tiny_config)
    assert first.log == second.log


def test_early_stopping_on_frozen_run(tiny_config, tiny_images, tmp_path):
    tiny_config.model.bn_momentum = 0.0
    run = _run(tiny_config, tmp_path, lr=0.0, max_epochs=10, patience=2)
    result = training.train(run, tiny_images, tiny_images[:4], tiny_config)

    assert result.stopped_early
    assert result.best_epoch == 1
    assert len(result.log) == 3
    assert len({row["val_loss"] for row in result.log}) == 1


def test_incremental_run_logs_gates(tiny_config, tiny_images, tmp_path):
    tiny_config.schedule.gate_start_epoch = (0, 1, 5)
    run = _run(tiny_config, tmp_path, variant="incr", max_epochs=2)
    result = training.train(run, tiny_images, tiny_images[:4], tiny_config)

    assert [row["gate_1"] for row in result.log] == pytest.approx([0.01, 0.11])
    assert [row["gate_2"] for row in result.log] == [0.01, 0.01]
    assert not any(row["reg_active"] for row in result.log)
    assert all(row["arv"] > 0 for row in result.log)


def test_best_model_keeps_its_gates(tiny_config, tiny_images, tmp_path):
    tiny_config.schedule.gate_start_epoch = (0, 2, 3)
    run = _run(tiny_config, tmp_path, variant="incr", max_epochs=3)
    result = training.train(run, tiny_images, tiny_images[:4], tiny_config)

    best_row = result.log[result.best_epoch - 1]
    assert result.model.gates == pytest.approx([best_row[f"gate_{j}"] for j in range(3)])

    model, metadata = training.load_run(str(tmp_path))
    assert model.gates == pytest.approx(result.model.gates)
    assert metadata["gates"] == pytest.approx(result.model.gates)

    in_memory = training.evaluate_loss(result.model, tiny_images[:4], tiny_config.loss, False, 8)
    reloaded = training.evaluate_loss(model, tiny_images[:4], tiny_config.loss, False, 8)
    assert in_memory["total"] == pytest.approx(result.best_val_loss, rel=1e-5)
    assert reloaded["total"] == pytest.approx(in_memory["total"], rel=1e-6)


def test_empty_training_set(tiny_config, tiny_images, tmp_path):
    with pytest.raises(ConfigurationError, match="empty"):
        training.train(_run(tiny_config, tmp_path), np.zeros((0, 3, 32, 32)), tiny_images, tiny_config)


@pytest.mark.slow
def test_baseline_descends(tiny_config, tiny_images, tmp_path):
    run = _run(tiny_config, tmp_path, variant="baseline", lr=0.01, max_epochs=10)
    result = training.train(run, tiny_images, tiny_images[:4], tiny_config)
    assert result.log[-1]["mmse"] < result.log[0]["mmse"]


class _NanAfter(datasets.ArrayImages):
    """Image set whose batches turn to NaN after ``good`` loads."""

    def __init__(self, array, good):
        super().__init__(array)
        self.good = good
        self.loads = 0

    def load(self, indices):
        self.loads += 1
        batch = super().load(indices)
        return batch if self.loads <= self.good else np.full_like(batch, np.nan)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_and_keeps_partial_log(tiny_config, tiny_images, tmp_path):
    run = _run(tiny_config, tmp_path, max_epochs=3)
    with pytest.raises(TrainingDivergedError, match="epoch 2, batch 1"):
        training.train(run, _NanAfter(tiny_images, good=2), tiny_images[:4], tiny_config)

    rows = training.read_log(os.path.join(tmp_path, training.LOG_FILE))
    assert [row["epoch"] for row in rows] == ["1"]
    assert os.path.isfile(os.path.join(tmp_path, training.CHECKPOINT_FILE))
    assert not os.path.isfile(os.path.join(tmp_path, training.SUMMARY_FILE))


@pytest.mark.slow
def test_asr_fits_a_fixed_batch(tiny_model_config, tiny_images):
    model = build_model("asr", tiny_model_config, seed=3)
    optimizer = Adam(model.parameters(), lr=0.01)
    x = ad.Tensor(tiny_images[:4])

    losses = []
    for _ in range(50):
        optimizer.zero_grad()
        with ad.Graph():
            yhat, _ = model(x)
            loss = training.mmse(x, yhat, 4)
            losses.append(loss.item())
            loss.backward()
        optimizer.step()

    assert np.mean(losses[-5:]) < 0.9 * losses[0]


@pytest.mark.parametrize("kind", ["asr", "baseline"])
def test_eval_output_does_not_depend_on_batch(f64, tiny_model_config, tiny_images, kind):
    model = build_model(kind, tiny_model_config, seed=2)
    model.train()
    with ad.no_grad():
        model(ad.Tensor(tiny_images))
    model.eval()

    with ad.no_grad():
        together, _ = model(ad.Tensor(tiny_images))
        alone, _ = model(ad.Tensor(tiny_images[2:3]))
        shuffled, _ = model(ad.Tensor(tiny_images[::-1]))

    np.testing.assert_allclose(alone.data[0], together.data[2], rtol=0, atol=1e-10)
    np.testing.assert_allclose(shuffled.data[::-1], together.data, rtol=0, atol=1e-10)
