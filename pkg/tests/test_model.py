import math

import numpy as np
import pytest

from asr import autodiff as ad
from asr import checkpoint
from asr import model as m
from asr.config import ModelConfig
from asr.errors import ConfigurationError, ContractError, DimensionError


def test_default_geometry():
    asr_model = m.AsrModel()
    assert asr_model.ellipse_count == 84
    assert asr_model.latent_size == 504
    assert asr_model.map_sides == [64, 16, 4]


def test_baseline_parameter_count():
    assert m.BaselineModel().parameter_count() == 3612667


def test_asr_forward(tiny_model_config, tiny_images):
    asr_model = m.build_model("asr", tiny_model_config, seed=3)
    reconstruction, latent = m.asr_forward(asr_model, tiny_images[:2])

    assert reconstruction.shape == (2, 3, 32, 32)
    assert reconstruction.data.min() >= 0.0 and reconstruction.data.max() <= 1.0
    assert len(latent.canvases) == 3
    assert latent.to_vector().shape == (2, 6 * (16 + 4 + 1))
    latent.validate()


def test_baseline_forward(tiny_model_config, tiny_images):
    baseline = m.build_model("baseline", tiny_model_config, seed=3)
    reconstruction = m.baseline_forward(baseline, tiny_images[:2])
    assert reconstruction.shape == (2, 3, 32, 32)
    assert baseline.encode(tiny_images[:2]).shape == (2, 12)


def test_same_seed_same_weights(tiny_model_config):
    a = m.build_model("asr", tiny_model_config, seed=9).state_dict()
    b = m.build_model("asr", tiny_model_config, seed=9).state_dict()
    c = m.build_model("asr", tiny_model_config, seed=10).state_dict()

    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_background_biases_start_at_one(tiny_model_config):
    asr_model = m.build_model("asr", tiny_model_config)
    np.testing.assert_array_equal(asr_model.background_block.out.bias.data, np.ones(3))


def test_zero_gate_gives_minimal_ellipses(tiny_model_config, tiny_images):
    asr_model = m.build_model("asr", tiny_model_config)
    maps, _ = asr_model.encode(tiny_images[:2])
    w, h, d, a = m.model_scale(asr_model, maps[1], 1, 0.0)

    np.testing.assert_allclose(w.data, 0.1, rtol=1e-6)
    np.testing.assert_allclose(h.data, 0.1, rtol=1e-6)
    np.testing.assert_array_equal(d.data, 0.0)
    np.testing.assert_array_equal(a.data, 0.0)
    assert a.shape == (2, 2, 2, 3)


def test_gate_outside_unit_interval(tiny_model_config):
    asr_model = m.build_model("asr", tiny_model_config)
    with pytest.raises(ContractError):
        asr_model.set_gates([1.0, 0.5, 1.2])
    with pytest.raises(ContractError):
        asr_model.set_gates([1.0, 0.5])


def test_range_map():
    v = ad.Tensor(np.array([0.0, 1.0, 0.5, 1.0, 1.0, 1.0]).reshape(1, 6, 1, 1))
    w, h, d, a = m.range_map(v)
    assert w.item() == pytest.approx(0.1)
    assert h.item() == pytest.approx(2.0)
    assert d.item() == pytest.approx(math.pi)
    assert a.shape == (1, 1, 1, 3)


def test_structured_latent_vector_round_trip(f64, rng, tiny_model_config):
    asr_model = m.AsrModel(tiny_model_config)
    vector = rng.uniform(0.1, 1.0, size=(3, asr_model.latent_size))
    latent = m.StructuredLatent.from_vector(vector, asr_model.scales)

    np.testing.assert_array_equal(latent.to_vector(), vector)
    assert latent.cells(0).shape == (3, 16, 6)
    assert latent.cells(0)[1, 5, 3] == vector[1, 5 * 6 + 3]

    grid = latent.ellipses(0, 2)
    assert len(grid) == 1 and len(grid[0]) == 1
    assert grid[0][0].w == vector[0, -6]


def test_structured_latent_wrong_length(tiny_model_config):
    with pytest.raises(DimensionError):
        m.StructuredLatent.from_vector(np.zeros((1, 10)), m.AsrModel(tiny_model_config).scales)


def test_structured_latent_validation(tiny_model_config):
    scales = m.AsrModel(tiny_model_config).scales
    vector = np.full((1, 6 * 21), 0.5)
    vector[0, 0] = 3.0
    with pytest.raises(ContractError, match="w outside"):
        m.StructuredLatent.from_vector(vector, scales).validate()


def test_wrong_image_shape(tiny_model_config):
    asr_model = m.build_model("asr", tiny_model_config)
    with pytest.raises(DimensionError, match="32"):
        asr_model(np.zeros((2, 3, 16, 16)))


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        m.build_model("vae")


def test_grid_that_does_not_divide_map():
    with pytest.raises(ConfigurationError):
        m.AsrModel(ModelConfig(image_side=32, grids=(4, 2, 1), conv_channels=(4, 6, 8), convs_per_block=3))


def test_checkpoint_round_trip(tmp_path, tiny_model_config, tiny_images):
    original = m.build_model("asr", tiny_model_config, seed=4).eval()
    path = str(tmp_path / "best.ckpt")
    m.save_model(original, path, epoch=7)

    restored, metadata = m.load_model(path)
    assert metadata["kind"] == "asr"
    assert metadata["epoch"] == 7
    assert not restored.training

    state = restored.state_dict()
    for name, array in original.state_dict().items():
        np.testing.assert_array_equal(state[name], array)

    np.testing.assert_allclose(restored(tiny_images[:2])[0].data, original(tiny_images[:2])[0].data)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ContractError, match="magic"):
        checkpoint.load_checkpoint(str(path))


def test_checkpoint_keeps_float64(tmp_path, rng):
    state = {"a": rng.standard_normal((2, 3)), "b": np.arange(4.0)}
    checkpoint.save_checkpoint(str(tmp_path / "x.ckpt"), state, {"kind": "test"}, precision=8)
    loaded, metadata = checkpoint.load_checkpoint(str(tmp_path / "x.ckpt"))

    assert metadata == {"kind": "test"}
    np.testing.assert_array_equal(loaded["a"], state["a"])
    assert list(loaded) == ["a", "b"]
