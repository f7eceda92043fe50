import numpy as np
import pytest

from asr import autodiff as ad
from asr import layers
from asr.errors import ConfigurationError, ContractError, DimensionError
from asr.optim import Adam, AdamState, adam_step


def test_conv2d_sum_of_ones():
    x = np.ones((1, 1, 3, 3))
    w = np.ones((1, 1, 2, 2))
    out = ad.conv2d(x, w, np.zeros(1))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_allclose(out.data, x, rtol=1e-6)


def test_conv2d_output_extent():
    out = ad.conv2d(np.zeros((2, 3, 9, 9)), np.zeros((5, 3, 5, 5)), np.zeros(5), stride=2, padding=2)
    assert out.shape == (2, 5, 5, 5)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError, match="channel axis"):
        ad.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_grid_sample_identity(f64, rng):
    x = rng.standard_normal((2, 5, 5))
    grid = ad.affine_grid(np.array([[[1.0, 0, 0], [0, 1.0, 0]]]), (5, 5))
    out = ad.grid_sample_bilinear(x, grid.data[0])
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_grid_sample_outside_is_zero(rng):
    x = rng.standard_normal((1, 5, 5))
    grid = np.full((3, 3, 2), 5.0)
    out = ad.grid_sample_bilinear(x, grid)
    np.testing.assert_array_equal(out.data, np.zeros((1, 3, 3)))


def test_grid_sample_bad_grid():
    with pytest.raises(DimensionError):
        ad.grid_sample_bilinear(np.zeros((1, 4, 4)), np.zeros((3, 3, 3)))


def test_sigmoid_zero():
    assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5


def test_batchnorm_normalizes(f64, rng):
    x = 3.0 + 2.0 * rng.standard_normal((16, 2, 8, 8))
    out, mean, var = ad.batchnorm2d(x, np.ones(2), np.zeros(2), training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
    assert mean.shape == var.shape == (2,)


def test_batchnorm_needs_two_samples():
    with pytest.raises(ConfigurationError):
        ad.batchnorm2d(np.zeros((1, 2, 3, 3)), np.ones(2), np.zeros(2), training=True)


def test_maxpool_and_upsample():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    pooled = ad.maxpool2d(x, 2)
    np.testing.assert_array_equal(pooled.data[0, 0], [[5, 7], [13, 15]])
    up = ad.upsample_nearest_2x(pooled)
    assert up.shape == (1, 1, 4, 4)
    assert up.data[0, 0, 1, 1] == 5


def test_backward_sum_gives_ones(rng):
    p = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with ad.Graph():
        ad.sum(p).backward()
    np.testing.assert_array_equal(p.grad, np.ones((3, 4)))


def test_backward_square(f64, rng):
    p = ad.Tensor(rng.standard_normal(5), requires_grad=True)
    with ad.Graph():
        ad.sum(p * p).backward()
    np.testing.assert_allclose(p.grad, 2 * p.data)


def test_backward_shared_input_accumulates(f64):
    p = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Graph():
        ad.sum(p * 3.0 + p).backward()
    np.testing.assert_allclose(p.grad, [4.0, 4.0])


def test_backward_clears_tape():
    p = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Graph() as tape:
        ad.sum(p * p).backward()
        assert len(tape) == 0


def test_backward_needs_scalar():
    p = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Graph():
        with pytest.raises(ContractError, match="scalar"):
            (p * 2.0).backward()


def test_getitem_repeated_index_accumulates(f64):
    p = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with ad.Graph():
        ad.sum(p[[0, 0, 2]]).backward()
    np.testing.assert_allclose(p.grad, [2.0, 0.0, 1.0])


def test_no_grad_records_nothing():
    p = ad.Tensor([1.0], requires_grad=True)
    with ad.Graph() as tape:
        with ad.no_grad():
            out = p * 2.0
        assert len(tape) == 0
        assert not out.requires_grad


def test_precision_switch():
    assert ad.Tensor(1.0).dtype == np.float32
    with ad.precision("f64"):
        assert ad.Tensor(1.0).dtype == np.float64
    assert ad.get_dtype() == np.float32


def test_unknown_precision():
    with pytest.raises(ConfigurationError):
        ad.resolve_precision("f16")


def test_paste_clips_at_borders():
    rasters = np.ones((1, 2, 1, 3, 3))
    out = ad.paste(rasters, [(-1, -1), (3, 3)], (4, 4))
    assert out.data[0, 0, 0, 0] == 1.0
    assert out.data[0, 0, 3, 3] == 1.0
    assert out.data.sum() == 4 + 1


def test_adam_zero_gradient_keeps_parameter():
    p = ad.Tensor([1.5], requires_grad=True)
    adam_step([p], [np.zeros(1)], AdamState())
    assert p.data[0] == pytest.approx(1.5)


def test_adam_first_step_is_lr():
    p = ad.Tensor([1.0], requires_grad=True)
    adam_step([p], [np.ones(1)], AdamState(lr=0.001))
    assert p.data[0] == pytest.approx(0.999, abs=1e-6)


def test_adam_descends_on_square(f64):
    x = ad.Tensor([1.0], requires_grad=True)
    optimizer = Adam([x], lr=0.01)
    values = []
    for _ in range(50):
        optimizer.zero_grad()
        with ad.Graph():
            loss = ad.sum(x * x)
            values.append(loss.item())
            loss.backward()
        optimizer.step()
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_missing_gradient():
    p = ad.Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        adam_step([p], [None], AdamState())


def test_adam_step_without_backward():
    p = ad.Tensor(np.ones(3), requires_grad=True)
    optimizer = Adam([p])
    with pytest.raises(ContractError, match="parameter 0"):
        optimizer.step()
    assert np.array_equal(p.data, np.ones(3))
    assert optimizer.state.step_count == 0


def test_xavier_bound(rng):
    w = layers.xavier_uniform((10000,), 9, 9, rng)
    assert np.abs(w).max() <= np.sqrt(6 / 18) + 1e-6
    assert np.abs(w).max() > 0.9 * np.sqrt(6 / 18)


def test_init_parameters_is_deterministic():
    a = layers.Conv2d(3, 4, 3, bias_init="ones")
    b = layers.Conv2d(3, 4, 3, bias_init="ones")
    layers.init_parameters(a, seed=5)
    layers.init_parameters(b, seed=5)
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    np.testing.assert_array_equal(a.bias.data, np.ones(4))
