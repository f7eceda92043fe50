"""
Central finite-difference verification of the analytic gradients.

Every case builds a scalar function of a few random float64 inputs (usually
a random projection of an operation's output) and compares the gradients
from ``backward`` with central differences.  The error of an input is
max|analytic - numeric| / max(max|analytic|, max|numeric|).
"""

import logging
import math

import numpy as np

from asr import autodiff as ad
from asr import renderer
from asr.config import LossConfig
from asr.errors import ConfigurationError
from asr.model import StructuredLatent
from asr.training import arv, mmse, total_loss

logger = logging.getLogger(__name__)

ELEMENT_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


class _Projection:
    """Fixed random linear functional; the weights are drawn on first use and reused."""

    def __init__(self, rng):
        self.rng = rng
        self.weights = None

    def __call__(self, out):
        if self.weights is None:
            self.weights = self.rng.standard_normal(out.shape)
        return ad.sum(out * ad.Tensor(self.weights, dtype=out.dtype))


def _away_from_zero(rng, shape, low=0.5, high=2.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _tiny_render(rng, scales, image_side=8):
    """Random ellipse variables for every scale and a background color (batch of 2)."""
    inputs = []
    for scale in scales:
        shape = (2, scale.grid_h, scale.grid_w)
        inputs += [
            rng.uniform(0.3, 1.8, size=shape),
            rng.uniform(0.3, 1.8, size=shape),
            rng.uniform(0.2, 6.0, size=shape),
            rng.uniform(0.05, 0.95, size=shape + (3,)),
        ]
    inputs.append(rng.uniform(0.3, 0.95, size=(2, 3)))
    return inputs


def _group(tensors):
    """Split a flat (w, h, d, a, ..., bg) list into per-scale tuples and bg."""
    params = [tuple(tensors[i : i + 4]) for i in range(0, len(tensors) - 1, 4)]
    return params, tensors[-1]


def _case_elementwise(op, make_inputs):
    def build(rng):
        inputs = make_inputs(rng)
        project = _Projection(np.random.default_rng(rng.integers(2**31)))

        def fn(*tensors):
            return project(op(*tensors))

        return fn, inputs

    return build


def _render_case(rng):
    scales = renderer.scale_configs(8, (2, 1))
    cfg = renderer.RenderConfig(sharpness=1.0, image_side=8)
    inputs = _tiny_render(rng, scales)
    weights = rng.standard_normal((2, 3, 8, 8))

    def fn(*tensors):
        params, bg = _group(tensors)
        image, _ = renderer.render_scene(params, bg, scales, cfg)
        return ad.sum(image * weights)

    return fn, inputs


def _mmse_case(rng):
    inputs = [rng.uniform(0, 1, size=(2, 3, 8, 8)), rng.uniform(0, 1, size=(2, 3, 8, 8))]
    return (lambda y, yhat: mmse(y, yhat, margin=2)), inputs


def _arv_case(rng):
    scales = renderer.scale_configs(8, (2, 1))
    cfg = LossConfig(margin=2, scale_weights=(0.6, 0.9), arv_channels=str(rng.choice(["sum", "norm"])))
    inputs = [rng.uniform(0.05, 0.95, size=(2, s.grid_h, s.grid_w, 3)) for s in scales]

    def fn(*appearances):
        latent_scales = []
        for scale, a in zip(scales, appearances):
            shape = (2, scale.grid_h, scale.grid_w)
            ones = ad.Tensor(np.ones(shape), dtype=a.dtype)
            latent_scales.append((ones, ones, ones, a))
        return arv(StructuredLatent(scales=latent_scales, bg=ad.Tensor(np.ones((2, 3)))), cfg)

    return fn, inputs


def _total_loss_case(rng):
    scales = renderer.scale_configs(8, (2, 1))
    render_cfg = renderer.RenderConfig(sharpness=1.0, image_side=8)
    loss_cfg = LossConfig(margin=2, lambda_a=0.5, scale_weights=(0.6, 0.9))
    inputs = _tiny_render(rng, scales)
    target = rng.uniform(0, 1, size=(2, 3, 8, 8))

    def fn(*tensors):
        params, bg = _group(tensors)
        image, _ = renderer.render_scene(params, bg, scales, render_cfg)
        return total_loss(target, image, StructuredLatent(scales=params, bg=bg), loss_cfg, reg_active=True)

    return fn, inputs


def _batchnorm_case(rng):
    inputs = [rng.standard_normal((3, 2, 3, 3)), rng.uniform(0.5, 1.5, size=2), rng.standard_normal(2)]
    weights = rng.standard_normal((3, 2, 3, 3))

    def fn(x, gamma, beta):
        out, _, _ = ad.batchnorm2d(x, gamma, beta, training=True)
        return ad.sum(out * weights)

    return fn, inputs


def _paste_case(rng):
    offsets = [tuple(int(v) for v in rng.integers(-2, 5, size=2)) for _ in range(3)]
    inputs = [rng.standard_normal((2, 3, 2, 3, 3))]
    return _case_elementwise(lambda r: ad.paste(r, offsets, (6, 6)), lambda _: inputs)(rng)


def _grid_sample_case(rng):
    inputs = [rng.standard_normal((2, 2, 5, 5)), rng.uniform(-1.1, 1.1, size=(2, 4, 4, 2))]
    return _case_elementwise(ad.grid_sample_bilinear, lambda _: inputs)(rng)


def _affine_grid_case(rng):
    inputs = [rng.standard_normal((2, 2, 3))]
    return _case_elementwise(lambda theta: ad.affine_grid(theta, (4, 5)), lambda _: inputs)(rng)


CASES = {
    "add": _case_elementwise(ad.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
    "sub": _case_elementwise(ad.sub, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
    "mul": _case_elementwise(ad.mul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "div": _case_elementwise(ad.div, lambda r: [r.standard_normal((3, 4)), _away_from_zero(r, (3, 4))]),
    "pow": _case_elementwise(lambda a: ad.pow(a, 0.75), lambda r: [r.uniform(0.2, 2.0, size=(3, 4))]),
    "sin": _case_elementwise(ad.sin, lambda r: [r.standard_normal((3, 4))]),
    "cos": _case_elementwise(ad.cos, lambda r: [r.standard_normal((3, 4))]),
    "relu": _case_elementwise(ad.relu, lambda r: [_away_from_zero(r, (3, 4), 0.01, 2.0)]),
    "elu": _case_elementwise(ad.elu, lambda r: [_away_from_zero(r, (3, 4), 0.01, 2.0)]),
    "sigmoid": _case_elementwise(ad.sigmoid, lambda r: [r.standard_normal((3, 4)) * 3]),
    "sum": _case_elementwise(lambda a: ad.sum(a, axis=1, keepdims=True), lambda r: [r.standard_normal((3, 4))]),
    "mean": _case_elementwise(lambda a: ad.mean(a, axis=(0, 2)), lambda r: [r.standard_normal((2, 3, 4))]),
    "reshape": _case_elementwise(lambda a: ad.reshape(a, (4, 3)), lambda r: [r.standard_normal((3, 4))]),
    "transpose": _case_elementwise(lambda a: a.transpose(2, 0, 1), lambda r: [r.standard_normal((2, 3, 4))]),
    "getitem": _case_elementwise(lambda a: a[:, [0, 2, 2]], lambda r: [r.standard_normal((3, 4))]),
    "stack": _case_elementwise(lambda a, b: ad.stack([a, b], axis=1), lambda r: [r.standard_normal((3, 2))] * 2),
    "concat": _case_elementwise(
        lambda a, b: ad.concat([a, b], axis=0), lambda r: [r.standard_normal((2, 3)), r.standard_normal((1, 3))]
    ),
    "conv2d": _case_elementwise(
        lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1),
        lambda r: [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)],
    ),
    "maxpool2d": _case_elementwise(lambda x: ad.maxpool2d(x, 2), lambda r: [r.standard_normal((2, 2, 4, 4))]),
    "upsample": _case_elementwise(ad.upsample_nearest_2x, lambda r: [r.standard_normal((2, 2, 3, 3))]),
    "dense": _case_elementwise(
        ad.dense, lambda r: [r.standard_normal((3, 4)), r.standard_normal((2, 4)), r.standard_normal(2)]
    ),
    "batchnorm": _batchnorm_case,
    "grid_sample": _grid_sample_case,
    "affine_grid": _affine_grid_case,
    "paste": _paste_case,
    "render": _render_case,
    "mmse": _mmse_case,
    "arv": _arv_case,
    "total_loss": _total_loss_case,
}

END_TO_END = ("render", "mmse", "arv", "total_loss")


def tolerance(name):
    return END_TO_END_TOLERANCE if name in END_TO_END else ELEMENT_TOLERANCE


def analytic_gradients(fn, inputs):
    tensors = [ad.Tensor(x, requires_grad=True) for x in inputs]
    with ad.Graph():
        out = fn(*tensors)
        out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def numeric_gradients(fn, inputs, eps=1e-6):
    grads = []
    with ad.no_grad():
        for i, x in enumerate(inputs):
            grad = np.zeros_like(x)
            for index in np.ndindex(x.shape):
                values = [np.array(v, copy=True) for v in inputs]

                values[i][index] = x[index] + eps
                plus = fn(*(ad.Tensor(v) for v in values)).item()
                values[i][index] = x[index] - eps
                minus = fn(*(ad.Tensor(v) for v in values)).item()

                grad[index] = (plus - minus) / (2 * eps)
            grads.append(grad)
    return grads


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_case(name, rng, eps=1e-6, precision="f64"):
    """Worst relative error over the inputs of one random instance of case ``name``."""
    with ad.precision(precision):
        fn, inputs = CASES[name](rng)
        inputs = [np.asarray(x, dtype=ad.get_dtype()) for x in inputs]
        analytic = analytic_gradients(fn, inputs)
        numeric = numeric_gradients(fn, inputs, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def resolve_ops(ops):
    if ops in (None, "all"):
        return list(CASES)
    names = [op.strip() for op in ops.split(",")] if isinstance(ops, str) else list(ops)
    unknown = [name for name in names if name not in CASES]
    if unknown:
        raise ConfigurationError(f"unknown gradcheck op(s) {unknown} - choose from {sorted(CASES)}")
    return names


def run_gradcheck(ops="all", instances=100, seed=0, eps=1e-6, precision="f64"):
    """Check ``instances`` random instances of each op.

    Returns
    -------
    list of dict
        One row per op: ``op``, ``instances``, ``max_rel_err``, ``tolerance`` and ``passed``.
    """
    rows = []
    for name in resolve_ops(ops):
        rng = np.random.default_rng([seed, list(CASES).index(name)])
        worst = 0.0
        for _ in range(instances):
            err = check_case(name, rng, eps, precision)
            worst = err if math.isnan(err) else max(worst, err)
        passed = bool(worst <= tolerance(name))
        rows.append(
            {"op": name, "instances": instances, "max_rel_err": worst, "tolerance": tolerance(name), "passed": passed}
        )
        logger.debug(f"gradcheck {name}: {worst:.3e}")
    return rows
