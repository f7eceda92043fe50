"""
Reverse-mode differentiation over dense numpy arrays.

Operations are recorded eagerly on a tape (``Graph``) as they execute; the
backward pass replays the tape in exact reverse order of recording.  Only the
operations the ASR and Baseline models need are provided.

DocString style: https://www.sphinx-doc.org/en/master/usage/extensions/example_numpy.html
"""

import contextlib
import logging
import threading

import numpy as np

from asr.errors import ConfigurationError, ContractError, DimensionError

logger = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


def _local():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.graphs = [Graph()]
    return _state


def get_dtype():
    """Return the numpy dtype used for newly created tensors."""
    return _local().dtype


def resolve_precision(name):
    """Translate a precision name ("f32"/"f64") or dtype into a numpy dtype."""
    if name in PRECISIONS:
        return PRECISIONS[name]

    try:
        dtype = np.dtype(name).type
    except TypeError:
        raise ConfigurationError(f"unknown precision {name!r} - expected one of {sorted(PRECISIONS)}")

    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported precision {name!r}")

    return dtype


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default tensor precision, e.g. ``with precision("f64"):``."""
    local = _local()
    previous = local.dtype
    local.dtype = resolve_precision(name)
    try:
        yield
    finally:
        local.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable recording; results of operations do not require gradients."""
    local = _local()
    previous = local.grad_enabled
    local.grad_enabled = False
    try:
        yield
    finally:
        local.grad_enabled = previous


def is_grad_enabled():
    return _local().grad_enabled


def current_graph():
    """Return the graph operations are currently recorded on."""
    return _local().graphs[-1]


class Node:
    """One recorded operation: the function (holding its backward rule), its inputs and its output."""

    __slots__ = ("function", "inputs", "output")

    def __init__(self, function, inputs, output):
        self.function = function
        self.inputs = inputs
        self.output = output


class Graph:
    """Tape of recorded operations.

    Nodes are appended in execution order, so every node's inputs were
    produced by earlier nodes (or are leaves).  ``backward`` walks the tape in
    exact reverse order and clears it afterwards.

    A graph can be activated explicitly with ``with Graph() as tape:``;
    otherwise a per-thread default graph is used.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _local().graphs.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        graphs = _local().graphs
        if graphs[-1] is self:
            graphs.pop()

    def __len__(self):
        return len(self.nodes)

    def record(self, function, inputs, output):
        self.nodes.append(Node(function, inputs, output))
        output._graph = self

    def clear(self):
        for node in self.nodes:
            node.output._graph = None
        self.nodes = []

    def backward(self, loss):
        """Populate ``grad`` of every leaf reachable from ``loss``.

        Parameters
        ----------
        loss : Tensor
            Scalar tensor recorded on this graph.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward requires a scalar loss, got shape {shape}")

        if not loss.requires_grad:
            raise ContractError("backward called on a tensor that does not require gradients")

        grads = {id(loss): np.ones_like(loss.data)}

        if loss._graph is None:
            # A leaf loss: d(loss)/d(loss) = 1.
            _accumulate_leaf(loss, grads[id(loss)])
            return

        for node in reversed(self.nodes):
            out_grad = grads.pop(id(node.output), None)

            if out_grad is None:
                continue

            if node.output._retain_grad:
                node.output.grad = out_grad

            input_grads = node.function.backward(out_grad)

            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue

                if grad.shape != tensor.data.shape:
                    grad = _unbroadcast(grad, tensor.data.shape)

                if tensor._graph is None:
                    _accumulate_leaf(tensor, grad)
                elif id(tensor) in grads:
                    grads[id(tensor)] = grads[id(tensor)] + grad
                else:
                    grads[id(tensor)] = grad

        self.clear()


def _accumulate_leaf(tensor, grad):
    grad = np.asarray(grad, dtype=tensor.data.dtype)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad, shape):
    """Sum out broadcast dimensions so that ``grad`` matches ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


class Tensor:
    """Dense array with an optional gradient companion.

    Attributes:
        data (numpy.ndarray): values; float32 by default, float64 under ``precision("f64")``
        requires_grad (bool): whether gradients flow to this tensor
        grad (numpy.ndarray): d(loss)/d(tensor) after ``backward`` (leaves, or tensors with ``retain_grad``)
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data

        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._graph = None
        self._retain_grad = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def retain_grad(self):
        """Keep the gradient of a non-leaf tensor after ``backward``."""
        self._retain_grad = True
        return self

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Back-propagate from this scalar tensor over the graph that recorded it."""
        graph = self._graph if self._graph is not None else current_graph()
        graph.backward(self)

    # Arithmetic.

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # Shape and reductions.

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)


def as_tensor(value, like=None):
    """Wrap constants as tensors (no gradient) using the dtype of ``like`` when given."""
    if isinstance(value, Tensor):
        return value

    dtype = like.data.dtype if isinstance(like, Tensor) else None
    return Tensor(value, dtype=dtype)


class Function:
    """Base class of differentiable operations.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` that maps
    the gradient of the output to one gradient (or None) per tensor input.
    """

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError("forward pass not implemented")

    def backward(self, grad):
        raise NotImplementedError("backward pass not implemented")

    @classmethod
    def apply(cls, *tensors, **kwargs):
        tensors = tuple(as_tensor(t) for t in tensors)
        function = cls()
        out_data = function.forward(*(t.data for t in tensors), **kwargs)

        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)

        if requires_grad:
            current_graph().record(function, tensors, out)

        return out


# Elementwise arithmetic.


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    """Power with a constant exponent.

    For fractional exponents below one the derivative at zero is unbounded;
    it is taken as 0 there so that gradients stay finite.
    """

    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad):
        p = self.exponent
        if p >= 1 or float(p).is_integer():
            local = p * np.power(self.a, p - 1)
        else:
            positive = self.a > 0
            safe = np.where(positive, self.a, 1)
            local = np.where(positive, p * np.power(safe, p - 1), 0)
        return (grad * local,)


class Sin(Function):
    def forward(self, a):
        self.a = a
        return np.sin(a)

    def backward(self, grad):
        return (grad * np.cos(self.a),)


class Cos(Function):
    def forward(self, a):
        self.a = a
        return np.cos(a)

    def backward(self, grad):
        return (-grad * np.sin(self.a),)


def add(a, b):
    return Add.apply(as_tensor(a, b), as_tensor(b, a))


def sub(a, b):
    return Sub.apply(as_tensor(a, b), as_tensor(b, a))


def mul(a, b):
    return Mul.apply(as_tensor(a, b), as_tensor(b, a))


def div(a, b):
    return Div.apply(as_tensor(a, b), as_tensor(b, a))


def pow(a, exponent):
    if isinstance(exponent, Tensor):
        raise ContractError("pow supports constant exponents only")
    return Pow.apply(a, exponent=exponent)


def sin(a):
    return Sin.apply(a)


def cos(a):
    return Cos.apply(a)


# Activations.


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class ELU(Function):
    def forward(self, a, alpha=1.0):
        self.mask = a > 0
        self.alpha = alpha
        self.neg = alpha * np.expm1(np.minimum(a, 0))
        return np.where(self.mask, a, self.neg).astype(a.dtype)

    def backward(self, grad):
        return (grad * np.where(self.mask, 1, self.neg + self.alpha),)


class Sigmoid(Function):
    def forward(self, a):
        # Split by sign so that exp never overflows.
        out = np.empty_like(a)
        positive = a >= 0
        out[positive] = 1 / (1 + np.exp(-a[positive]))
        e = np.exp(a[~positive])
        out[~positive] = e / (1 + e)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


def relu(a):
    return ReLU.apply(a)


def elu(a, alpha=1.0):
    return ELU.apply(a, alpha=alpha)


def sigmoid(a):
    return Sigmoid.apply(a)


# Reductions and shape manipulation.


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = sorted(ax % len(self.shape) for ax in axes)
            for ax in axes:
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        index = self.index if isinstance(self.index, tuple) else (self.index,)
        if all(isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in index):
            # Basic indexing never repeats an element.
            out[self.index] = grad
        else:
            np.add.at(out, self.index, grad)
        return (out,)


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.take(grad, i, axis=self.axis) for i in range(grad.shape[self.axis]))


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def sum(a, axis=None, keepdims=False):
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def stack(tensors, axis=0):
    return Stack.apply(*tensors, axis=axis)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


# Convolution, pooling and dense layers.


def _check_ndim(name, array, ndim, what):
    if array.ndim != ndim:
        raise DimensionError(f"{name}: {what} must have {ndim} axes, got shape {array.shape}")


class Conv2d(Function):
    """Cross-correlation of [N,C,H,W] input with [F,C,kh,kw] weights via im2col."""

    def forward(self, x, weight, bias, stride=1, padding=0):
        _check_ndim("conv2d", x, 4, "input")
        _check_ndim("conv2d", weight, 4, "weight")

        n, c, h, w = x.shape
        f, wc, kh, kw = weight.shape

        if wc != c:
            raise DimensionError(f"conv2d: channel axis (1) mismatch - input has {c}, weight expects {wc}")
        if bias.shape != (f,):
            raise DimensionError(f"conv2d: bias axis (0) must have {f} entries, got shape {bias.shape}")
        if stride < 1:
            raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
        if kh > h + 2 * padding:
            raise DimensionError(f"conv2d: height axis (2) of {h} (+{2 * padding} padding) is smaller than kernel {kh}")
        if kw > w + 2 * padding:
            raise DimensionError(f"conv2d: width axis (3) of {w} (+{2 * padding} padding) is smaller than kernel {kw}")

        ho = (h + 2 * padding - kh) // stride + 1
        wo = (w + 2 * padding - kw) // stride + 1

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]

        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = cols @ weight.reshape(f, -1).T + bias

        self.x_shape, self.padded_shape = x.shape, xp.shape
        self.cols, self.weight = cols, weight
        self.stride, self.padding, self.out_hw = stride, padding, (ho, wo)

        return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(self, grad):
        n, c, h, w = self.x_shape
        f, _, kh, kw = self.weight.shape
        ho, wo = self.out_hw
        s = self.stride

        g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)

        grad_weight = (g.T @ self.cols).reshape(self.weight.shape)
        grad_bias = g.sum(axis=0)

        dcols = (g @ self.weight.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + s * (ho - 1) + 1, s)
                cols = slice(j, j + s * (wo - 1) + 1, s)
                dxp[:, :, rows, cols] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)

        p = self.padding
        grad_x = dxp[:, :, p : p + h, p : p + w] if p else dxp

        return grad_x, grad_weight, grad_bias


def conv2d(x, weight, bias, stride=1, padding=0):
    """2D convolution; output extent floor((H + 2*padding - kh) / stride) + 1."""
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


class MaxPool2d(Function):
    def forward(self, x, kernel=2):
        _check_ndim("maxpool2d", x, 4, "input")
        n, c, h, w = x.shape
        ho, wo = h // kernel, w // kernel

        if ho == 0 or wo == 0:
            raise DimensionError(f"maxpool2d: spatial axes {h}x{w} smaller than kernel {kernel}")

        blocks = x[:, :, : ho * kernel, : wo * kernel].reshape(n, c, ho, kernel, wo, kernel)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)

        self.argmax = blocks.argmax(axis=-1)
        self.x_shape, self.kernel = x.shape, kernel

        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.x_shape
        k = self.kernel
        ho, wo = grad.shape[2], grad.shape[3]

        blocks = np.zeros((n, c, ho, wo, k * k), dtype=grad.dtype)
        np.put_along_axis(blocks, self.argmax[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)

        out = np.zeros(self.x_shape, dtype=grad.dtype)
        out[:, :, : ho * k, : wo * k] = blocks
        return (out,)


def maxpool2d(x, kernel=2):
    """Non-overlapping max pooling (kernel == stride); trailing rows/columns are dropped."""
    return MaxPool2d.apply(x, kernel=kernel)


class UpsampleNearest2x(Function):
    def forward(self, x):
        _check_ndim("upsample_nearest_2x", x, 4, "input")
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h, w = grad.shape
        return (grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def upsample_nearest_2x(x):
    return UpsampleNearest2x.apply(x)


class Dense(Function):
    """Affine map ``x @ weight.T + bias`` for x of shape [N, in] and weight [out, in]."""

    def forward(self, x, weight, bias):
        _check_ndim("dense", x, 2, "input")
        if x.shape[1] != weight.shape[1]:
            raise DimensionError(
                f"dense: feature axis (1) mismatch - input has {x.shape[1]}, weight expects {weight.shape[1]}"
            )
        self.x, self.weight = x, weight
        return x @ weight.T + bias

    def backward(self, grad):
        return grad @ self.weight, grad.T @ self.x, grad.sum(axis=0)


def dense(x, weight, bias):
    return Dense.apply(x, weight, bias)


class BatchNorm2d(Function):
    """Per-channel normalization of [N,C,H,W] input followed by scale ``gamma`` and shift ``beta``.

    In training mode batch statistics are used (and returned through
    ``self.batch_mean`` / ``self.batch_var`` for running-stat updates); in
    evaluation mode the supplied running statistics are constants.
    """

    def forward(self, x, gamma, beta, running_mean=None, running_var=None, training=True, eps=1e-5):
        _check_ndim("batchnorm2d", x, 4, "input")

        if training:
            if x.shape[0] < 2:
                raise ConfigurationError(f"batchnorm2d in training mode needs a batch of at least 2, got {x.shape[0]}")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
        else:
            mean, var = running_mean, running_var

        self.batch_mean, self.batch_var = mean, var
        self.training = training
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = (x - mean[None, :, None, None]) * self.inv_std[None, :, None, None]
        self.gamma = gamma

        return self.xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        grad_gamma = (grad * self.xhat).sum(axis=(0, 2, 3))
        grad_beta = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma[None, :, None, None]
        inv_std = self.inv_std[None, :, None, None]

        if self.training:
            m = grad.shape[0] * grad.shape[2] * grad.shape[3]
            sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dxhat_xhat = (dxhat * self.xhat).sum(axis=(0, 2, 3), keepdims=True)
            grad_x = inv_std / m * (m * dxhat - sum_dxhat - self.xhat * sum_dxhat_xhat)
        else:
            grad_x = dxhat * inv_std

        return grad_x, grad_gamma, grad_beta


def batchnorm2d(x, gamma, beta, running_mean=None, running_var=None, training=True, eps=1e-5):
    """Functional batch normalization; returns (output, batch_mean, batch_var)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)

    function = BatchNorm2d()
    out_data = function.forward(
        x.data, gamma.data, beta.data, running_mean=running_mean, running_var=running_var, training=training, eps=eps
    )
    requires_grad = is_grad_enabled() and any(t.requires_grad for t in (x, gamma, beta))
    out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)

    if requires_grad:
        current_graph().record(function, (x, gamma, beta), out)

    return out, function.batch_mean, function.batch_var


# Sampling and placement.


class GridSampleBilinear(Function):
    """Bilinear sampling of [N_in,C,H,W] input at normalized [N,H',W',2] grid positions.

    Grid entries are (x, y) pairs in [-1, 1] with -1/+1 at the centers of the
    first/last pixels.  Samples outside the raster read zero.  An input with
    N_in == 1 is shared by every grid in the batch.
    """

    def _corner(self, dx, dy):
        """Clipped indices and validity mask of one of the four neighbouring pixels."""
        n_in, _, h, w = self.x_shape
        xs, ys = self.x0 + dx, self.y0 + dy
        valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        return np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1), valid

    def forward(self, x, grid):
        _check_ndim("grid_sample_bilinear", x, 4, "input")
        _check_ndim("grid_sample_bilinear", grid, 4, "grid")

        if grid.shape[-1] != 2:
            raise DimensionError(f"grid_sample_bilinear: grid last axis must have extent 2, got {grid.shape[-1]}")
        if x.shape[0] not in (1, grid.shape[0]):
            raise DimensionError(
                f"grid_sample_bilinear: batch axis (0) mismatch - input {x.shape[0]}, grid {grid.shape[0]}"
            )

        n_in, c, h, w = x.shape
        n = grid.shape[0]

        ix = (grid[..., 0] + 1) * 0.5 * (w - 1)
        iy = (grid[..., 1] + 1) * 0.5 * (h - 1)

        self.x_shape, self.dtype = x.shape, x.dtype
        self.x0 = np.floor(ix).astype(np.int32)
        self.y0 = np.floor(iy).astype(np.int32)
        self.batch = np.zeros((n, 1, 1), dtype=np.int32) if n_in == 1 else np.arange(n, dtype=np.int32)[:, None, None]
        self.scale = (0.5 * (w - 1), 0.5 * (h - 1))

        wx1 = (ix - self.x0).astype(x.dtype)[..., None]
        wy1 = (iy - self.y0).astype(x.dtype)[..., None]
        self.wx1, self.wy1 = wx1, wy1

        # Advanced indices separated by a slice move to the front: values are [N,H',W',C].
        self.values = {}
        for dy in (0, 1):
            for dx in (0, 1):
                xc, yc, valid = self._corner(dx, dy)
                self.values[dy, dx] = x[self.batch, :, yc, xc] * valid[..., None]

        v = self.values
        out = (1 - wy1) * ((1 - wx1) * v[0, 0] + wx1 * v[0, 1]) + wy1 * ((1 - wx1) * v[1, 0] + wx1 * v[1, 1])

        return out.transpose(0, 3, 1, 2)

    def backward(self, grad):
        g = grad.transpose(0, 2, 3, 1)  # [N,H',W',C]
        wx1, wy1 = self.wx1, self.wy1
        wx0, wy0 = 1 - wx1, 1 - wy1

        grad_x = np.zeros(self.x_shape, dtype=self.dtype)
        corner_weights = {(0, 0): wy0 * wx0, (0, 1): wy0 * wx1, (1, 0): wy1 * wx0, (1, 1): wy1 * wx1}

        for (dy, dx), weight in corner_weights.items():
            xc, yc, valid = self._corner(dx, dy)
            np.add.at(grad_x, (self.batch, slice(None), yc, xc), g * weight * valid[..., None])

        v = self.values
        d_ix = wy0 * (v[0, 1] - v[0, 0]) + wy1 * (v[1, 1] - v[1, 0])
        d_iy = wx0 * (v[1, 0] - v[0, 0]) + wx1 * (v[1, 1] - v[0, 1])

        sx, sy = self.scale
        grad_grid = np.stack([(g * d_ix).sum(axis=-1) * sx, (g * d_iy).sum(axis=-1) * sy], axis=-1)

        return grad_x, grad_grid.astype(self.dtype)


def grid_sample_bilinear(x, grid):
    """Bilinearly sample ``x`` at ``grid`` with zero padding.

    Accepts an unbatched input [C,H,W] with grid [H',W',2] (returning
    [C,H',W']) or the batched form [N,C,H,W] with grid [N,H',W',2].
    """
    x, grid = as_tensor(x), as_tensor(grid)

    if grid.ndim >= 1 and grid.shape[-1] != 2:
        raise DimensionError(f"grid_sample_bilinear: grid last axis must have extent 2, got {grid.shape[-1]}")

    if x.ndim == 3 and grid.ndim == 3:
        out = GridSampleBilinear.apply(reshape(x, (1,) + x.shape), reshape(grid, (1,) + grid.shape))
        return reshape(out, out.shape[1:])

    return GridSampleBilinear.apply(x, grid)


class AffineGrid(Function):
    """Normalized sampling grid [N,S,S,2] from [N,2,3] affine matrices (pixel-center aligned)."""

    def forward(self, theta, size):
        _check_ndim("affine_grid", theta, 3, "theta")
        if theta.shape[1:] != (2, 3):
            raise DimensionError(f"affine_grid: theta must be [N,2,3], got {theta.shape}")

        height, width = size
        xs = np.linspace(-1, 1, width, dtype=theta.dtype) if width > 1 else np.zeros(1, dtype=theta.dtype)
        ys = np.linspace(-1, 1, height, dtype=theta.dtype) if height > 1 else np.zeros(1, dtype=theta.dtype)

        base = np.empty((height, width, 3), dtype=theta.dtype)
        base[..., 0] = xs[None, :]
        base[..., 1] = ys[:, None]
        base[..., 2] = 1
        self.base = base

        return np.einsum("hwk,nck->nhwc", base, theta)

    def backward(self, grad):
        return (np.einsum("nhwc,hwk->nck", grad, self.base),)


def affine_grid(theta, size):
    return AffineGrid.apply(theta, size=tuple(size))


class Paste(Function):
    """Sum rasters [N,G,C,S,S] into an [N,C,H,W] canvas at integer top-left offsets, clipping at the borders."""

    def forward(self, rasters, offsets, size):
        _check_ndim("paste", rasters, 5, "rasters")
        if len(offsets) != rasters.shape[1]:
            raise DimensionError(f"paste: {len(offsets)} offsets for {rasters.shape[1]} rasters on axis 1")

        n, _, c, sh, sw = rasters.shape
        height, width = size
        out = np.zeros((n, c, height, width), dtype=rasters.dtype)

        self.regions = []
        for g, (top, left) in enumerate(offsets):
            y0, y1 = max(top, 0), min(top + sh, height)
            x0, x1 = max(left, 0), min(left + sw, width)
            region = None
            if y0 < y1 and x0 < x1:
                region = (slice(y0, y1), slice(x0, x1), slice(y0 - top, y1 - top), slice(x0 - left, x1 - left))
                out[:, :, region[0], region[1]] += rasters[:, g, :, region[2], region[3]]
            self.regions.append(region)

        self.shape = rasters.shape
        return out

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        for g, region in enumerate(self.regions):
            if region is not None:
                out[:, g, :, region[2], region[3]] = grad[:, :, region[0], region[1]]
        return (out,)


def paste(rasters, offsets, size):
    return Paste.apply(rasters, offsets=[tuple(int(v) for v in o) for o in offsets], size=tuple(size))
