"""
Trainable building blocks on top of ``asr.autodiff``: a small Module system,
convolution, dense and batch-normalization layers, and parameter
initialization.
"""

import logging
import math

import numpy as np

from asr import autodiff as ad
from asr.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)


class Module:
    """Container of parameters (tensors requiring gradients), buffers and sub-modules.

    Attribute assignment registers parameters and sub-modules in declaration
    order, which fixes the order used by initialization, optimizers and
    checkpoints.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, ad.Tensor) and value.requires_grad:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array)

    def get_buffer(self, name):
        return self._buffers[name]

    def set_buffer(self, name, array):
        if name not in self._buffers:
            raise ContractError(f"unknown buffer {name}")
        self._buffers[name] = np.asarray(array, dtype=self._buffers[name].dtype)

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, module in self._modules.items():
            yield from module.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self):
        for prefix, module in self.named_modules():
            for name, param in module._parameters.items():
                yield (f"{prefix}.{name}" if prefix else name), param

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    def named_buffers(self):
        for prefix, module in self.named_modules():
            for name, buffer in module._buffers.items():
                yield (f"{prefix}.{name}" if prefix else name), buffer

    def parameter_count(self):
        return int(sum(param.size for param in self.parameters()))

    def train(self, mode=True):
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None

    def state_dict(self):
        """Ordered mapping of parameter and buffer names to copies of their arrays."""
        state = {name: param.data.copy() for name, param in self.named_parameters()}
        state.update({name: buffer.copy() for name, buffer in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))

        if missing or unexpected:
            raise ContractError(f"state mismatch - missing {missing}, unexpected {unexpected}")

        for name, param in self.named_parameters():
            if state[name].shape != param.shape:
                raise DimensionError(f"{name}: stored shape {state[name].shape} != model shape {param.shape}")
            param.data = np.array(state[name], dtype=param.data.dtype)

        modules = dict(self.named_modules())
        for name in dict(self.named_buffers()):
            prefix, _, buffer_name = name.rpartition(".")
            modules[prefix].set_buffer(buffer_name, state[name])


class ModuleList(Module):
    """Sequence of modules registered under their index."""

    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for module in modules:
            self.append(module)

    def append(self, module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias_init="normal"):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.bias_init = bias_init
        self.weight = ad.Tensor(np.zeros((out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_channels), requires_grad=True)

    def fans(self):
        receptive = self.kernel_size * self.kernel_size
        return self.in_channels * receptive, self.out_channels * receptive

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dense(Module):
    def __init__(self, in_features, out_features, bias_init="normal"):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.bias_init = bias_init
        self.weight = ad.Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_features), requires_grad=True)

    def fans(self):
        return self.in_features, self.out_features

    def forward(self, x):
        return ad.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Batch normalization with running statistics (momentum 0.1, eps 1e-5 by default)."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        super().__init__()
        self.num_features, self.momentum, self.eps = num_features, momentum, eps
        self.gamma = ad.Tensor(np.ones(num_features), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(num_features), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=ad.get_dtype()))
        self.register_buffer("running_var", np.ones(num_features, dtype=ad.get_dtype()))

    def forward(self, x):
        out, batch_mean, batch_var = ad.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            running_mean=self.get_buffer("running_mean"),
            running_var=self.get_buffer("running_var"),
            training=self.training,
            eps=self.eps,
        )

        if self.training:
            n, _, h, w = x.shape
            count = n * h * w
            unbiased = batch_var * count / max(count - 1, 1)
            m = self.momentum
            self.set_buffer("running_mean", (1 - m) * self.get_buffer("running_mean") + m * batch_mean)
            self.set_buffer("running_var", (1 - m) * self.get_buffer("running_var") + m * unbiased)

        return out


def xavier_uniform(shape, fan_in, fan_out, rng, dtype=None):
    """Glorot-uniform sample: U(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype or ad.get_dtype())


def init_parameters(model, seed=0):
    """Initialize every Conv2d and Dense layer of ``model`` deterministically.

    Weights are Xavier-uniform.  Biases follow the layer's ``bias_init``:
    ``"normal"`` samples N(0, 1), ``"ones"`` fills with 1, ``"zeros"`` with 0.
    Batch-normalization layers are reset to identity scale and zero shift.
    """
    rng = np.random.default_rng(seed)

    for name, module in model.named_modules():
        if isinstance(module, (Conv2d, Dense)):
            fan_in, fan_out = module.fans()
            dtype = module.weight.data.dtype
            module.weight.data = xavier_uniform(module.weight.shape, fan_in, fan_out, rng, dtype)

            if module.bias_init == "normal":
                module.bias.data = rng.standard_normal(module.bias.shape).astype(dtype)
            elif module.bias_init == "ones":
                module.bias.data = np.ones(module.bias.shape, dtype=dtype)
            elif module.bias_init == "zeros":
                module.bias.data = np.zeros(module.bias.shape, dtype=dtype)
            else:
                raise ContractError(f"{name}: unknown bias initialization {module.bias_init!r}")
        elif isinstance(module, BatchNorm2d):
            module.gamma.data = np.ones_like(module.gamma.data)
            module.beta.data = np.zeros_like(module.beta.data)
            module.set_buffer("running_mean", np.zeros(module.num_features))
            module.set_buffer("running_var", np.ones(module.num_features))

    logger.debug(f"init_parameters: seed {seed}, {model.parameter_count()} parameters")
