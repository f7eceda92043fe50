"""Adam optimizer with bias correction."""

import logging
from dataclasses import dataclass, field

import numpy as np

from asr.errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment estimates and hyperparameters of one Adam optimizer."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """Apply one Adam update in place.

    Parameters
    ----------
    params : list of Tensor
        Parameters to update; their ``data`` arrays are replaced.
    grads : list of numpy.ndarray
        Gradient for each parameter, in the same order.
    state : AdamState
        Optimizer state, advanced by one step.

    Returns
    -------
    list of Tensor
        The updated parameters.
    """
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} parameters but {len(grads)} gradients")

    for index, grad in enumerate(grads):
        if grad is None:
            raise ContractError(f"adam_step: parameter {index} has no gradient - was backward called?")

    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]

    for index, p in enumerate(params):
        if state.m[index].shape != p.data.shape:
            raise ContractError(f"adam_step: moment shape {state.m[index].shape} != parameter shape {p.data.shape}")

    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count

    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.data.dtype)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        m_hat = m / bc1
        v_hat = v / bc2
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)

    return params


class Adam:
    """Adam over a fixed list of parameters, e.g. ``Adam(model.parameters(), lr=0.001)``."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for index, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"Adam.step: parameter {index} (shape {p.shape}) has no gradient")
        adam_step(self.params, [p.grad for p in self.params], self.state)
