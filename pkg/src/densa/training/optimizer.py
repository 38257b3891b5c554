""" Adam with L2 weight decay added to the gradient. """

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from densa.heads.layers import ParameterStore


@dataclass
class OptimizerState:
    """ First and second moment estimates per parameter and the number of steps taken. """
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """ Bias-corrected adaptive moment estimation acting in place on a `ParameterStore`. """

    def __init__(self, store: ParameterStore, lr=1e-5, betas=(0.9, 0.99), eps=1e-8, weight_decay=1e-4):
        """
        Constructor of `Adam`.

        Parameters
        ----------
        store : ParameterStore
            Parameters to optimise.
        lr : float, optional
            Learning rate (default 1e-5).
        betas : tuple, optional
            Decay rates of the moment estimates (default (0.9, 0.99)).
        eps : float, optional
            Denominator offset (default 1e-8).
        weight_decay : float, optional
            L2 penalty factor added to the gradient (default 1e-4).

        """
        if lr <= 0:
            err_msg = f"Learning rate must be positive, got {lr}."
            raise ValueError(err_msg)
        if not all(0. <= beta < 1. for beta in betas):
            err_msg = f"Betas must lie in [0, 1), got {betas}."
            raise ValueError(err_msg)
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState(exp_avg=store.zeros_like(), exp_avg_sq=store.zeros_like())

    def step(self, grads):
        """ Applies one update given gradients for (a subset of) the parameters. """
        self.state.step += 1
        t = self.state.step
        bias1 = 1. - self.beta1 ** t
        bias2 = 1. - self.beta2 ** t
        for name, grad in grads.items():
            param = self.store[name]
            grad = grad + self.weight_decay * param
            m = self.state.exp_avg[name]
            v = self.state.exp_avg_sq[name]
            m *= self.beta1
            m += (1. - self.beta1) * grad
            v *= self.beta2
            v += (1. - self.beta2) * grad ** 2
            param -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
