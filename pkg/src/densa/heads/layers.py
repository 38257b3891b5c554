""" Minimal numpy layers with hand-derived backward passes. """

from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np


class ParameterStore:
    """
    Ordered mapping of parameter names to float64 arrays.

    Layers only keep parameter names, so every layer built on the same store sees the same values, and copying the
    store copies the model.

    """

    def __init__(self, tensors=None):
        self._tensors = OrderedDict()
        for name, value in (tensors or dict()).items():
            self[name] = value

    def __getitem__(self, name) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name, value):
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            err_msg = f"Parameter '{name}' must be finite."
            raise ValueError(err_msg)
        self._tensors[name] = value

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list:
        return list(self._tensors)

    def copy(self) -> "ParameterStore":
        return ParameterStore({name: value.copy() for name, value in self._tensors.items()})

    def zeros_like(self) -> Dict[str, np.ndarray]:
        """ Gradient slots, one zero array per parameter. """
        return OrderedDict((name, np.zeros_like(value)) for name, value in self._tensors.items())

    def norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(value)) for name, value in self._tensors.items()}

    def equals(self, other) -> bool:
        return self.names() == other.names() and \
            all(np.array_equal(self[name], other[name]) for name in self._tensors)


class Linear:
    """ Affine map y = x W + b over the last axis. """

    def __init__(self, store: ParameterStore, name, n_in, n_out):
        self.store = store
        self.name = name
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.weight_name = f"{name}.weight"
        self.bias_name = f"{name}.bias"
        if self.weight_name not in store:
            store[self.weight_name] = np.zeros((self.n_in, self.n_out))
            store[self.bias_name] = np.zeros(self.n_out)
        elif store[self.weight_name].shape != (self.n_in, self.n_out):
            err_msg = f"Parameter '{self.weight_name}' has shape {store[self.weight_name].shape}, " \
                      f"expected {(self.n_in, self.n_out)}."
            raise ValueError(err_msg)

    @property
    def weight(self) -> np.ndarray:
        return self.store[self.weight_name]

    @property
    def bias(self) -> np.ndarray:
        return self.store[self.bias_name]

    def init(self, rng, zero=False, gain=2.):
        """ He-style normal initialisation of the weights (or all zeros); biases start at zero. """
        if zero:
            self.store[self.weight_name] = np.zeros((self.n_in, self.n_out))
        else:
            self.store[self.weight_name] = rng.normal(0., np.sqrt(gain / self.n_in), size=(self.n_in, self.n_out))
        self.store[self.bias_name] = np.zeros(self.n_out)

    def forward(self, x) -> Tuple[np.ndarray, np.ndarray]:
        if x.shape[-1] != self.n_in:
            err_msg = f"Layer '{self.name}' expects {self.n_in} input channels, got {x.shape[-1]}."
            raise ValueError(err_msg)
        return x @ self.weight + self.bias, x

    def backward(self, cache, grad_y, grads) -> np.ndarray:
        """ Accumulates parameter gradients into `grads` and returns the gradient w.r.t. the input. """
        x = cache
        grads[self.weight_name] += x.reshape(-1, self.n_in).T @ grad_y.reshape(-1, self.n_out)
        grads[self.bias_name] += grad_y.reshape(-1, self.n_out).sum(axis=0)
        return grad_y @ self.weight.T


class Mlp:
    """ Linear, rectifier, linear. """

    def __init__(self, store: ParameterStore, name, n_in, n_hidden, n_out):
        self.name = name
        self.fc1 = Linear(store, f"{name}.fc1", n_in, n_hidden)
        self.fc2 = Linear(store, f"{name}.fc2", n_hidden, n_out)

    def init(self, rng, zero_output=False):
        self.fc1.init(rng)
        self.fc2.init(rng, zero=zero_output, gain=1.)

    def forward(self, x) -> Tuple[np.ndarray, tuple]:
        pre, cache1 = self.fc1.forward(x)
        hidden = np.maximum(pre, 0.)
        y, cache2 = self.fc2.forward(hidden)
        return y, (cache1, pre, cache2)

    def backward(self, cache, grad_y, grads) -> np.ndarray:
        cache1, pre, cache2 = cache
        grad_hidden = self.fc2.backward(cache2, grad_y, grads)
        return self.fc1.backward(cache1, grad_hidden * (pre > 0.), grads)


def sigmoid(x) -> np.ndarray:
    """ Numerically stable logistic function. """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1. / (1. + np.exp(-x[pos]))
    exp_x = np.exp(x[~pos])
    out[~pos] = exp_x / (1. + exp_x)
    return out


def softmax(x, axis=-1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exp_x = np.exp(shifted)
    return exp_x / np.sum(exp_x, axis=axis, keepdims=True)
