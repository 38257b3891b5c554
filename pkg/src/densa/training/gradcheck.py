""" Central finite-difference verification of analytic gradients. """

import logging
from typing import Callable, Dict

import numpy as np

from densa.heads.model import Heads

logger = logging.getLogger(__name__)


def relative_error(analytic, numeric) -> float:
    """ ||a - n|| / max(||a|| + ||n||, 1e-12) """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12))


def numeric_gradient(loss_fn: Callable[[], float], param, step=1e-5, max_entries=None, seed=0) -> np.ndarray:
    """
    Central differences of a scalar function with respect to the entries of `param`, which is perturbed in place.

    Parameters
    ----------
    loss_fn : callable
        Function without arguments returning the loss for the current value of `param`.
    param : np.ndarray
        Writable parameter array.
    step : float, optional
        Step size (default 1e-5).
    max_entries : int, optional
        Only check a seeded random subset of this many entries; the others are left NaN.
    seed : int, optional
        Seed of the subset draw.

    Returns
    -------
    np.ndarray :
        Numeric gradient of the shape of `param`.

    """
    grad = np.full(param.shape, np.nan)
    entries = np.arange(param.size)
    if max_entries is not None and max_entries < param.size:
        entries = np.random.default_rng(seed).choice(param.size, size=max_entries, replace=False)
    for i in entries:
        original = param.flat[i]
        param.flat[i] = original + step
        f_plus = loss_fn()
        param.flat[i] = original - step
        f_minus = loss_fn()
        param.flat[i] = original
        grad.flat[i] = (f_plus - f_minus) / (2. * step)
    return grad


def check_gradients(loss_and_grads: Callable[[Heads], tuple], heads: Heads, step=1e-5,
                    max_entries=None) -> Dict[str, float]:
    """
    Compares analytic and numeric gradients of every trainable tensor.

    Parameters
    ----------
    loss_and_grads : callable
        Maps heads to `(loss, grads)`, `grads` being a parameter name to gradient mapping.
    heads : Heads
        Parameters at which to check; they are restored afterwards.
    step : float, optional
        Finite-difference step (default 1e-5).
    max_entries : int, optional
        Number of randomly chosen entries checked per tensor; all by default.

    Returns
    -------
    dict :
        Relative error per parameter name.

    """
    _, grads = loss_and_grads(heads)
    errors = {}
    for i, (name, param) in enumerate(heads.store.items()):
        numeric = numeric_gradient(lambda: loss_and_grads(heads)[0], param, step, max_entries, seed=i)
        checked = ~np.isnan(numeric)
        errors[name] = relative_error(grads[name][checked], numeric[checked])
        logger.debug(f"Gradient check '{name}': relative error {errors[name]:.3e}.")
    return errors
