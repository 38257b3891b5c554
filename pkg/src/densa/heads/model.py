""" The trainable heads: feature adapter, shared binary classifier and parallel IoU head. """

import numpy as np

from densa.backbones.base import BackendCaps
from densa.heads.layers import ParameterStore, Linear, Mlp


class Heads:
    """
    Bundle of all trainable parameters.

    The classifier is one `Linear` instance used by both the heatmap and the semantic scoring path, so both always
    see the same parameters.

    """

    def __init__(self, caps: BackendCaps, store: ParameterStore = None):
        """
        Constructor of `Heads`.

        Parameters
        ----------
        caps : BackendCaps
            Output shapes of the backend the heads sit on.
        store : ParameterStore, optional
            Existing parameters, e.g. loaded from a checkpoint. Missing parameters are created with zeros.

        """
        self.caps = caps
        self.store = store if store is not None else ParameterStore()
        c_feat, c_tok = caps.feature_channels, caps.token_channels
        self.adapter = Mlp(self.store, 'adapter', c_feat, c_feat, c_feat)
        self.cls = Linear(self.store, 'cls', c_feat, 1)
        self.iou_head = Mlp(self.store, 'iou_head', 2 * c_tok, c_tok, 1)

    @classmethod
    def init(cls, caps: BackendCaps, seed=0, zero_outputs=True) -> "Heads":
        """
        Creates freshly initialised heads.

        Parameters
        ----------
        caps : BackendCaps
            Backend output shapes.
        seed : int, optional
            Initialisation seed (default 0).
        zero_outputs : bool, optional
            If true (default), the classifier and the last IoU head layer start at zero, i.e. a uniform heatmap of
            0.5 and refined IoU scores equal to the native ones.

        """
        heads = cls(caps)
        rng = np.random.default_rng(seed)
        heads.adapter.init(rng)
        heads.cls.init(rng, zero=zero_outputs, gain=1.)
        heads.iou_head.init(rng, zero_output=zero_outputs)
        return heads

    def copy(self) -> "Heads":
        return Heads(self.caps, self.store.copy())

    def equals(self, other) -> bool:
        return self.caps == other.caps and self.store.equals(other.store)

    def tensors(self) -> dict:
        """ Parameter name to array mapping, in creation order. """
        return dict(self.store.items())

    @classmethod
    def from_tensors(cls, caps: BackendCaps, tensors) -> "Heads":
        heads = cls(caps, ParameterStore(tensors))
        expected = set(cls(caps).store.names())
        if set(heads.store.names()) != expected:
            err_msg = f"Parameters {sorted(heads.store.names())} do not match the heads layout {sorted(expected)}."
            raise ValueError(err_msg)
        return heads
