from densa.backbones.base import (Backend, BackendCaps, BackendUnavailableError, DecodeResult, FeatureMap, SceneImage,
                                  N_CANDIDATES, image_to_mask_coords)
from densa.backbones.oracle import OracleBackend


def create_backend(name, caps=None, seed=0, **kwargs) -> Backend:
    """
    Creates a backend by name.

    Parameters
    ----------
    name : str
        'oracle' or 'sam'.
    caps : BackendCaps, optional
        Output shapes of the oracle backend.
    seed : int, optional
        Oracle seed.
    **kwargs
        Keyword arguments of the oracle backend (noise, logit magnitude, dilation) or of the real-model adapter
        (checkpoint paths, model types, device).

    Returns
    -------
    Backend

    """
    if name == 'oracle':
        return OracleBackend(seed=seed, caps=caps, **kwargs)
    if name == 'sam':
        from densa.backbones.sam import SamDinoBackend
        return SamDinoBackend(**kwargs)
    err_msg = f"Backend '{name}' not known, use 'oracle' or 'sam'."
    raise ValueError(err_msg)
