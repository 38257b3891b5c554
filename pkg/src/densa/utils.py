""" Small helpers shared across densa modules. """

import json
import hashlib

import numpy as np


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    err_msg = f"Object of type '{type(obj).__name__}' cannot be fingerprinted."
    raise TypeError(err_msg)


def canonical_json(obj) -> str:
    """ Serialises `obj` to JSON with sorted keys and no whitespace, so equal content gives equal text. """
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), default=_json_default)


def fingerprint(obj) -> str:
    """
    Computes a stable content hash of a JSON-serialisable object.

    Parameters
    ----------
    obj : dict or list or scalar
        Object to hash.

    Returns
    -------
    str :
        Hex digest (sha256) of the canonical JSON representation.

    """
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()


def digest_arrays(*arrays) -> str:
    """ Hex digest (sha1) over the shapes, dtypes and bytes of the given arrays; None entries are skipped. """
    hasher = hashlib.sha1()
    for array in arrays:
        if array is None:
            continue
        array = np.ascontiguousarray(array)
        hasher.update(str((array.shape, array.dtype.str)).encode('utf-8'))
        hasher.update(array.tobytes())
    return hasher.hexdigest()


def frozen(array) -> np.ndarray:
    """ Returns a read-only copy of `array`. """
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array
