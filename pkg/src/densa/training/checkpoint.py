"""
Versioned binary checkpoint of trained heads.

Layout: 8 byte magic 'DENSACKP', uint16 format version, uint32 header length (all little-endian), a UTF-8 JSON header
(fingerprint, backend capabilities, training settings and a tensor table of names, shapes and offsets) and the raw
little-endian float64 tensor data.

"""

import os
import json
import struct
import logging
from dataclasses import dataclass, field

import numpy as np

from densa.backbones.base import BackendCaps
from densa.heads.model import Heads
from densa.utils import canonical_json

logger = logging.getLogger(__name__)

MAGIC = b'DENSACKP'
VERSION = 1
PREAMBLE = struct.Struct('<8sHI')
DATA_DTYPE = np.dtype('<f8')


@dataclass(eq=False)
class Checkpoint:
    """
    Trained heads plus the provenance needed to reuse them.

    Parameters
    ----------
    heads : Heads
        Parameters and the backend capabilities they were built for.
    fingerprint : str, optional
        Configuration fingerprint of the training run.
    train_config : dict, optional
        Training settings.

    """
    heads: Heads
    fingerprint: str = ''
    train_config: dict = field(default_factory=dict)

    @property
    def caps(self) -> BackendCaps:
        return self.heads.caps

    def save(self, filepath, overwrite=False):
        """ Writes the checkpoint to `filepath`. """
        if os.path.exists(filepath) and not overwrite:
            err_msg = f"File '{filepath}' exists."
            raise FileExistsError(err_msg)
        table, blobs, offset = [], [], 0
        for name, tensor in self.heads.tensors().items():
            data = np.ascontiguousarray(tensor, dtype=DATA_DTYPE)
            table.append({'name': name, 'shape': list(data.shape), 'offset': offset})
            blobs.append(data.tobytes())
            offset += data.nbytes
        header = canonical_json({'fingerprint': self.fingerprint, 'caps': self.caps.to_dict(),
                                 'train_config': self.train_config, 'tensors': table}).encode('utf-8')
        with open(filepath, 'wb') as f:
            f.write(PREAMBLE.pack(MAGIC, VERSION, len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        logger.info(f"Wrote checkpoint '{filepath}' ({len(table)} tensor(s)).")

    @classmethod
    def load(cls, filepath) -> "Checkpoint":
        """ Reads a checkpoint written by `save`. """
        if not os.path.exists(filepath):
            err_msg = f"File '{filepath}' does not exist."
            raise FileNotFoundError(err_msg)
        with open(filepath, 'rb') as f:
            content = f.read()
        if len(content) < PREAMBLE.size:
            err_msg = f"File '{filepath}' is too short to be a checkpoint."
            raise ValueError(err_msg)
        magic, version, header_len = PREAMBLE.unpack(content[:PREAMBLE.size])
        if magic != MAGIC:
            err_msg = f"File '{filepath}' is not a checkpoint."
            raise ValueError(err_msg)
        if version != VERSION:
            err_msg = f"Checkpoint format version {version} is not supported (expected {VERSION})."
            raise ValueError(err_msg)
        header = json.loads(content[PREAMBLE.size:PREAMBLE.size + header_len].decode('utf-8'))
        data = content[PREAMBLE.size + header_len:]
        tensors = {}
        for entry in header['tensors']:
            count = int(np.prod(entry['shape'], dtype=np.int64))
            end = entry['offset'] + count * DATA_DTYPE.itemsize
            if end > len(data):
                err_msg = f"Checkpoint '{filepath}' is truncated at tensor '{entry['name']}'."
                raise ValueError(err_msg)
            tensors[entry['name']] = np.frombuffer(data, dtype=DATA_DTYPE, count=count,
                                                   offset=entry['offset']).reshape(entry['shape'])
        heads = Heads.from_tensors(BackendCaps(**header['caps']), tensors)
        return cls(heads, header.get('fingerprint', ''), header.get('train_config', dict()))
