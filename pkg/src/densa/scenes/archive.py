""" NetCDF archive of synthetic scenes, so experiments can be replayed byte-exactly. """

import os
import logging
from typing import List

import numpy as np
import xarray as xr

from densa.geometry.masks import rle_encode, rle_decode, RleMask
from densa.scenes.generator import SceneObject, SceneSpec, SHAPES

logger = logging.getLogger(__name__)

ARCHIVE_VERSION = 1


class SceneArchive:
    """
    Reads and writes scenes to a single NetCDF file.

    Every object's full mask is stored as column-major run lengths in one ragged 'run' dimension; the visible ground
    truth is re-derived on reading.

    """

    def __init__(self, filepath, mode='r', overwrite=False, compression=4):
        """
        Constructor of `SceneArchive`.

        Parameters
        ----------
        filepath : str
            Full file path to the NetCDF file.
        mode : str, optional
            'r' (default) or 'w'.
        overwrite : bool, optional
            Whether an existing file may be replaced in write mode (default False).
        compression : int, optional
            zlib compression level (default 4).

        """
        self.filepath = filepath
        self.mode = mode
        self.overwrite = overwrite
        self.compression = compression
        self.metadata = dict()
        self.src = None

        if self.mode == 'r':
            if not os.path.exists(self.filepath):
                err_msg = f"File '{self.filepath}' does not exist."
                raise FileNotFoundError(err_msg)
            self.src = xr.open_dataset(self.filepath, engine='netcdf4')
            self.metadata = dict(self.src.attrs)
        elif self.mode == 'w':
            if os.path.exists(self.filepath) and not self.overwrite:
                err_msg = f"File '{self.filepath}' exists."
                raise FileExistsError(err_msg)
        else:
            err_msg = f"Mode '{self.mode}' not known."
            raise ValueError(err_msg)

    def write(self, scenes: List[SceneSpec], metadata=None):
        """
        Writes scenes to disk.

        Parameters
        ----------
        scenes : list of SceneSpec
            Scenes to store.
        metadata : dict, optional
            Global attributes, e.g. generation parameters or a configuration fingerprint.

        """
        if self.mode != 'w':
            err_msg = "Archive was not opened in write mode."
            raise IOError(err_msg)

        first_object, n_objects = [], []
        shapes, depths, colors, first_run, n_runs, runs = [], [], [], [], [], []
        for scene in scenes:
            first_object.append(len(shapes))
            n_objects.append(scene.n_objects)
            for obj in scene.objects:
                counts = rle_encode(obj.full_mask).counts
                shapes.append(SHAPES.index(obj.shape))
                depths.append(obj.depth)
                colors.append(obj.color)
                first_run.append(len(runs))
                n_runs.append(counts.size)
                runs.extend(counts.tolist())

        ds = xr.Dataset({
            'scene_seed': ('scene', np.array([s.seed for s in scenes], dtype=np.int64)),
            'scene_width': ('scene', np.array([s.width for s in scenes], dtype=np.int32)),
            'scene_height': ('scene', np.array([s.height for s in scenes], dtype=np.int32)),
            'scene_first_object': ('scene', np.array(first_object, dtype=np.int64)),
            'scene_n_objects': ('scene', np.array(n_objects, dtype=np.int32)),
            'object_shape': ('object', np.array(shapes, dtype=np.int8)),
            'object_depth': ('object', np.array(depths, dtype=np.int32)),
            'object_color': (('object', 'rgb'), np.array(colors, dtype=np.uint8).reshape(-1, 3)),
            'object_first_run': ('object', np.array(first_run, dtype=np.int64)),
            'object_n_runs': ('object', np.array(n_runs, dtype=np.int32)),
            'runs': ('run', np.array(runs, dtype=np.int64)),
        })
        ds.attrs.update({'archive_version': ARCHIVE_VERSION, 'shapes': ','.join(SHAPES)})
        ds.attrs.update(metadata or dict())
        encoding = {name: {'zlib': True, 'complevel': self.compression} for name in ds.data_vars}
        if os.path.exists(self.filepath):
            os.remove(self.filepath)
        ds.to_netcdf(self.filepath, mode='w', engine='netcdf4', encoding=encoding,
                     unlimited_dims=['object', 'run'])
        self.metadata = dict(ds.attrs)
        logger.info(f"Wrote {len(scenes)} scene(s) to '{self.filepath}'.")

    def read(self) -> List[SceneSpec]:
        """ Reads all scenes. """
        if self.src is None:
            err_msg = "Archive was not opened in read mode."
            raise IOError(err_msg)
        ds = self.src.load()
        shape_names = str(ds.attrs.get('shapes', ','.join(SHAPES))).split(',')
        runs = ds['runs'].values
        scenes = []
        for i in range(ds.sizes['scene']):
            width, height = int(ds['scene_width'][i]), int(ds['scene_height'][i])
            first = int(ds['scene_first_object'][i])
            objects = []
            for j in range(first, first + int(ds['scene_n_objects'][i])):
                start = int(ds['object_first_run'][j])
                counts = runs[start:start + int(ds['object_n_runs'][j])]
                objects.append(SceneObject(shape=shape_names[int(ds['object_shape'][j])],
                                           full_mask=rle_decode(RleMask(width, height, counts)),
                                           depth=int(ds['object_depth'][j]),
                                           color=tuple(int(c) for c in ds['object_color'][j].values)))
            scenes.append(SceneSpec(width, height, objects, int(ds['scene_seed'][i])))
        return scenes

    def close(self):
        """
        Close file.
        """
        if self.src is not None:
            self.src.close()
            self.src = None

    def __enter__(self):
        return self

    def __exit__(self, *args, **kwargs):
        self.close()
