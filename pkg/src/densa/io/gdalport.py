""" Image file I/O through GDAL: reading input images and writing overlay PNGs. """

import os
import logging

import numpy as np
from osgeo import gdal

from densa.backbones.base import SceneImage
from densa.geometry.masks import rle_decode

logger = logging.getLogger(__name__)

NUMPY_TO_GDAL_DTYPE = {"bool": gdal.GDT_Byte,
                       "uint8": gdal.GDT_Byte,
                       "uint16": gdal.GDT_UInt16,
                       "int16": gdal.GDT_Int16,
                       "float32": gdal.GDT_Float32}

GDAL_TO_NUMPY_DTYPE = {gdal.GDT_Byte: "uint8",
                       gdal.GDT_UInt16: "uint16",
                       gdal.GDT_Int16: "int16",
                       gdal.GDT_Float32: "float32"}

OVERLAY_ALPHA = 0.45
BOX_THICKNESS = 2


def dtype_np2gdal(np_dtype) -> object:
    """
    Get GDAL data type from a NumPy-style data type.

    Parameters
    ----------
    np_dtype :  str
        NumPy-style data type, e.g. "uint8".

    Returns
    -------
    object :
        GDAL data type, None if not supported.

    """
    return NUMPY_TO_GDAL_DTYPE.get(str(np_dtype).lower())


def read_image(filepath) -> SceneImage:
    """
    Reads an image file as an RGB `SceneImage`.

    Single-band images are repeated to three bands, additional bands (e.g. alpha) are dropped. Non-byte data is
    linearly stretched to 0-255.

    """
    if not os.path.exists(filepath):
        err_msg = f"File '{filepath}' does not exist."
        raise FileNotFoundError(err_msg)
    try:
        src = gdal.Open(filepath, gdal.GA_ReadOnly)
    except RuntimeError:
        src = None
    if src is None:
        err_msg = f"File '{filepath}' could not be opened by GDAL."
        raise IOError(err_msg)
    bands = [src.GetRasterBand(band).ReadAsArray() for band in range(1, min(src.RasterCount, 3) + 1)]
    src = None
    data = np.stack(bands, axis=2)
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    elif data.shape[2] == 2:
        err_msg = f"Image '{filepath}' has two bands, expected one or at least three."
        raise ValueError(err_msg)
    if data.dtype != np.uint8:
        low, high = float(data.min()), float(data.max())
        scale = 255. / (high - low) if high > low else 0.
        data = np.round((data.astype(np.float64) - low) * scale).astype(np.uint8)
    return SceneImage(data)


def write_png(filepath, pixels, overwrite=False):
    """
    Writes an (height, width, 3) or (height, width) uint8 raster to a PNG file.

    PNG is a copy-only format for GDAL, so the raster is assembled in memory first.

    """
    if os.path.exists(filepath) and not overwrite:
        err_msg = f"File '{filepath}' exists."
        raise FileExistsError(err_msg)
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    gdal_dtype = dtype_np2gdal(pixels.dtype)
    if gdal_dtype != gdal.GDT_Byte:
        err_msg = f"PNG overlays must be of type uint8, got '{pixels.dtype}'."
        raise ValueError(err_msg)
    height, width, n_bands = pixels.shape
    mem_ds = gdal.GetDriverByName('MEM').Create('', width, height, n_bands, gdal_dtype)
    for band in range(n_bands):
        mem_ds.GetRasterBand(band + 1).WriteArray(pixels[..., band].astype(np.uint8))
    gdal.GetDriverByName('PNG').CreateCopy(filepath, mem_ds, strict=0)
    mem_ds = None
    aux_filepath = filepath + '.aux.xml'
    if os.path.exists(aux_filepath):
        os.remove(aux_filepath)


def detection_colors(n) -> np.ndarray:
    """ n distinct RGB colours (uint8) from a qualitative palette. """
    from matplotlib import colormaps

    palette = colormaps['tab20']
    return (np.array([palette(i % palette.N)[:3] for i in range(n)]) * 255).round().astype(np.uint8).reshape(-1, 3)


def render_overlay(image: SceneImage, detections, alpha=OVERLAY_ALPHA) -> np.ndarray:
    """
    Blends detection masks over an image and outlines their boxes.

    Parameters
    ----------
    image : SceneImage
        Annotated image.
    detections : sequence of Detection
        Objects with `mask` (RleMask) and `box` (BoxXYXY) attributes.
    alpha : float, optional
        Mask opacity (default 0.45).

    Returns
    -------
    np.ndarray :
        RGB raster (height, width, 3), uint8.

    """
    out = image.pixels.astype(np.float64)
    height, width = image.size
    colors = detection_colors(len(detections))
    for det, color in zip(detections, colors):
        mask = rle_decode(det.mask)
        out[mask] = (1. - alpha) * out[mask] + alpha * color
    for det, color in zip(detections, colors):
        box = det.box.clip(width, height)
        x1, y1 = int(np.floor(box.x1)), int(np.floor(box.y1))
        x2, y2 = max(x1 + 1, int(np.ceil(box.x2))), max(y1 + 1, int(np.ceil(box.y2)))
        t = BOX_THICKNESS
        out[y1:min(y1 + t, y2), x1:x2] = color
        out[max(y2 - t, y1):y2, x1:x2] = color
        out[y1:y2, x1:min(x1 + t, x2)] = color
        out[y1:y2, max(x2 - t, x1):x2] = color
    return np.round(out).astype(np.uint8)
