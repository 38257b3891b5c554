"""
Class-specific prompt generation.

Semantic features are adapted by a small MLP and classified cell by cell into a foreground heatmap. Training
supervision is a pseudo foreground mask obtained by prompting the mask decoder with the annotated boxes; the loss is
a smooth dice loss between the bilinearly upsampled heatmap and the pseudo mask. At inference, grid points falling on
hot cells become the point prompts.

"""

import logging
from typing import List, Tuple

import numpy as np

from densa.backbones.base import Backend, FeatureMap
from densa.geometry.boxes import BoxXYXY, as_box_array
from densa.geometry.masks import SoftMask, resize_array, as_bitmask
from densa.geometry.prompts import PromptSet, grid_points
from densa.heads.layers import sigmoid
from densa.heads.model import Heads

logger = logging.getLogger(__name__)

PSEUDO_MASK_SIZE = 256
DICE_EPS = 1.


def adapt_features(raw_feat: FeatureMap, heads: Heads) -> Tuple[FeatureMap, tuple]:
    """
    Applies the adapter to raw semantic features.

    Returns
    -------
    adapted : FeatureMap
        Adapter output; all downstream semantic computations use these features.
    cache : tuple
        Values needed by the backward pass.

    """
    if raw_feat.channels != heads.adapter.fc1.n_in:
        err_msg = f"Semantic features have {raw_feat.channels} channels, the adapter expects " \
                  f"{heads.adapter.fc1.n_in}."
        raise ValueError(err_msg)
    data, cache = heads.adapter.forward(raw_feat.data)
    return raw_feat.with_data(data), cache


def heat_logits(adapted: FeatureMap, heads: Heads) -> Tuple[np.ndarray, np.ndarray]:
    """ Classifier logits (h, w) of adapted features and the classifier cache. """
    logits, cache = heads.cls.forward(adapted.data)
    return logits[..., 0], cache


def compute_heatmap(raw_feat: FeatureMap, heads: Heads) -> SoftMask:
    """
    Foreground probability per feature cell.

    Parameters
    ----------
    raw_feat : FeatureMap
        Semantic features (h, w, C) of the backend.
    heads : Heads
        Adapter and classifier.

    Returns
    -------
    SoftMask :
        Heatmap of shape (h, w) with values in (0, 1).

    """
    adapted, _ = adapt_features(raw_feat, heads)
    logits, _ = heat_logits(adapted, heads)
    return SoftMask(sigmoid(logits))


def decode_instance_masks(boxes, feat: FeatureMap, backend: Backend) -> List[np.ndarray]:
    """ One box-prompted mask at image resolution per box. """
    height, width = feat.image_size
    masks = []
    for coords in as_box_array(boxes):
        box = BoxXYXY.from_array(coords)
        if box.x1 < 0 or box.y1 < 0 or box.x2 > width or box.y2 > height:
            err_msg = f"Box {box} exceeds the image {width}x{height}."
            raise ValueError(err_msg)
        masks.append(as_bitmask(backend.decode_box_prompt(feat, box)))
    return masks


def merge_masks(masks, height, width, size=PSEUDO_MASK_SIZE) -> np.ndarray:
    """ Union of image-resolution masks, resized (nearest) to a size x size raster. """
    merged = np.zeros((height, width), dtype=bool)
    for mask in masks:
        merged |= mask
    return resize_array(merged, size, size, 'nearest')


def generate_pseudo_masks(boxes, feat: FeatureMap, backend: Backend, size=PSEUDO_MASK_SIZE) -> np.ndarray:
    """
    Merged pseudo foreground mask of a box-annotated image.

    Parameters
    ----------
    boxes : list of BoxXYXY or np.ndarray
        Annotated boxes in image coordinates.
    feat : FeatureMap
        Image-encoder features of the image.
    backend : Backend
        Backend answering the box prompts.
    size : int, optional
        Side length of the output raster (default 256).

    Returns
    -------
    np.ndarray :
        Boolean mask (size, size).

    """
    height, width = feat.image_size
    return merge_masks(decode_instance_masks(boxes, feat, backend), height, width, size)


def upsample_heat(heat, size=PSEUDO_MASK_SIZE) -> np.ndarray:
    """ Bilinear upsampling of heat values to size x size. """
    heat = heat.data if isinstance(heat, SoftMask) else np.asarray(heat, dtype=np.float64)
    return resize_array(heat, size, size, 'bilinear')


def dice_loss_and_grad(pred, target, eps=DICE_EPS) -> Tuple[float, np.ndarray]:
    """ Dice loss and its gradient with respect to `pred`. """
    pred = pred.data if isinstance(pred, SoftMask) else np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        err_msg = f"Prediction {pred.shape} and target {target.shape} differ in shape."
        raise ValueError(err_msg)
    inter = float(np.sum(pred * target))
    total = float(np.sum(pred) + np.sum(target)) + eps
    loss = 1. - (2. * inter + eps) / total
    grad = -(2. * target * total - (2. * inter + eps)) / total ** 2
    return loss, grad


def dice_loss(pred, target, eps=DICE_EPS) -> float:
    """
    Smooth dice loss 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps).

    Parameters
    ----------
    pred : SoftMask or np.ndarray
        Predicted foreground probabilities in [0, 1].
    target : np.ndarray
        Binary target of the same shape.
    eps : float, optional
        Smoothing term (default 1).

    Returns
    -------
    float

    """
    return dice_loss_and_grad(pred, target, eps)[0]


def sample_heat(heat: SoftMask, xy, width, height) -> np.ndarray:
    """ Bilinear samples of a heatmap covering a width x height canvas at image points (N, 2). """
    data = heat.data
    h, w = data.shape
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    u = np.clip(xy[:, 0] * w / width - 0.5, 0, w - 1)
    v = np.clip(xy[:, 1] * h / height - 0.5, 0, h - 1)
    c0, r0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    c1, r1 = np.minimum(c0 + 1, w - 1), np.minimum(r0 + 1, h - 1)
    fu, fv = u - c0, v - r0
    top = data[r0, c0] * (1. - fu) + data[r0, c1] * fu
    bottom = data[r1, c0] * (1. - fu) + data[r1, c1] * fu
    return top * (1. - fv) + bottom * fv


def extract_prompts(heat: SoftMask, n, t, width, height) -> PromptSet:
    """
    Turns a heatmap into point prompts.

    Parameters
    ----------
    heat : SoftMask
        Heatmap over the image.
    n : int
        Grid size; an n x n grid of cell centres is laid over the image.
    t : float
        Binarisation threshold; grid points with a bilinear heat sample >= t are kept.
    width, height : int
        Image size in pixels.

    Returns
    -------
    PromptSet :
        Kept grid points with their grid index and heat value.

    """
    grid = grid_points(n, width, height)
    values = sample_heat(heat, grid.xy, width, height)
    keep = np.flatnonzero(values >= t)
    logger.debug(f"Kept {keep.size} of {len(grid)} grid points at threshold {t}.")
    return PromptSet(grid.xy[keep], grid.grid_index[keep], values[keep])
