"""
Deterministic oracle backend for synthetic scenes.

The oracle reads the label plane of a `SceneImage` and answers like a promptable segmentation model would, but
with ground-truth-derived masks:

* a prompt on object k yields its whole visible mask, its top and bottom halves (split at the middle row of its
  bounding box) and an over-segmentation (the mask scaled by `dilation` about its box centre, united with the
  mask itself);
* a background prompt yields four disks of different radii around the point, restricted to cells without any
  object pixel.

Native masks are derived from the full-resolution label plane by coverage: a cell belongs to an object if any of its
pixels does, so thin visible parts survive the downsampling and the box of a whole mask always contains the visible
box of its object.

Tokens are a fixed seeded linear map of per-candidate descriptors (true IoU, foreground flag, part flag,
over-segmentation flag, background-blob flag, bias). Native IoU predictions are the true IoUs plus seeded Gaussian
noise, clamped to [0, 1]; the whole mask of a foreground prompt is reported at its true IoU of 1, so it always ranks
first. Semantic features are a seeded linear map of per-patch foreground fraction and mean colour.

"""

import logging
import threading
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from densa.backbones.base import (Backend, BackendCaps, BackendUnavailableError, DecodeResult, FeatureMap,
                                  SceneImage, N_CANDIDATES)
from densa.geometry.boxes import BoxXYXY, box_iou_matrix
from densa.geometry.masks import label_coverage
from densa.geometry.prompts import PromptSet

logger = logging.getLogger(__name__)

N_TOKEN_DESCRIPTORS = 6
N_IOU_DESCRIPTORS = 3
N_PATCH_DESCRIPTORS = 5
PART_FLAGS = np.array([0., 1., 1., 0.])
OVERSEG_FLAGS = np.array([0., 0., 0., 1.])
BLOB_RADII = np.array([1., 0.5, 0.75, 1.5])


@dataclass(frozen=True, eq=False)
class OracleScene:
    """ Per-image tables the oracle decodes from. """
    image_size: Tuple[int, int]
    digest_key: int
    labels: np.ndarray
    background_native: np.ndarray
    candidates: np.ndarray
    candidate_iou: np.ndarray
    areas: np.ndarray
    boxes: np.ndarray

    @property
    def n_objects(self) -> int:
        return self.areas.size


def patch_means(values, grid_shape) -> np.ndarray:
    """
    Averages an (H, W, D) raster over a grid of (h, w) patches.

    Patch borders are spread evenly over the image, so sizes that are not multiples of the grid are handled.

    """
    height, width = values.shape[:2]
    h, w = grid_shape
    row_edges = np.linspace(0, height, h + 1).round().astype(np.int64)
    col_edges = np.linspace(0, width, w + 1).round().astype(np.int64)
    sums = np.add.reduceat(np.add.reduceat(values, row_edges[:-1], axis=0), col_edges[:-1], axis=1)
    counts = np.diff(row_edges)[:, None] * np.diff(col_edges)[None, :]
    return sums / counts[..., None]


def label_boxes(labels, n_objects) -> np.ndarray:
    """ Tight boxes (n_objects, 4) of every label value 0..n_objects-1; NaN rows for absent labels. """
    boxes = np.full((n_objects, 4), np.nan)
    ys, xs = np.nonzero(labels >= 0)
    if ys.size == 0:
        return boxes
    ks = labels[ys, xs]
    x1 = np.full(n_objects, np.inf)
    y1 = np.full(n_objects, np.inf)
    x2 = np.full(n_objects, -np.inf)
    y2 = np.full(n_objects, -np.inf)
    np.minimum.at(x1, ks, xs)
    np.minimum.at(y1, ks, ys)
    np.maximum.at(x2, ks, xs + 1)
    np.maximum.at(y2, ks, ys + 1)
    present = np.isfinite(x1)
    boxes[present] = np.stack([x1, y1, x2, y2], axis=1)[present]
    return boxes


class OracleBackend(Backend):
    """ Ground-truth-backed stand-in for the image encoder, mask decoder and semantic feature extractor. """

    def __init__(self, seed=0, caps=None, noise_sigma=0.1, logit_magnitude=10., blob_radius=0.02, dilation=1.2,
                 feature_gain=5.):
        """
        Constructor of `OracleBackend`.

        Parameters
        ----------
        seed : int, optional
            Seed of the token/feature mixing matrices and the native IoU noise (default 0).
        caps : BackendCaps, optional
            Output shapes. Defaults to `BackendCaps()`.
        noise_sigma : float, optional
            Standard deviation of the native IoU noise (default 0.1).
        logit_magnitude : float, optional
            Absolute value of the emitted mask logits (default 10).
        blob_radius : float, optional
            Radius of background blobs as a fraction of the native mask resolution (default 0.02).
        dilation : float, optional
            Scale factor of the over-segmentation candidate (default 1.2).
        feature_gain : float, optional
            Magnitude of the semantic features (default 5).

        """
        self._caps = caps or BackendCaps()
        self.seed = int(seed)
        self.noise_sigma = float(noise_sigma)
        self.logit_magnitude = float(logit_magnitude)
        self.blob_radius = float(blob_radius)
        self.dilation = float(dilation)
        self.feature_gain = float(feature_gain)

        rng = np.random.default_rng(self.seed)
        c_tok, c_feat = self._caps.token_channels, self._caps.feature_channels
        self._token_map = rng.normal(size=(N_TOKEN_DESCRIPTORS, c_tok))
        self._iou_map = rng.normal(size=(N_IOU_DESCRIPTORS, c_tok))
        self._sam_map = rng.normal(size=(N_PATCH_DESCRIPTORS, c_tok))
        self._dino_map = rng.normal(size=(N_PATCH_DESCRIPTORS, c_feat)) / np.sqrt(N_PATCH_DESCRIPTORS)

        self._cache: Dict[Tuple[str, str], FeatureMap] = {}
        self._lock = threading.Lock()

    @property
    def caps(self) -> BackendCaps:
        return self._caps

    def __getstate__(self):
        state = self.__dict__.copy()
        state['_lock'] = None
        state['_cache'] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def encode_image(self, image: SceneImage) -> FeatureMap:
        return self._cached(image, 'sam', self._encode_sam)

    def extract_semantic_features(self, image: SceneImage) -> FeatureMap:
        return self._cached(image, 'dino', self._encode_dino)

    def _cached(self, image, kind, encoder) -> FeatureMap:
        self._check_image(image)
        key = (image.digest(), kind)
        with self._lock:
            feat = self._cache.get(key)
        if feat is None:
            feat = encoder(image, key[0])
            with self._lock:
                self._cache[key] = feat
        return feat

    @staticmethod
    def _check_image(image):
        if not isinstance(image, SceneImage) or image.labels is None:
            err_msg = "The oracle backend needs synthetic scene images carrying a label plane."
            raise BackendUnavailableError(err_msg)

    def _patch_descriptors(self, image) -> np.ndarray:
        height, width = image.size
        descriptors = np.concatenate([(image.labels >= 0)[..., None].astype(np.float64),
                                      image.pixels.astype(np.float64) / 255.,
                                      np.ones((height, width, 1))], axis=2)
        return patch_means(descriptors, self._caps.grid_shape(height, width))

    def _encode_sam(self, image, digest) -> FeatureMap:
        context = self._build_scene(image, digest)
        data = self._patch_descriptors(image) @ self._sam_map
        logger.debug(f"Encoded image {digest[:8]} with {context.n_objects} object(s).")
        return FeatureMap(data, image.size, context)

    def _encode_dino(self, image, digest) -> FeatureMap:
        data = self.feature_gain * (self._patch_descriptors(image) @ self._dino_map)
        return FeatureMap(data, image.size)

    def _build_scene(self, image, digest) -> OracleScene:
        height, width = image.size
        res = self._caps.native_mask_resolution
        labels = image.labels
        n_objects = int(labels.max(initial=-1)) + 1
        wholes = label_coverage(labels, n_objects, res, res)
        whole_areas = np.count_nonzero(wholes, axis=(1, 2))

        candidates = np.zeros((n_objects, N_CANDIDATES, res, res), dtype=bool)
        candidate_iou = np.zeros((n_objects, N_CANDIDATES))
        for k in range(n_objects):
            candidates[k] = self._object_candidates(wholes[k])
            candidate_iou[k] = [self._best_iou(wholes, whole_areas, m) for m in candidates[k]]

        areas = np.bincount(labels.ravel() + 1, minlength=n_objects + 1)[1:]
        return OracleScene(image_size=(height, width), digest_key=int(digest[:8], 16), labels=labels,
                           background_native=~wholes.any(axis=0), candidates=candidates,
                           candidate_iou=candidate_iou, areas=areas, boxes=label_boxes(labels, n_objects))

    def _object_candidates(self, whole) -> np.ndarray:
        res = whole.shape[0]
        stack = np.zeros((N_CANDIDATES,) + whole.shape, dtype=bool)
        stack[0] = whole
        rows = np.flatnonzero(whole.any(axis=1))
        if rows.size == 0:
            return stack
        cols = np.flatnonzero(whole.any(axis=0))
        r_a, r_b, c_a, c_b = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        middle = (r_a + r_b) // 2
        stack[1, r_a:middle] = whole[r_a:middle]
        stack[2, middle:r_b] = whole[middle:r_b]

        centre_y, centre_x = (r_a + r_b) / 2., (c_a + c_b) / 2.
        src_rows = np.floor(centre_y + (np.arange(res) + 0.5 - centre_y) / self.dilation).astype(np.int64)
        src_cols = np.floor(centre_x + (np.arange(res) + 0.5 - centre_x) / self.dilation).astype(np.int64)
        valid_rows = (src_rows >= 0) & (src_rows < res)
        valid_cols = (src_cols >= 0) & (src_cols < res)
        scaled = whole[np.clip(src_rows, 0, res - 1)[:, None], np.clip(src_cols, 0, res - 1)[None, :]]
        scaled &= valid_rows[:, None] & valid_cols[None, :]
        stack[3] = scaled | whole
        return stack

    @staticmethod
    def _best_iou(wholes, whole_areas, mask) -> float:
        """ IoU of `mask` with its best-matching whole object mask at native resolution. """
        if whole_areas.size == 0:
            return 0.
        inter = np.count_nonzero(wholes[:, mask], axis=1)
        union = np.count_nonzero(mask) + whole_areas - inter
        iou = np.zeros(whole_areas.size)
        np.divide(inter, union, out=iou, where=union > 0)
        return float(iou.max())

    def _background_candidates(self, scene, x, y) -> np.ndarray:
        res = self._caps.native_mask_resolution
        height, width = scene.image_size
        px, py = x * res / width, y * res / height
        radius = max(1., self.blob_radius * res)
        stack = np.zeros((N_CANDIDATES, res, res), dtype=bool)
        reach = int(np.ceil(radius * BLOB_RADII.max())) + 1
        r_a, r_b = max(0, int(py) - reach), min(res, int(py) + reach + 1)
        c_a, c_b = max(0, int(px) - reach), min(res, int(px) + reach + 1)
        dy = np.arange(r_a, r_b) + 0.5 - py
        dx = np.arange(c_a, c_b) + 0.5 - px
        dist2 = dy[:, None] ** 2 + dx[None, :] ** 2
        background = scene.background_native[r_a:r_b, c_a:c_b]
        for i, factor in enumerate(BLOB_RADII):
            stack[i, r_a:r_b, c_a:c_b] = (dist2 <= (factor * radius) ** 2) & background
        return stack

    def _noise(self, scene, x, y) -> np.ndarray:
        rng = np.random.default_rng([self.seed, scene.digest_key, int(round(x * 16)), int(round(y * 16))])
        return rng.normal(0., self.noise_sigma, N_CANDIDATES)

    def decode_prompts(self, feat: FeatureMap, prompts: PromptSet) -> DecodeResult:
        scene = feat.context
        if not isinstance(scene, OracleScene):
            err_msg = "Feature map was not produced by an oracle backend."
            raise ValueError(err_msg)
        self._check_prompts(feat, prompts)

        n = len(prompts)
        res = self._caps.native_mask_resolution
        xy = prompts.xy
        owners = scene.labels[np.floor(xy[:, 1]).astype(np.int64), np.floor(xy[:, 0]).astype(np.int64)]
        fg = owners >= 0

        masks = np.zeros((n, N_CANDIDATES, res, res), dtype=bool)
        true_iou = np.zeros((n, N_CANDIDATES))
        masks[fg] = scene.candidates[owners[fg]]
        true_iou[fg] = scene.candidate_iou[owners[fg]]
        # background blobs never touch an object cell, their true IoU stays 0
        for i in np.flatnonzero(~fg):
            masks[i] = self._background_candidates(scene, xy[i, 0], xy[i, 1])

        fg_col = np.repeat(fg.astype(np.float64)[:, None], N_CANDIDATES, axis=1)
        descriptors = np.stack([true_iou, fg_col,
                                np.broadcast_to(PART_FLAGS, (n, N_CANDIDATES)) * fg_col,
                                np.broadcast_to(OVERSEG_FLAGS, (n, N_CANDIDATES)) * fg_col,
                                1. - fg_col, np.ones((n, N_CANDIDATES))], axis=2)
        mask_tokens = descriptors @ self._token_map
        iou_descriptors = np.stack([fg.astype(np.float64), true_iou.mean(axis=1), np.ones(n)], axis=1)
        iou_token = (iou_descriptors @ self._iou_map)[:, None, :]

        noise = np.stack([self._noise(scene, x, y) for x, y in xy])
        noise[fg, 0] = 0.
        native_iou = np.clip(true_iou + noise, 0., 1.)

        logits = np.where(masks, self.logit_magnitude, -self.logit_magnitude).astype(np.float32)
        return DecodeResult(logits, mask_tokens, iou_token, native_iou, feat.image_size)

    def decode_box_prompt(self, feat: FeatureMap, box: BoxXYXY) -> np.ndarray:
        """
        Visible object mask best matching a box prompt.

        Among the objects having pixels inside the box, the one whose visible box has the highest IoU with the
        prompt box is returned (ties: more pixels inside the box, then lower index). An empty mask is returned if
        the box covers background only.

        """
        scene = feat.context
        if not isinstance(scene, OracleScene):
            err_msg = "Feature map was not produced by an oracle backend."
            raise ValueError(err_msg)
        self._check_box(box)
        height, width = scene.image_size
        out = np.zeros((height, width), dtype=bool)
        if scene.n_objects == 0:
            return out

        x1 = int(np.clip(np.ceil(box.x1 - 0.5), 0, width))
        x2 = int(np.clip(np.ceil(box.x2 - 0.5), 0, width))
        y1 = int(np.clip(np.ceil(box.y1 - 0.5), 0, height))
        y2 = int(np.clip(np.ceil(box.y2 - 0.5), 0, height))
        inside = np.bincount(scene.labels[y1:y2, x1:x2].ravel() + 1, minlength=scene.n_objects + 1)[1:]
        if not inside.any():
            return out

        present = np.isfinite(scene.boxes[:, 0])
        box_iou = np.zeros(scene.n_objects)
        box_iou[present] = box_iou_matrix(box.to_array()[None, :], scene.boxes[present])[0]
        box_iou[inside == 0] = -1.
        order = np.lexsort((np.arange(scene.n_objects), -inside, -box_iou))
        return scene.labels == order[0]
