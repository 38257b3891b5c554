""" Interfaces of the frozen foundation components (image encoder, mask decoder, semantic feature extractor). """

import abc
from dataclasses import dataclass, field
from typing import Any, Optional, Tuple

import numpy as np

from densa.geometry.boxes import BoxXYXY
from densa.geometry.prompts import PromptSet
from densa.utils import digest_arrays

N_CANDIDATES = 4


class BackendUnavailableError(RuntimeError):
    """ Raised if a backend cannot be used, e.g. because weights or optional packages are missing. """


@dataclass(frozen=True, eq=False)
class SceneImage:
    """
    Image handed to the backends.

    Parameters
    ----------
    pixels : np.ndarray
        RGB raster of shape (height, width, 3), uint8.
    labels : np.ndarray, optional
        Visible-object index per pixel (-1 for background). Only synthetic scenes carry labels; the oracle backend
        requires them.

    """
    pixels: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            err_msg = f"Images must be RGB rasters of shape (height, width, 3), got {pixels.shape}."
            raise ValueError(err_msg)
        object.__setattr__(self, 'pixels', pixels.astype(np.uint8, copy=False))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int32)
            if labels.shape != pixels.shape[:2]:
                err_msg = f"Label plane {labels.shape} does not match image {pixels.shape[:2]}."
                raise ValueError(err_msg)
            object.__setattr__(self, 'labels', labels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def size(self) -> Tuple[int, int]:
        """ (height, width) """
        return self.pixels.shape[0], self.pixels.shape[1]

    def digest(self) -> str:
        return digest_arrays(self.pixels, self.labels)

    def crop(self, window: BoxXYXY) -> "SceneImage":
        """ Cuts out the integer pixel window [x1, x2) x [y1, y2); the label plane stays aligned. """
        x1, y1, x2, y2 = (int(round(c)) for c in (window.x1, window.y1, window.x2, window.y2))
        if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height or x2 <= x1 or y2 <= y1:
            err_msg = f"Crop window {(x1, y1, x2, y2)} is not inside the image {self.width}x{self.height}."
            raise ValueError(err_msg)
        labels = None if self.labels is None else self.labels[y1:y2, x1:x2]
        return SceneImage(self.pixels[y1:y2, x1:x2], labels)


@dataclass(frozen=True)
class BackendCaps:
    """
    Shapes a backend produces.

    Parameters
    ----------
    patch_size : int
        Image pixels per feature cell (s).
    token_channels : int
        Channels of mask and IoU tokens (C_tok).
    feature_channels : int
        Channels of semantic features (C).
    native_mask_resolution : int
        Side length of the square low-resolution mask logits.

    """
    patch_size: int = 16
    token_channels: int = 32
    feature_channels: int = 32
    native_mask_resolution: int = 256

    def __post_init__(self):
        for name in ('patch_size', 'token_channels', 'feature_channels', 'native_mask_resolution'):
            if int(getattr(self, name)) < 1:
                err_msg = f"Backend capability '{name}' must be positive, got {getattr(self, name)}."
                raise ValueError(err_msg)

    def grid_shape(self, height, width) -> Tuple[int, int]:
        """ Feature grid (h, w) for an image of the given size. """
        return max(1, height // self.patch_size), max(1, width // self.patch_size)

    def to_dict(self) -> dict:
        return {'patch_size': self.patch_size, 'token_channels': self.token_channels,
                'feature_channels': self.feature_channels, 'native_mask_resolution': self.native_mask_resolution}


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """
    Patch-grid feature tensor of one image.

    Parameters
    ----------
    data : np.ndarray
        Features of shape (h, w, C).
    image_size : tuple
        (height, width) of the encoded image.
    context : object, optional
        Backend-private payload needed for decoding (e.g. the oracle's scene tables or a model embedding).

    """
    data: np.ndarray
    image_size: Tuple[int, int]
    context: Any = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            err_msg = f"Feature maps must have shape (h, w, C), got {data.shape}."
            raise ValueError(err_msg)
        if not np.all(np.isfinite(data)):
            err_msg = "Feature maps must be finite."
            raise ValueError(err_msg)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'image_size', (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data) -> "FeatureMap":
        """ Same image and context, different feature values (e.g. adapter output). """
        return FeatureMap(data, self.image_size, self.context)


@dataclass(frozen=True, eq=False)
class DecodeResult:
    """
    Mask decoder output for a batch of N point prompts.

    Parameters
    ----------
    masks : np.ndarray
        Candidate mask logits of shape (N, 4, r, r), covering the whole encoded image.
    mask_tokens : np.ndarray
        Final-layer mask tokens of shape (N, 4, C_tok).
    iou_token : np.ndarray
        Final-layer IoU token of shape (N, 1, C_tok).
    native_iou : np.ndarray
        IoU predictions of the frozen decoder head, shape (N, 4).
    image_size : tuple
        (height, width) of the encoded image.

    """
    masks: np.ndarray
    mask_tokens: np.ndarray
    iou_token: np.ndarray
    native_iou: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        n = self.masks.shape[0]
        if self.masks.ndim != 4 or self.masks.shape[1] != N_CANDIDATES:
            err_msg = f"Masks must have shape (N, {N_CANDIDATES}, r, r), got {self.masks.shape}."
            raise ValueError(err_msg)
        if self.mask_tokens.ndim != 3 or self.mask_tokens.shape[:2] != (n, N_CANDIDATES):
            err_msg = f"Mask tokens must have shape ({n}, {N_CANDIDATES}, C), got {self.mask_tokens.shape}."
            raise ValueError(err_msg)
        if self.iou_token.shape != (n, 1, self.mask_tokens.shape[2]):
            err_msg = f"IoU token must have shape ({n}, 1, {self.mask_tokens.shape[2]}), got {self.iou_token.shape}."
            raise ValueError(err_msg)
        if self.native_iou.shape != (n, N_CANDIDATES):
            err_msg = f"Native IoU predictions must have shape ({n}, {N_CANDIDATES}), got {self.native_iou.shape}."
            raise ValueError(err_msg)
        for name in ('masks', 'mask_tokens', 'iou_token', 'native_iou'):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                err_msg = f"Decoder output '{name}' contains non-finite values."
                raise ValueError(err_msg)
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.masks.shape[2], self.masks.shape[3]

    def take(self, idxs) -> "DecodeResult":
        idxs = np.asarray(idxs)
        return DecodeResult(self.masks[idxs], self.mask_tokens[idxs], self.iou_token[idxs],
                            self.native_iou[idxs], self.image_size)


def image_to_mask_coords(xy, image_size, resolution) -> Tuple[np.ndarray, np.ndarray]:
    """
    Maps image pixel coordinates to (row, col) cells of a mask raster covering the whole image.

    Parameters
    ----------
    xy : np.ndarray
        Points of shape (N, 2) in image coordinates.
    image_size : tuple
        (height, width) of the image.
    resolution : tuple
        (rows, cols) of the mask raster.

    Returns
    -------
    rows, cols : np.ndarray
        Integer cell indices.

    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    rows = np.floor(xy[:, 1] * resolution[0] / image_size[0]).astype(np.int64)
    cols = np.floor(xy[:, 0] * resolution[1] / image_size[1]).astype(np.int64)
    return np.clip(rows, 0, resolution[0] - 1), np.clip(cols, 0, resolution[1] - 1)


class Backend(metaclass=abc.ABCMeta):
    """
    Frozen foundation components behind one interface.

    Backends are immutable after construction; encode and decode calls are deterministic.

    """

    @property
    @abc.abstractmethod
    def caps(self) -> BackendCaps:
        """ Shapes this backend produces. """

    @abc.abstractmethod
    def encode_image(self, image: SceneImage) -> FeatureMap:
        """ Image-encoder features used by the mask decoder. """

    @abc.abstractmethod
    def extract_semantic_features(self, image: SceneImage) -> FeatureMap:
        """ Semantic patch features (h, w, C). """

    @abc.abstractmethod
    def decode_prompts(self, feat: FeatureMap, prompts: PromptSet) -> DecodeResult:
        """ Four candidate masks, tokens and native IoU predictions per point prompt. """

    @abc.abstractmethod
    def decode_box_prompt(self, feat: FeatureMap, box: BoxXYXY) -> np.ndarray:
        """ Single best mask at image resolution for a box prompt. """

    @staticmethod
    def _check_prompts(feat: FeatureMap, prompts: PromptSet):
        if len(prompts) == 0:
            err_msg = "Prompt batch is empty."
            raise ValueError(err_msg)
        height, width = feat.image_size
        prompts.validate_within(width, height)

    @staticmethod
    def _check_box(box: BoxXYXY):
        if box.area <= 0:
            err_msg = f"Box prompt {box} has zero area."
            raise ValueError(err_msg)
