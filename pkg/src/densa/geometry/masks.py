"""
Raster masks: bit masks, soft masks and their run-length form.

Bit masks are plain boolean numpy arrays of shape (height, width). Soft masks wrap real-valued rasters
(probabilities or logits). Run-length counts follow the COCO uncompressed layout: column-major order, alternating
runs of zeros and ones, always starting with a (possibly empty) run of zeros.

Resizing uses separable interpolation matrices on the align-corners-false sampling grid, i.e. output cell `i` of
`n_out` samples the input at `(i + 0.5) * n_in / n_out - 0.5`, clamped to the input range.

"""

import functools
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from densa.geometry.boxes import BoxXYXY


RESIZE_MODES = ('nearest', 'bilinear')


def as_bitmask(mask) -> np.ndarray:
    """ Validates and converts `mask` to a 2D boolean array. """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        err_msg = f"Masks must be 2D, got {arr.ndim} dimension(s)."
        raise ValueError(err_msg)
    if arr.dtype != bool:
        if np.any((arr != 0) & (arr != 1)):
            err_msg = "Bit masks may only contain 0 and 1."
            raise ValueError(err_msg)
        arr = arr.astype(bool)
    return arr


@dataclass(frozen=True)
class SoftMask:
    """
    Real-valued raster, either probabilities in [0, 1] or unbounded logits.

    Parameters
    ----------
    data : np.ndarray
        2D real raster (height, width).
    is_logit : bool, optional
        True if `data` holds logits (default False).

    """
    data: np.ndarray
    is_logit: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            err_msg = f"Soft masks must be 2D, got {data.ndim} dimension(s)."
            raise ValueError(err_msg)
        if not np.all(np.isfinite(data)):
            err_msg = "Soft mask values must be finite."
            raise ValueError(err_msg)
        if not self.is_logit and (data.min(initial=0.) < 0. or data.max(initial=0.) > 1.):
            err_msg = "Soft mask probabilities must lie in [0, 1]."
            raise ValueError(err_msg)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def binarize(self) -> np.ndarray:
        """ Bit mask: logit > 0 or probability > 0.5. """
        return self.data > 0. if self.is_logit else self.data > 0.5


@dataclass(frozen=True)
class RleMask:
    """
    Run-length encoded bit mask.

    Parameters
    ----------
    width : int
        Mask width in pixels.
    height : int
        Mask height in pixels.
    counts : np.ndarray
        Run lengths in column-major order, starting with a run of zeros.

    """
    width: int
    height: int
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64).ravel()
        if np.any(counts < 0):
            err_msg = "Run lengths must not be negative."
            raise ValueError(err_msg)
        if int(counts.sum()) != self.width * self.height:
            err_msg = f"Run lengths sum up to {int(counts.sum())}, expected {self.width * self.height}."
            raise ValueError(err_msg)
        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RleMask):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and \
            np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash((self.width, self.height, self.counts.tobytes()))

    @property
    def area(self) -> int:
        return int(self.counts[1::2].sum())

    def to_dict(self) -> dict:
        """ COCO uncompressed RLE dictionary. """
        return {'size': [int(self.height), int(self.width)], 'counts': [int(c) for c in self.counts]}

    @classmethod
    def from_dict(cls, rle_dict) -> "RleMask":
        """ Creates a run-length mask from a COCO uncompressed RLE dictionary. """
        try:
            height, width = rle_dict['size']
            counts = rle_dict['counts']
        except (KeyError, TypeError, ValueError):
            err_msg = "RLE dictionaries need a 'size' [height, width] and a 'counts' entry."
            raise ValueError(err_msg)
        if isinstance(counts, (str, bytes)):
            err_msg = "Compressed RLE strings have to be decoded before (see densa.io.coco)."
            raise ValueError(err_msg)
        return cls(int(width), int(height), counts)


def iou_masks(a, b) -> float:
    """
    Intersection over union of two bit masks.

    Two empty masks agree perfectly and have an IoU of 1.

    """
    a = as_bitmask(a)
    b = as_bitmask(b)
    if a.shape != b.shape:
        err_msg = f"Mask dimensions differ: {a.shape} vs. {b.shape}."
        raise ValueError(err_msg)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.
    return np.count_nonzero(a & b) / union


def mask_to_box(mask) -> Optional[BoxXYXY]:
    """ Tight half-open box around all nonzero pixels; None for an empty mask. """
    mask = as_bitmask(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return BoxXYXY(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def masks_to_boxes(masks) -> np.ndarray:
    """
    Vectorised `mask_to_box` for a stack of masks.

    Parameters
    ----------
    masks : np.ndarray
        Boolean array of shape (N, height, width).

    Returns
    -------
    np.ndarray :
        Boxes of shape (N, 4) in cell units; rows of empty masks are NaN.

    """
    masks = np.asarray(masks, dtype=bool)
    n, height, width = masks.shape
    rows = masks.any(axis=2)
    cols = masks.any(axis=1)
    boxes = np.full((n, 4), np.nan)
    nonempty = rows.any(axis=1)
    if nonempty.any():
        rows = rows[nonempty]
        cols = cols[nonempty]
        boxes[nonempty, 0] = np.argmax(cols, axis=1)
        boxes[nonempty, 1] = np.argmax(rows, axis=1)
        boxes[nonempty, 2] = width - np.argmax(cols[:, ::-1], axis=1)
        boxes[nonempty, 3] = height - np.argmax(rows[:, ::-1], axis=1)
    return boxes


@functools.lru_cache(maxsize=64)
def resize_matrix(n_in, n_out, mode='bilinear') -> np.ndarray:
    """
    One-dimensional interpolation matrix.

    Parameters
    ----------
    n_in : int
        Number of input samples.
    n_out : int
        Number of output samples.
    mode : str, optional
        'nearest' or 'bilinear' (default).

    Returns
    -------
    np.ndarray :
        Read-only matrix R of shape (n_out, n_in), such that `out = R @ in`. Every row sums up to 1.

    """
    if n_in < 1 or n_out < 1:
        err_msg = f"Resize dimensions must be positive, got {n_in} -> {n_out}."
        raise ValueError(err_msg)
    if mode not in RESIZE_MODES:
        err_msg = f"Resize mode '{mode}' not known, use one of {RESIZE_MODES}."
        raise ValueError(err_msg)

    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    out_idxs = np.arange(n_out)
    if mode == 'nearest':
        src = np.minimum(np.floor((out_idxs + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)
        matrix[out_idxs, src] = 1.
    else:
        src = np.clip((out_idxs + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lower = np.floor(src).astype(np.int64)
        upper = np.minimum(lower + 1, n_in - 1)
        frac = src - lower
        np.add.at(matrix, (out_idxs, lower), 1. - frac)
        np.add.at(matrix, (out_idxs, upper), frac)
    matrix.setflags(write=False)
    return matrix


def nearest_indices(n_in, n_out) -> np.ndarray:
    """ Source index of every output sample for nearest-neighbour resizing. """
    return np.argmax(resize_matrix(n_in, n_out, 'nearest'), axis=1)


def coverage_indices(n_in, n_out) -> np.ndarray:
    """ Output cell every input sample falls into when `n_in` samples are pooled into `n_out >= 1` cells. """
    if n_in < 1 or n_out < 1:
        err_msg = f"Resize dimensions must be positive, got {n_in} -> {n_out}."
        raise ValueError(err_msg)
    return (np.arange(n_in, dtype=np.int64) * n_out) // n_in


def label_coverage(labels, n_labels, out_h, out_w) -> np.ndarray:
    """
    Resizes a label plane into one bit mask per label, setting every cell that covers at least one pixel of it.

    Downsampled axes pool the pixels, so no label loses a thin part; upsampled axes are first resized by
    nearest-neighbour sampling.

    Parameters
    ----------
    labels : np.ndarray
        Integer plane (height, width); negative values are unlabelled.
    n_labels : int
        Number of label values 0..n_labels-1.
    out_h, out_w : int
        Output size.

    Returns
    -------
    np.ndarray :
        Boolean stack (n_labels, out_h, out_w).

    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        err_msg = f"Label planes must be 2D, got {labels.ndim} dimension(s)."
        raise ValueError(err_msg)
    if out_h > labels.shape[0]:
        labels = labels[nearest_indices(labels.shape[0], out_h)]
    if out_w > labels.shape[1]:
        labels = labels[:, nearest_indices(labels.shape[1], out_w)]
    ys, xs = np.nonzero(labels >= 0)
    cells = coverage_indices(labels.shape[0], out_h)[ys] * out_w + coverage_indices(labels.shape[1], out_w)[xs]
    planes = np.zeros((n_labels, out_h * out_w), dtype=bool)
    planes[labels[ys, xs], cells] = True
    return planes.reshape(n_labels, out_h, out_w)


def coverage_resize(mask, out_h, out_w) -> np.ndarray:
    """ Resizes a bit mask; an output cell is set if any input pixel it covers is set. """
    mask = as_bitmask(mask)
    return label_coverage(mask.astype(np.int64) - 1, 1, out_h, out_w)[0]


def resize_array(data, out_h, out_w, mode='bilinear') -> np.ndarray:
    """
    Resizes the last two axes of `data`.

    Boolean input with mode 'nearest' stays boolean; everything else is returned as float64.

    """
    data = np.asarray(data)
    in_h, in_w = data.shape[-2:]
    if mode == 'nearest':
        rows = nearest_indices(in_h, out_h)
        cols = nearest_indices(in_w, out_w)
        return data[..., rows[:, None], cols[None, :]]
    ry = resize_matrix(in_h, out_h, mode)
    rx = resize_matrix(in_w, out_w, mode)
    return ry @ data.astype(np.float64, copy=False) @ rx.T


def resize_array_adjoint(grad_out, in_h, in_w, mode='bilinear') -> np.ndarray:
    """ Gradient of `resize_array` with respect to its input, given the gradient of its output. """
    out_h, out_w = grad_out.shape[-2:]
    ry = resize_matrix(in_h, out_h, mode)
    rx = resize_matrix(in_w, out_w, mode)
    return ry.T @ grad_out @ rx


def resize_mask(mask, out_w, out_h, mode='bilinear'):
    """
    Resizes a soft or bit mask.

    Parameters
    ----------
    mask : SoftMask or np.ndarray
        Mask to resize. Boolean arrays are resized as bit masks.
    out_w : int
        Output width.
    out_h : int
        Output height.
    mode : str, optional
        'bilinear' (default, soft values) or 'nearest' (binary values).

    Returns
    -------
    SoftMask or np.ndarray :
        Resized mask of the same kind as the input.

    """
    if out_w < 1 or out_h < 1:
        err_msg = f"Output dimensions must be positive, got {out_w}x{out_h}."
        raise ValueError(err_msg)
    if isinstance(mask, SoftMask):
        return SoftMask(resize_array(mask.data, out_h, out_w, mode), is_logit=mask.is_logit)
    mask = as_bitmask(mask)
    if mode == 'nearest':
        return resize_array(mask, out_h, out_w, 'nearest')
    return resize_array(mask, out_h, out_w, mode) >= 0.5


def upsample_binary(mask, out_h, out_w) -> np.ndarray:
    """
    Bilinear resize of a bit mask followed by thresholding at 0.5.

    Only output rows and columns that are influenced by nonzero input cells are evaluated.

    """
    mask = as_bitmask(mask)
    out = np.zeros((out_h, out_w), dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return out
    cols = np.flatnonzero(mask.any(axis=0))
    r_a, r_b, c_a, c_b = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    ry = resize_matrix(mask.shape[0], out_h, 'bilinear')[:, r_a:r_b]
    rx = resize_matrix(mask.shape[1], out_w, 'bilinear')[:, c_a:c_b]
    out_rows = np.flatnonzero(ry.sum(axis=1) > 0)
    out_cols = np.flatnonzero(rx.sum(axis=1) > 0)
    values = ry[out_rows] @ mask[r_a:r_b, c_a:c_b].astype(np.float64) @ rx[out_cols].T
    out[np.ix_(out_rows, out_cols)] = values >= 0.5
    return out


def rle_encode(mask) -> RleMask:
    """ Encodes a bit mask to column-major, zero-first run lengths. """
    mask = as_bitmask(mask)
    height, width = mask.shape
    flat = mask.ravel(order='F').astype(np.int8)
    if flat.size == 0:
        return RleMask(width, height, [0])
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds)
    if flat[0] == 1:
        counts = np.concatenate(([0], counts))
    return RleMask(width, height, counts)


def rle_decode(rle: RleMask) -> np.ndarray:
    """ Decodes run lengths back to a bit mask of shape (height, width). """
    if not isinstance(rle, RleMask):
        rle = RleMask.from_dict(rle)
    values = (np.arange(rle.counts.size) % 2).astype(bool)
    flat = np.repeat(values, rle.counts)
    return flat.reshape((rle.height, rle.width), order='F')


def rle_area(rle: RleMask) -> int:
    """ Number of foreground pixels of a run-length mask. """
    return rle.area


def point_in_mask(point, mask) -> bool:
    """
    Looks up the raster cell containing a point.

    Parameters
    ----------
    point : PointPrompt or tuple
        Object with `x`/`y` attributes or an (x, y) pair, given in mask pixel coordinates.
    mask : np.ndarray
        Bit mask.

    Returns
    -------
    bool :
        Value of cell (floor(y), floor(x)).

    """
    x, y = _xy(point)
    height, width = np.shape(mask)
    if not (0 <= x < width and 0 <= y < height):
        err_msg = f"Point ({x}, {y}) lies outside the mask canvas {width}x{height}."
        raise ValueError(err_msg)
    return bool(mask[int(np.floor(y)), int(np.floor(x))])


def _xy(point) -> Tuple[float, float]:
    if hasattr(point, 'x') and hasattr(point, 'y'):
        return float(point.x), float(point.y)
    x, y = point
    return float(x), float(y)
