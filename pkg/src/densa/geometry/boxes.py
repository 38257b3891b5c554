""" Axis-aligned boxes, box IoU and greedy non-maximum suppression. """

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class BoxXYXY:
    """
    Axis-aligned box in absolute pixel coordinates.

    The box covers the half-open area [x1, x2) x [y1, y2). Normalised coordinates only exist at I/O boundaries.

    """
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            err_msg = f"Box coordinates must be finite, got {coords}."
            raise ValueError(err_msg)
        if self.x1 > self.x2 or self.y1 > self.y2:
            err_msg = f"Box corners are not ordered: {coords}."
            raise ValueError(err_msg)

    @classmethod
    def from_xywh(cls, x, y, width, height) -> "BoxXYXY":
        """ Creates a box from its upper-left corner, width and height. """
        return cls(float(x), float(y), float(x) + float(width), float(y) + float(height))

    @classmethod
    def from_array(cls, coords) -> "BoxXYXY":
        """ Creates a box from a sequence (x1, y1, x2, y2). """
        x1, y1, x2, y2 = (float(c) for c in coords)
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2., (self.y1 + self.y2) / 2.

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_xywh(self) -> Tuple[float, float, float, float]:
        return self.x1, self.y1, self.width, self.height

    def translate(self, dx, dy) -> "BoxXYXY":
        return BoxXYXY(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def clip(self, width, height) -> "BoxXYXY":
        """ Clips the box to the canvas [0, width) x [0, height). """
        x1, x2 = min(max(self.x1, 0.), width), min(max(self.x2, 0.), width)
        y1, y2 = min(max(self.y1, 0.), height), min(max(self.y2, 0.), height)
        return BoxXYXY(x1, y1, x2, y2)


def as_box_array(boxes) -> np.ndarray:
    """
    Converts boxes to an array of shape (N, 4).

    Parameters
    ----------
    boxes : np.ndarray or sequence of BoxXYXY or sequence of 4-sequences
        Boxes in XYXY order.

    Returns
    -------
    np.ndarray :
        Float64 array of shape (N, 4).

    """
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        arr = np.array([box.to_array() if isinstance(box, BoxXYXY) else np.asarray(box, dtype=np.float64)
                        for box in boxes], dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        err_msg = f"Boxes must have shape (N, 4), got {arr.shape}."
        raise ValueError(err_msg)
    return arr


def iou_boxes(a: BoxXYXY, b: BoxXYXY) -> float:
    """ Intersection over union of two boxes; 0 when the union is empty. """
    inter_w = max(0., min(a.x2, b.x2) - max(a.x1, b.x1))
    inter_h = max(0., min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    if union <= 0:
        return 0.
    return inter / union


def box_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """
    Pairwise IoU between two sets of boxes.

    Parameters
    ----------
    boxes_a : array-like
        First set of N boxes in XYXY order.
    boxes_b : array-like
        Second set of M boxes in XYXY order.

    Returns
    -------
    np.ndarray :
        IoU matrix of shape (N, M). Entries with an empty union are 0.

    """
    a = as_box_array(boxes_a)
    b = as_box_array(boxes_b)
    inter_w = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    inter_h = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = inter_w * inter_h
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    iou = np.zeros_like(inter)
    np.divide(inter, union, out=iou, where=union > 0)
    return iou


def score_order(scores) -> np.ndarray:
    """ Indices sorting `scores` descending, ties broken by the lower input index. """
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def nms(boxes, scores, iou_threshold=0.5) -> np.ndarray:
    """
    Greedy non-maximum suppression.

    Boxes are visited in descending score order (ties: lower input index first). A box is suppressed if its IoU
    with an already retained box is larger than `iou_threshold`.

    Parameters
    ----------
    boxes : array-like
        N boxes in XYXY order.
    scores : array-like
        N finite scores.
    iou_threshold : float, optional
        Suppression threshold (default 0.5).

    Returns
    -------
    np.ndarray :
        Retained input indices in visiting order.

    """
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (boxes.shape[0],):
        err_msg = f"Number of scores ({scores.size}) does not match number of boxes ({boxes.shape[0]})."
        raise ValueError(err_msg)
    if not np.all(np.isfinite(scores)):
        err_msg = "Scores must be finite."
        raise ValueError(err_msg)

    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    order = score_order(scores)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        w = np.maximum(0., np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        h = np.maximum(0., np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = w * h
        union = areas[i] + areas[rest] - inter
        ovr = np.zeros_like(inter)
        np.divide(inter, union, out=ovr, where=union > 0)
        order = rest[ovr <= iou_threshold]

    return np.array(keep, dtype=np.int64)


def nms_detections(dets: Sequence[Tuple[BoxXYXY, float]], iou_threshold=0.5) -> np.ndarray:
    """ `nms` on a list of (box, score) pairs. """
    if len(dets) == 0:
        return np.zeros(0, dtype=np.int64)
    boxes, scores = zip(*dets)
    return nms(boxes, scores, iou_threshold)
