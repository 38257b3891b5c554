"""
Box detection metrics: AP at IoU 0.5 (all-point interpolation), log-average miss rate over FPPI in [1e-2, 1e0],
recall and average false positives per image.

All metrics are computed from per-image greedy matches: detections are visited by descending score and take the
unmatched ground truth box of highest IoU, provided that IoU reaches the threshold. Detections matching an ignored
ground truth box count neither as true nor as false positive.

"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import yaml

from densa.geometry.boxes import as_box_array, box_iou_matrix, score_order

logger = logging.getLogger(__name__)

FPPI_REFS = np.logspace(-2., 0., 9)
MR_FLOOR = 1e-6
VISIBILITY_BINS = (0., 0.3, 0.7, 1.)


@dataclass(frozen=True, eq=False)
class MatchResult:
    """
    Greedy matching of one image.

    Parameters
    ----------
    scores : np.ndarray
        Detection scores (N,).
    det_gt : np.ndarray
        Matched ground truth index per detection, -1 if unmatched.
    det_ignored : np.ndarray
        Detections matched to an ignored ground truth box.
    gt_matched : np.ndarray
        Covered flag per ground truth box (M,).
    gt_ignore : np.ndarray
        Ignore flag per ground truth box.

    """
    scores: np.ndarray
    det_gt: np.ndarray
    det_ignored: np.ndarray
    gt_matched: np.ndarray
    gt_ignore: np.ndarray

    @property
    def tp(self) -> np.ndarray:
        return (self.det_gt >= 0) & ~self.det_ignored

    @property
    def fp(self) -> np.ndarray:
        return self.det_gt < 0

    @property
    def n_gt(self) -> int:
        return int(np.count_nonzero(~self.gt_ignore))

    @property
    def n_det(self) -> int:
        return self.scores.size

    @property
    def n_covered(self) -> int:
        return int(np.count_nonzero(self.gt_matched & ~self.gt_ignore))

    @property
    def order(self) -> np.ndarray:
        return score_order(self.scores)


def match(det_boxes, det_scores, gt_boxes, iou_thr=0.5, gt_ignore=None) -> MatchResult:
    """
    Greedy score-ordered matching of detections to ground truth boxes.

    Parameters
    ----------
    det_boxes : array-like
        Detection boxes (N, 4), XYXY.
    det_scores : array-like
        Finite detection scores (N,).
    gt_boxes : array-like
        Ground truth boxes (M, 4), XYXY.
    iou_thr : float, optional
        Minimum IoU of a match (default 0.5).
    gt_ignore : array-like, optional
        Ignore flag per ground truth box.

    Returns
    -------
    MatchResult

    """
    dets = as_box_array(det_boxes)
    gts = as_box_array(gt_boxes)
    scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    if scores.size != dets.shape[0]:
        err_msg = f"Number of scores ({scores.size}) does not match number of detections ({dets.shape[0]})."
        raise ValueError(err_msg)
    if not np.all(np.isfinite(scores)):
        err_msg = "Detection scores must be finite."
        raise ValueError(err_msg)
    ignore = np.zeros(gts.shape[0], dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)

    det_gt = np.full(dets.shape[0], -1, dtype=np.int64)
    det_ignored = np.zeros(dets.shape[0], dtype=bool)
    gt_matched = np.zeros(gts.shape[0], dtype=bool)
    if dets.shape[0] and gts.shape[0]:
        ious = box_iou_matrix(dets, gts)
        for d in score_order(scores):
            # regular boxes first, ignored boxes only absorb otherwise unmatched detections
            for pool in (~ignore, ignore):
                cand = np.where(pool & ~gt_matched & (ious[d] >= iou_thr), ious[d], -1.)
                g = int(np.argmax(cand))
                if cand[g] >= 0:
                    det_gt[d] = g
                    det_ignored[d] = bool(ignore[g])
                    if not ignore[g]:
                        gt_matched[g] = True
                    break
    return MatchResult(scores, det_gt, det_ignored, gt_matched, ignore)


def _ranked(matches: Sequence[MatchResult]):
    """ Globally score-sorted TP/FP flags of all non-ignored detections and the number of ground truth boxes. """
    scores = np.concatenate([m.scores[~m.det_ignored] for m in matches]) if matches else np.zeros(0)
    tp = np.concatenate([m.tp[~m.det_ignored] for m in matches]) if matches else np.zeros(0, dtype=bool)
    order = score_order(scores)
    n_gt = sum(m.n_gt for m in matches)
    return scores[order], tp[order], n_gt


def _warn_no_gt(metric):
    wrn_msg = f"No ground truth boxes available, {metric} is set to 0."
    warnings.warn(wrn_msg)


def average_precision(matches: Sequence[MatchResult]) -> float:
    """ Exact area under the interpolated precision-recall curve of all images' detections. """
    _, tp, n_gt = _ranked(matches)
    if n_gt == 0:
        _warn_no_gt('AP')
        return 0.
    if tp.size == 0:
        return 0.
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    rec = np.concatenate(([0.], cum_tp / n_gt, [1.]))
    prec = np.concatenate(([1.], cum_tp / (cum_tp + cum_fp), [0.]))
    prec = np.flip(np.maximum.accumulate(np.flip(prec)))
    steps = np.flatnonzero(rec[1:] != rec[:-1])
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def miss_rate_curve(matches: Sequence[MatchResult], n_images):
    """
    FPPI and miss rate at every distinct score threshold, starting with the empty detection set.

    Returns
    -------
    fppi, miss_rate : np.ndarray

    """
    scores, tp, n_gt = _ranked(matches)
    cum_tp = np.concatenate(([0], np.cumsum(tp)))
    cum_fp = np.concatenate(([0], np.cumsum(~tp)))
    # cut after the last detection of every distinct score
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True)) + 1 if scores.size else []
    cuts = np.concatenate(([0], ends)).astype(np.int64)
    fppi = cum_fp[cuts] / n_images
    miss_rate = 1. - cum_tp[cuts] / max(n_gt, 1)
    return fppi, miss_rate


def log_average_miss_rate(matches: Sequence[MatchResult], n_images) -> float:
    """
    Log-average miss rate MR^-2.

    For 9 FPPI reference points spaced logarithmically in [1e-2, 1], the lowest miss rate reachable without
    exceeding the reference FPPI is taken; the result is the geometric mean of these miss rates, each clamped below
    at 1e-6.

    """
    if n_images < 1:
        err_msg = f"Number of images must be at least 1, got {n_images}."
        raise ValueError(err_msg)
    if sum(m.n_gt for m in matches) == 0:
        _warn_no_gt('MR-2')
        return 0.
    fppi, miss_rate = miss_rate_curve(matches, n_images)
    samples = np.array([miss_rate[fppi <= ref].min() for ref in FPPI_REFS])
    return float(np.exp(np.mean(np.log(np.maximum(samples, MR_FLOOR)))))


def recall(matches: Sequence[MatchResult]) -> float:
    """ Covered ground truth boxes over all ground truth boxes. """
    n_gt = sum(m.n_gt for m in matches)
    if n_gt == 0:
        _warn_no_gt('recall')
        return 0.
    return sum(m.n_covered for m in matches) / n_gt


def average_false_positives(matches: Sequence[MatchResult], n_images=None) -> float:
    """ False positives per image. """
    n_images = len(matches) if n_images is None else n_images
    if n_images < 1:
        return 0.
    return float(sum(np.count_nonzero(m.fp) for m in matches)) / n_images


@dataclass(frozen=True, eq=False)
class EvalImage:
    """
    Detections and ground truth of one image.

    Parameters
    ----------
    det_boxes : np.ndarray
        Detection boxes (N, 4).
    det_scores : np.ndarray
        Detection scores (N,).
    gt_boxes : np.ndarray
        Ground truth boxes (M, 4).
    gt_ignore : np.ndarray, optional
        Ignore flag per ground truth box.
    visibility : np.ndarray, optional
        Visible fraction per ground truth box, used for the occlusion breakdown.

    """
    det_boxes: np.ndarray
    det_scores: np.ndarray
    gt_boxes: np.ndarray
    gt_ignore: Optional[np.ndarray] = None
    visibility: Optional[np.ndarray] = None


def _bin_key(lower, upper) -> str:
    return f"vis_{lower:.2f}_{upper:.2f}"


def evaluate(images: Sequence[EvalImage], iou_thr=0.5, visibility_bins=VISIBILITY_BINS) -> dict:
    """
    Computes the metric report of a set of images.

    Parameters
    ----------
    images : sequence of EvalImage
        Per-image detections and ground truth.
    iou_thr : float, optional
        Match threshold (default 0.5).
    visibility_bins : sequence of float, optional
        Bin edges of the occlusion breakdown; the last bin includes its upper edge. Skipped if no image carries
        visibilities.

    Returns
    -------
    dict :
        'ap50', 'mr2', 'recall', 'avg_fp', 'n_images', 'n_gt', 'n_det' and, per visibility bin, 'ap50_<bin>',
        'recall_<bin>' and 'n_gt_<bin>'.

    """
    matches = [match(img.det_boxes, img.det_scores, img.gt_boxes, iou_thr, img.gt_ignore) for img in images]
    n_images = max(len(images), 1)
    metrics = {'ap50': average_precision(matches), 'mr2': log_average_miss_rate(matches, n_images),
               'recall': recall(matches), 'avg_fp': average_false_positives(matches, n_images),
               'n_images': len(images), 'n_gt': int(sum(m.n_gt for m in matches)),
               'n_det': int(sum(m.n_det for m in matches))}

    if visibility_bins and images and all(img.visibility is not None for img in images):
        edges = list(visibility_bins)
        for b, (lower, upper) in enumerate(zip(edges[:-1], edges[1:])):
            last = b == len(edges) - 2
            bin_matches = []
            for img in images:
                vis = np.asarray(img.visibility, dtype=np.float64)
                inside = (vis >= lower) & ((vis <= upper) if last else (vis < upper))
                ignore = ~inside if img.gt_ignore is None else ~inside | np.asarray(img.gt_ignore, dtype=bool)
                bin_matches.append(match(img.det_boxes, img.det_scores, img.gt_boxes, iou_thr, ignore))
            key = _bin_key(lower, upper)
            n_gt = int(sum(m.n_gt for m in bin_matches))
            metrics[f"n_gt_{key}"] = n_gt
            with warnings.catch_warnings():
                warnings.simplefilter('ignore')
                metrics[f"ap50_{key}"] = average_precision(bin_matches)
                metrics[f"recall_{key}"] = recall(bin_matches)
    return {key: (float(value) if isinstance(value, (float, np.floating)) else value)
            for key, value in metrics.items()}


def write_metrics(metrics, filepath, fingerprint=None):
    """ Writes a metrics mapping as a flat YAML file, optionally with the configuration fingerprint. """
    content = dict(metrics)
    if fingerprint is not None:
        content['fingerprint'] = fingerprint
    with open(filepath, 'w') as f:
        yaml.safe_dump(content, f, sort_keys=True)
    logger.info(f"Wrote metrics to '{filepath}'.")
