"""
Part-whole discrimination of candidate masks.

Two scores are fused per candidate mask:

* the refined IoU score: a parallel MLP over [IoU token, mask token] added to the frozen decoder's own IoU
  prediction;
* the semantic score: the candidate's logits, downscaled to the feature grid, become spatial softmax weights for
  pooling the adapted semantic features into one semantic token per candidate, which the shared classifier turns
  into a foreground probability.

The joint score is their product; the best of the four candidates of a prompt is the one with the highest joint
score.

"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from densa.backbones.base import DecodeResult, FeatureMap, N_CANDIDATES
from densa.geometry.masks import coverage_resize, resize_array
from densa.heads.layers import sigmoid, softmax
from densa.heads.model import Heads

TOKEN_ABLATIONS = ('mask', 'iou', 'semantic')


@dataclass(frozen=True, eq=False)
class JointScores:
    """
    Scores of N prompts x 4 candidates.

    Parameters
    ----------
    s_iou : np.ndarray
        Refined IoU scores.
    s_cls : np.ndarray
        Semantic foreground probabilities in (0, 1).
    s : np.ndarray
        Joint scores `s_iou * s_cls`.

    """
    s_iou: np.ndarray
    s_cls: np.ndarray
    s: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]


def check_token_ablation(token_ablation) -> tuple:
    token_ablation = tuple(token_ablation or ())
    unknown = set(token_ablation) - set(TOKEN_ABLATIONS)
    if unknown:
        err_msg = f"Token ablation(s) {sorted(unknown)} not known, use any of {TOKEN_ABLATIONS}."
        raise ValueError(err_msg)
    return token_ablation


def iou_head_inputs(decoded: DecodeResult, token_ablation=()) -> np.ndarray:
    """ Channel-wise concatenation of the IoU token (repeated per candidate) and the mask tokens, (N, 4, 2 C_tok). """
    iou_token = np.repeat(decoded.iou_token, N_CANDIDATES, axis=1)
    mask_tokens = decoded.mask_tokens
    if 'iou' in token_ablation:
        iou_token = np.zeros_like(iou_token)
    if 'mask' in token_ablation:
        mask_tokens = np.zeros_like(mask_tokens)
    return np.concatenate([iou_token, mask_tokens], axis=2)


def refine_iou(decoded: DecodeResult, heads: Heads, token_ablation=()) -> Tuple[np.ndarray, tuple]:
    """
    Refined IoU scores.

    Parameters
    ----------
    decoded : DecodeResult
        Decoder output of N prompts.
    heads : Heads
        Holds the parallel IoU head.
    token_ablation : tuple, optional
        Tokens to replace by zeros ('mask', 'iou').

    Returns
    -------
    s_iou : np.ndarray
        Scores (N, 4): parallel head output plus the frozen native IoU prediction.
    cache : tuple
        Values needed by the backward pass.

    """
    inputs = iou_head_inputs(decoded, check_token_ablation(token_ablation))
    if inputs.shape[2] != heads.iou_head.fc1.n_in:
        err_msg = f"Token channels ({inputs.shape[2] // 2}) do not match the IoU head " \
                  f"({heads.iou_head.fc1.n_in // 2})."
        raise ValueError(err_msg)
    delta, cache = heads.iou_head.forward(inputs)
    return delta[..., 0] + decoded.native_iou, cache


def pooling_weights(mask_logits, grid_shape) -> np.ndarray:
    """ Spatial softmax of the candidate logits downscaled (bilinear) to the feature grid, (N, 4, h*w). """
    mask_logits = np.asarray(mask_logits, dtype=np.float64)
    h, w = grid_shape
    downscaled = resize_array(mask_logits, h, w, 'bilinear')
    flat = downscaled.reshape(downscaled.shape[:-2] + (h * w,))
    return softmax(flat, axis=-1)


def semantic_tokens(weights, adapted: FeatureMap) -> np.ndarray:
    """ Convex combinations (N, 4, C) of the feature cells. """
    return weights @ adapted.data.reshape(-1, adapted.channels)


def semantic_score(mask_logits, adapted: FeatureMap, heads: Heads,
                   token_ablation=()) -> Tuple[np.ndarray, np.ndarray, tuple]:
    """
    Semantic tokens and semantic scores of candidate masks.

    Parameters
    ----------
    mask_logits : np.ndarray
        Candidate logits (N, 4, r, r) at the decoder's native resolution.
    adapted : FeatureMap
        Adapter output of the semantic features, the same features the heatmap is computed from.
    heads : Heads
        Holds the shared classifier.
    token_ablation : tuple, optional
        'semantic' replaces the semantic tokens by zeros.

    Returns
    -------
    tokens : np.ndarray
        Semantic tokens (N, 4, C).
    s_cls : np.ndarray
        Foreground probabilities (N, 4).
    cache : tuple
        Values needed by the backward pass.

    """
    mask_logits = np.asarray(mask_logits)
    if mask_logits.ndim != 4 or mask_logits.shape[1] != N_CANDIDATES:
        err_msg = f"Mask logits must have shape (N, {N_CANDIDATES}, r, r), got {mask_logits.shape}."
        raise ValueError(err_msg)
    weights = pooling_weights(mask_logits, (adapted.height, adapted.width))
    if 'semantic' in check_token_ablation(token_ablation):
        tokens = np.zeros(mask_logits.shape[:2] + (adapted.channels,))
    else:
        tokens = semantic_tokens(weights, adapted)
    logits, cls_cache = heads.cls.forward(tokens)
    s_cls = sigmoid(logits[..., 0])
    return tokens, s_cls, (weights, cls_cache, s_cls)


def joint_score(s_iou, s_cls) -> np.ndarray:
    s_iou, s_cls = np.asarray(s_iou), np.asarray(s_cls)
    if s_iou.shape != s_cls.shape:
        err_msg = f"Score shapes {s_iou.shape} and {s_cls.shape} differ."
        raise ValueError(err_msg)
    return s_iou * s_cls


def target_scores(candidates, gt_masks, owners) -> np.ndarray:
    """
    Training targets of candidate masks.

    Parameters
    ----------
    candidates : np.ndarray
        Candidate logits or bit masks (N, 4, r, r); logits are binarised at 0.
    gt_masks : sequence of np.ndarray
        Visible (or pseudo) instance masks at image resolution, pooled to the candidate resolution by coverage.
    owners : np.ndarray
        Index into `gt_masks` of the mask containing each prompt, -1 for background prompts.

    Returns
    -------
    np.ndarray :
        Targets (N, 4): IoU with the owning mask for foreground prompts, 0 for background prompts.

    """
    candidates = np.asarray(candidates)
    binary = candidates if candidates.dtype == bool else candidates > 0
    n, _, rows, cols = binary.shape
    owners = np.asarray(owners, dtype=np.int64).reshape(-1)
    if owners.size != n:
        err_msg = f"Got {owners.size} prompt owners for {n} prompts."
        raise ValueError(err_msg)
    targets = np.zeros((n, N_CANDIDATES))
    native = {}
    for i in np.flatnonzero(owners >= 0):
        k = int(owners[i])
        if k not in native:
            native[k] = coverage_resize(np.asarray(gt_masks[k], dtype=bool), rows, cols)
        gt = native[k]
        inter = np.count_nonzero(binary[i] & gt, axis=(1, 2))
        union = np.count_nonzero(binary[i] | gt, axis=(1, 2))
        targets[i] = np.where(union > 0, inter / np.maximum(union, 1), 0.)
    return targets


def iou_loss_and_grad(s, targets) -> Tuple[float, np.ndarray]:
    """ Mean squared error and its gradient with respect to `s`. """
    s, targets = np.asarray(s, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if s.shape != targets.shape:
        err_msg = f"Scores {s.shape} and targets {targets.shape} differ in shape."
        raise ValueError(err_msg)
    if s.size == 0:
        return 0., np.zeros_like(s)
    diff = s - targets
    return float(np.mean(diff ** 2)), 2. * diff / s.size


def iou_loss(s, targets) -> float:
    """ Mean squared error between joint scores (or a `JointScores`) and their targets. """
    if isinstance(s, JointScores):
        s = s.s
    return iou_loss_and_grad(s, targets)[0]


def select_best(s, masks) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Best candidate per prompt.

    Parameters
    ----------
    s : np.ndarray
        Joint scores (N, 4).
    masks : np.ndarray
        Candidate masks (N, 4, r, r).

    Returns
    -------
    best_masks : np.ndarray
        (N, r, r)
    best_scores : np.ndarray
        (N,)
    best_idxs : np.ndarray
        Candidate index per prompt; ties resolve to the lowest index.

    """
    s = np.asarray(s, dtype=np.float64)
    idxs = np.argmax(s, axis=1) if s.size else np.zeros(0, dtype=np.int64)
    rows = np.arange(s.shape[0])
    return np.asarray(masks)[rows, idxs], s[rows, idxs], idxs


class PwdScorer:
    """ Joint part-whole scores of decoded prompts on one image. """

    def __init__(self, heads: Heads, adapted: FeatureMap, token_ablation=()):
        """
        Constructor of `PwdScorer`.

        Parameters
        ----------
        heads : Heads
            Trained heads.
        adapted : FeatureMap
            Adapter output of the image's semantic features.
        token_ablation : tuple, optional
            Tokens to replace by zeros, any of 'mask', 'iou', 'semantic'.

        """
        self.heads = heads
        self.adapted = adapted
        self.token_ablation = check_token_ablation(token_ablation)

    def __call__(self, decoded: DecodeResult) -> JointScores:
        s_iou, _ = refine_iou(decoded, self.heads, self.token_ablation)
        _, s_cls, _ = semantic_score(decoded.masks, self.adapted, self.heads, self.token_ablation)
        return JointScores(s_iou, s_cls, joint_score(s_iou, s_cls))


class NativeIouScorer:
    """ Frozen decoder IoU predictions only. """

    def __call__(self, decoded: DecodeResult) -> JointScores:
        s_iou = np.asarray(decoded.native_iou, dtype=np.float64)
        return JointScores(s_iou, np.ones_like(s_iou), s_iou.copy())
