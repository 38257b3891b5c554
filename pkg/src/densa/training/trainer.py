"""
Few-shot training of the heads on box-annotated images.

The total loss of an image is the dice loss of the heatmap against the merged pseudo mask plus the mean squared
error of the joint scores of sampled training prompts against their targets. Backbone outputs are computed once per
image and stay fixed; only the adapter, the shared classifier and the parallel IoU head receive gradients.

"""

import logging
import warnings
from dataclasses import dataclass, field, asdict
from typing import Dict, List, NamedTuple, Sequence

import numpy as np
import pandas as pd

from densa.backbones.base import Backend, FeatureMap, SceneImage
from densa.geometry.masks import as_bitmask, resize_array_adjoint
from densa.geometry.prompts import PromptSet
from densa.heads.layers import sigmoid
from densa.heads.model import Heads
from densa.heads.prompt_gen import decode_instance_masks, merge_masks, upsample_heat, dice_loss_and_grad, \
    PSEUDO_MASK_SIZE
from densa.heads.pwdnet import iou_head_inputs, pooling_weights, target_scores, iou_loss_and_grad, \
    check_token_ablation
from densa.training.optimizer import Adam

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['iteration', 'L_fg', 'L_iou', 'L']


class NonFiniteLossError(FloatingPointError):
    """ Raised if the training loss turns NaN or infinite; `diagnostics` holds the state at failure. """

    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__(f"Non-finite training loss in iteration {diagnostics.get('iteration')}: "
                         f"L_fg={diagnostics.get('L_fg')}, L_iou={diagnostics.get('L_iou')}.")


@dataclass(frozen=True)
class TrainConfig:
    """
    Training settings.

    Parameters
    ----------
    learning_rate : float
        Adam learning rate (default 1e-5).
    weight_decay : float
        L2 penalty (default 1e-4).
    beta1, beta2 : float
        Adam moment decay rates (defaults 0.9 and 0.99).
    adam_eps : float
        Adam denominator offset (default 1e-8).
    iterations : int
        Optimiser steps (default 2000).
    batch_images : int
        Images per step (default 1).
    pos_points_per_image, neg_points_per_image : int
        Training prompts drawn per image and step (defaults 32 and 32).
    point_pool_factor : int
        Size of the pre-decoded per-image point pool relative to the per-step counts (default 2).
    decode_batch_size : int
        Prompts per decoder call while building the pools (default 64).
    token_ablation : tuple
        Tokens replaced by zeros, any of 'mask', 'iou', 'semantic' (default none).
    seed : int
        Seed of point sampling and image order (default 0).
    log_every : int
        Iterations between progress log messages (default 100).

    """
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    iterations: int = 2000
    batch_images: int = 1
    pos_points_per_image: int = 32
    neg_points_per_image: int = 32
    point_pool_factor: int = 2
    decode_batch_size: int = 64
    token_ablation: tuple = ()
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        for name in ('batch_images', 'point_pool_factor', 'decode_batch_size', 'log_every'):
            if getattr(self, name) < 1:
                err_msg = f"Training setting '{name}' must be positive, got {getattr(self, name)}."
                raise ValueError(err_msg)
        for name in ('iterations', 'pos_points_per_image', 'neg_points_per_image'):
            if getattr(self, name) < 0:
                err_msg = f"Training setting '{name}' must not be negative, got {getattr(self, name)}."
                raise ValueError(err_msg)
        object.__setattr__(self, 'token_ablation', check_token_ablation(self.token_ablation))

    def to_dict(self) -> dict:
        settings = asdict(self)
        settings['token_ablation'] = list(self.token_ablation)
        return settings


@dataclass(frozen=True, eq=False)
class TrainingPoints:
    """
    Labelled training prompts.

    Parameters
    ----------
    prompts : PromptSet
        Pixel-centre points, positives first.
    positive : np.ndarray
        Foreground flag per prompt.
    shortfall : dict
        Requested minus available counts ('pos', 'neg') where the mask could not supply enough pixels.

    """
    prompts: PromptSet
    positive: np.ndarray
    shortfall: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.prompts)


def sample_training_points(mask, n_pos, n_neg, seed=0) -> TrainingPoints:
    """
    Draws positive prompts on mask pixels and negative prompts on background pixels.

    Pixels are drawn uniformly without replacement; each prompt sits at its pixel centre. If a class has fewer
    pixels than requested, all of them are used and the shortfall is warned about and recorded.

    Parameters
    ----------
    mask : np.ndarray
        Pseudo foreground mask at image resolution.
    n_pos, n_neg : int
        Requested numbers of positives and negatives.
    seed : int or sequence, optional
        Seed of the draws (default 0).

    Returns
    -------
    TrainingPoints

    """
    mask = as_bitmask(mask)
    rng = np.random.default_rng(seed)
    xy, positive, shortfall = [], [], {}
    for label, n, key in ((True, n_pos, 'pos'), (False, n_neg, 'neg')):
        flat = np.flatnonzero(mask.ravel() == label)
        if flat.size < n:
            shortfall[key] = int(n - flat.size)
            wrn_msg = f"Only {flat.size} {'foreground' if label else 'background'} pixel(s) available, " \
                      f"{n} requested."
            warnings.warn(wrn_msg)
        picks = rng.choice(flat, size=min(n, flat.size), replace=False) if flat.size else flat
        rows, cols = np.unravel_index(picks, mask.shape)
        xy.append(np.stack([cols + 0.5, rows + 0.5], axis=1))
        positive.append(np.full(picks.size, label))
    return TrainingPoints(PromptSet(np.concatenate(xy)), np.concatenate(positive), shortfall)


class LabeledImage(NamedTuple):
    """ Image and its annotated boxes (N, 4) in XYXY order. """
    image: SceneImage
    boxes: np.ndarray


@dataclass(frozen=True, eq=False)
class TrainingExample:
    """ Everything the loss needs from one image; backbone outputs are fixed once computed. """
    raw_feat: FeatureMap
    pseudo_mask: np.ndarray
    points: TrainingPoints
    owners: np.ndarray
    weights: np.ndarray
    iou_inputs: np.ndarray
    native_iou: np.ndarray
    targets: np.ndarray
    token_ablation: tuple = ()

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.points.positive)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(~self.points.positive)


def prepare_example(image: SceneImage, boxes, backend: Backend, cfg: TrainConfig, seed=0) -> TrainingExample:
    """
    Runs the frozen backbones on one image and builds its pseudo masks and point pool.

    Parameters
    ----------
    image : SceneImage
        Training image.
    boxes : array-like
        Annotated boxes (N, 4) in XYXY order.
    backend : Backend
        Frozen backbones.
    cfg : TrainConfig
        Training settings.
    seed : int or sequence, optional
        Seed of the point pool.

    Returns
    -------
    TrainingExample

    """
    feat_sam = backend.encode_image(image)
    raw_feat = backend.extract_semantic_features(image)
    height, width = image.size
    instances = decode_instance_masks(boxes, feat_sam, backend)
    merged = np.zeros((height, width), dtype=bool)
    for mask in instances:
        merged |= mask
    pseudo_mask = merge_masks(instances, height, width, PSEUDO_MASK_SIZE)

    points = sample_training_points(merged, cfg.pos_points_per_image * cfg.point_pool_factor,
                                    cfg.neg_points_per_image * cfg.point_pool_factor, seed)
    owners = np.full(len(points), -1, dtype=np.int64)
    cells = np.floor(points.prompts.xy).astype(np.int64)
    for i in np.flatnonzero(points.positive):
        col, row = cells[i]
        owners[i] = next(k for k, mask in enumerate(instances) if mask[row, col])

    grid_shape = (raw_feat.height, raw_feat.width)
    c_tok = backend.caps.token_channels
    weights, iou_inputs, native_iou, targets = [np.zeros((0, 4, grid_shape[0] * grid_shape[1]))], \
        [np.zeros((0, 4, 2 * c_tok))], [np.zeros((0, 4))], [np.zeros((0, 4))]
    for start in range(0, len(points), cfg.decode_batch_size):
        idxs = np.arange(start, min(start + cfg.decode_batch_size, len(points)))
        decoded = backend.decode_prompts(feat_sam, points.prompts.take(idxs))
        weights.append(pooling_weights(decoded.masks, grid_shape))
        iou_inputs.append(iou_head_inputs(decoded, cfg.token_ablation))
        native_iou.append(np.asarray(decoded.native_iou, dtype=np.float64))
        targets.append(target_scores(decoded.masks, instances, owners[idxs]))

    logger.debug(f"Prepared training image {image.digest()[:8]}: {len(instances)} box(es), {len(points)} point(s).")
    return TrainingExample(raw_feat, pseudo_mask, points, owners, np.concatenate(weights),
                           np.concatenate(iou_inputs), np.concatenate(native_iou), np.concatenate(targets),
                           cfg.token_ablation)


@dataclass
class LossResult:
    """ Batch-averaged total loss, its two parts and the gradient of every trainable parameter. """
    loss: float
    loss_fg: float
    loss_iou: float
    grads: Dict[str, np.ndarray]

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.loss))


def _example_loss(example: TrainingExample, heads: Heads, idxs, scale, grads):
    adapted, adapter_cache = heads.adapter.forward(example.raw_feat.data)
    h, w, c = adapted.shape
    logits, heat_cache = heads.cls.forward(adapted)
    heat = sigmoid(logits[..., 0])
    pred = upsample_heat(heat, example.pseudo_mask.shape[0])
    loss_fg, grad_pred = dice_loss_and_grad(pred, example.pseudo_mask)
    grad_heat = resize_array_adjoint(scale * grad_pred, h, w, 'bilinear')
    grad_adapted = heads.cls.backward(heat_cache, (grad_heat * heat * (1. - heat))[..., None], grads)

    loss_iou = 0.
    if idxs.size > 0:
        weights = example.weights[idxs]
        semantic_off = 'semantic' in example.token_ablation
        tokens = np.zeros(weights.shape[:2] + (c,)) if semantic_off else weights @ adapted.reshape(-1, c)
        cls_logits, cls_cache = heads.cls.forward(tokens)
        s_cls = sigmoid(cls_logits[..., 0])
        delta, iou_cache = heads.iou_head.forward(example.iou_inputs[idxs])
        s_iou = delta[..., 0] + example.native_iou[idxs]
        loss_iou, grad_s = iou_loss_and_grad(s_iou * s_cls, example.targets[idxs])
        grad_s = scale * grad_s
        heads.iou_head.backward(iou_cache, (grad_s * s_cls)[..., None], grads)
        grad_tokens = heads.cls.backward(cls_cache, (grad_s * s_iou * s_cls * (1. - s_cls))[..., None], grads)
        if not semantic_off:
            grad_adapted = grad_adapted + \
                (weights.reshape(-1, h * w).T @ grad_tokens.reshape(-1, c)).reshape(h, w, c)

    heads.adapter.backward(adapter_cache, grad_adapted, grads)
    return loss_fg, loss_iou


def total_loss(examples: Sequence[TrainingExample], heads: Heads, selections=None) -> LossResult:
    """
    Total loss L = L_fg + L_iou averaged over a batch of images, with gradients.

    Parameters
    ----------
    examples : sequence of TrainingExample
        Image batch.
    heads : Heads
        Current parameters.
    selections : sequence of np.ndarray, optional
        Pool indices of the training prompts per example. Defaults to the whole pool.

    Returns
    -------
    LossResult :
        Loss parts and gradients for the trainable parameters only.

    """
    if len(examples) == 0:
        err_msg = "Loss needs at least one training example."
        raise ValueError(err_msg)
    if selections is None:
        selections = [np.arange(len(example.points)) for example in examples]
    grads = heads.store.zeros_like()
    scale = 1. / len(examples)
    loss_fg, loss_iou = 0., 0.
    for example, idxs in zip(examples, selections):
        part_fg, part_iou = _example_loss(example, heads, np.asarray(idxs, dtype=np.int64), scale, grads)
        loss_fg += scale * part_fg
        loss_iou += scale * part_iou
    return LossResult(loss_fg + loss_iou, loss_fg, loss_iou, grads)


def select_points(example: TrainingExample, n_pos, n_neg, rng) -> np.ndarray:
    """ Random pool subset of up to `n_pos` positives and `n_neg` negatives. """
    pos, neg = example.positives, example.negatives
    picks = [rng.choice(pos, size=min(n_pos, pos.size), replace=False) if pos.size else pos,
             rng.choice(neg, size=min(n_neg, neg.size), replace=False) if neg.size else neg]
    return np.concatenate(picks).astype(np.int64)


@dataclass
class TrainResult:
    """ Trained heads, the loss log and the prepared examples. """
    heads: Heads
    log: pd.DataFrame
    examples: List[TrainingExample] = field(default_factory=list, repr=False)


def train(dataset: Sequence[LabeledImage], backend: Backend, cfg: TrainConfig = None, heads: Heads = None,
          examples: List[TrainingExample] = None) -> TrainResult:
    """
    Trains the heads.

    Parameters
    ----------
    dataset : sequence of LabeledImage
        Few-shot training images with their boxes.
    backend : Backend
        Frozen backbones.
    cfg : TrainConfig, optional
        Training settings. Defaults to `TrainConfig()`.
    heads : Heads, optional
        Start parameters (copied). Defaults to a fresh initialisation seeded with `cfg.seed`.
    examples : list of TrainingExample, optional
        Already prepared examples, e.g. of an earlier run on the same dataset.

    Returns
    -------
    TrainResult

    """
    cfg = cfg or TrainConfig()
    if examples is None:
        if len(dataset) == 0:
            err_msg = "Training needs at least one labelled image."
            raise ValueError(err_msg)
        examples = [prepare_example(item.image, item.boxes, backend, cfg, seed=[cfg.seed, i])
                    for i, item in enumerate(dataset)]
    heads = heads.copy() if heads is not None else Heads.init(backend.caps, cfg.seed)
    optimizer = Adam(heads.store, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                     weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, len(examples)])
    n_batch = min(cfg.batch_images, len(examples))

    rows = []
    for iteration in range(cfg.iterations):
        batch_idxs = np.sort(rng.choice(len(examples), size=n_batch, replace=False))
        batch = [examples[i] for i in batch_idxs]
        selections = [select_points(example, cfg.pos_points_per_image, cfg.neg_points_per_image, rng)
                      for example in batch]
        result = total_loss(batch, heads, selections)
        if not result.finite:
            diagnostics = {'iteration': iteration, 'L_fg': result.loss_fg, 'L_iou': result.loss_iou,
                           'images': batch_idxs.tolist(), 'parameter_norms': heads.store.norms()}
            logger.error(f"Training diverged: {diagnostics}")
            raise NonFiniteLossError(diagnostics)
        optimizer.step(result.grads)
        rows.append({'iteration': iteration, 'L_fg': result.loss_fg, 'L_iou': result.loss_iou, 'L': result.loss})
        if (iteration + 1) % cfg.log_every == 0:
            logger.info(f"Iteration {iteration + 1}/{cfg.iterations}: L={result.loss:.5f} "
                        f"(L_fg={result.loss_fg:.5f}, L_iou={result.loss_iou:.5f})")

    return TrainResult(heads, pd.DataFrame(rows, columns=LOG_COLUMNS), examples)
