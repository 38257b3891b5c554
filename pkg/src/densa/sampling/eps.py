"""
Efficient prompt sampling.

Dense prompts are decoded in random batches; masks whose best joint score exceeds a confidence threshold are kept,
and every not yet decoded prompt lying inside one of them is dropped without being decoded. Sampling stops when no
prompts are left or the decode budget is used up.

"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple

import numpy as np
import pandas as pd

from densa.backbones.base import Backend, DecodeResult, FeatureMap, image_to_mask_coords
from densa.geometry.prompts import PointPrompt, PromptSet
from densa.heads.pwdnet import JointScores, select_best

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['iteration', 'sampled', 'decoded', 'pruned', 'valid']

Scorer = Callable[[DecodeResult], JointScores]


class SamplerError(RuntimeError):
    """ Raised if decoding or scoring fails inside the sampling loop. """

    def __init__(self, iteration, message):
        self.iteration = iteration
        super().__init__(f"Prompt sampling failed in iteration {iteration}: {message}")


@dataclass(frozen=True)
class EpsConfig:
    """
    Settings of the efficient prompt sampler.

    Parameters
    ----------
    batch_size : int
        Prompts decoded per iteration (default 64).
    budget : int
        Maximum number of decoded prompts K (default 500).
    threshold : float
        Joint score a mask must exceed to count as valid, T (default 0.5).
    seed : int
        Seed of the batch draws (default 0).
    truncate_last_batch : bool
        Clip the last batch so exactly at most `budget` prompts are decoded (default True).

    """
    batch_size: int = 64
    budget: int = 500
    threshold: float = 0.5
    seed: int = 0
    truncate_last_batch: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            err_msg = f"Batch size must be at least 1, got {self.batch_size}."
            raise ValueError(err_msg)
        if self.budget < self.batch_size:
            err_msg = f"Budget ({self.budget}) must not be smaller than the batch size ({self.batch_size})."
            raise ValueError(err_msg)
        if not 0. <= self.threshold <= 1.:
            err_msg = f"Threshold must lie in [0, 1], got {self.threshold}."
            raise ValueError(err_msg)


@dataclass(frozen=True, eq=False)
class ScoredMask:
    """
    Best candidate mask of one decoded prompt.

    Parameters
    ----------
    prompt : PointPrompt
        Prompt the mask was decoded from.
    mask : np.ndarray
        Binarised best candidate (r, r) at the decoder's native resolution, covering the whole encoded image.
    score : float
        Joint score of the best candidate.
    candidate : int
        Index of the best candidate.

    """
    prompt: PointPrompt
    mask: np.ndarray = field(repr=False)
    score: float
    candidate: int


@dataclass
class EpsTrace:
    """ Per-iteration record of a sampling run. """
    rows: List[dict] = field(default_factory=list)

    def add(self, iteration, sampled, decoded, pruned, valid):
        self.rows.append({'iteration': iteration, 'sampled': sampled, 'decoded': decoded, 'pruned': pruned,
                          'valid': valid})

    @property
    def n_iterations(self) -> int:
        return len(self.rows)

    @property
    def total_decoded(self) -> int:
        return int(sum(row['decoded'] for row in self.rows))

    @property
    def total_pruned(self) -> int:
        return int(sum(row['pruned'] for row in self.rows))

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)


class EpsResult(NamedTuple):
    """ Sampled prompts, their valid masks and the trace; unpacks as `(prompts, masks, trace)`. """
    sampled: PromptSet
    masks: List[ScoredMask]
    trace: EpsTrace

    @property
    def decoded(self) -> int:
        return len(self.sampled)


def scored_masks(prompts: PromptSet, decoded: DecodeResult, scores: JointScores, threshold=None) -> List[ScoredMask]:
    """ Best candidate per prompt, optionally restricted to joint scores above `threshold`. """
    best_masks, best_scores, best_idxs = select_best(scores.s, decoded.masks)
    keep = np.arange(len(prompts)) if threshold is None else np.flatnonzero(best_scores > threshold)
    return [ScoredMask(prompts[int(i)], best_masks[i] > 0, float(best_scores[i]), int(best_idxs[i])) for i in keep]


def eps_sample(feat: FeatureMap, prompts: PromptSet, scorer: Scorer, backend: Backend, cfg: EpsConfig) -> EpsResult:
    """
    Samples, decodes and prunes prompts until none are left or the budget is spent.

    Parameters
    ----------
    feat : FeatureMap
        Image-encoder features of the image.
    prompts : PromptSet
        Candidate prompts P_G.
    scorer : callable
        Maps a `DecodeResult` to `JointScores`.
    backend : Backend
        Decoder.
    cfg : EpsConfig
        Sampler settings.

    Returns
    -------
    EpsResult :
        Decoded prompts P_S in decoding order, valid masks M_S and the per-iteration trace.

    """
    rng = np.random.default_rng(cfg.seed)
    remaining = np.arange(len(prompts))
    sampled, masks = [], []
    n_sampled = 0
    trace = EpsTrace()
    iteration = 0
    while remaining.size > 0 and n_sampled < cfg.budget:
        size = min(cfg.batch_size, remaining.size)
        if cfg.truncate_last_batch:
            size = min(size, cfg.budget - n_sampled)
        picks = rng.choice(remaining.size, size=size, replace=False)
        batch_idxs = remaining[picks]
        remaining = np.delete(remaining, picks)
        batch = prompts.take(batch_idxs)
        sampled.append(batch_idxs)
        n_sampled += size

        try:
            decoded = backend.decode_prompts(feat, batch)
            scores = scorer(decoded)
        except Exception as exc:
            raise SamplerError(iteration, str(exc)) from exc

        valid = scored_masks(batch, decoded, scores, cfg.threshold)
        masks.extend(valid)

        n_pruned = 0
        if valid and remaining.size > 0:
            union = np.any(np.stack([m.mask for m in valid]), axis=0)
            rows, cols = image_to_mask_coords(prompts.xy[remaining], feat.image_size, union.shape)
            covered = union[rows, cols]
            n_pruned = int(np.count_nonzero(covered))
            remaining = remaining[~covered]

        trace.add(iteration, n_sampled, size, n_pruned, len(valid))
        logger.debug(f"Sampling iteration {iteration}: decoded {size}, valid {len(valid)}, pruned {n_pruned}, "
                     f"{remaining.size} left.")
        iteration += 1

    sampled_idxs = np.concatenate(sampled) if sampled else np.zeros(0, dtype=np.int64)
    return EpsResult(prompts.take(sampled_idxs), masks, trace)


def full_sampler(prompts: PromptSet) -> PromptSet:
    """ Every prompt. """
    return prompts


def random_sampler(prompts: PromptSet, budget, seed=0) -> PromptSet:
    """ Uniform subset of min(budget, |prompts|) prompts drawn without replacement, kept in input order. """
    if budget < 0:
        err_msg = f"Budget must not be negative, got {budget}."
        raise ValueError(err_msg)
    if budget >= len(prompts):
        return prompts
    rng = np.random.default_rng(seed)
    return prompts.take(np.sort(rng.choice(len(prompts), size=budget, replace=False)))


def score_prompts(feat: FeatureMap, prompts: PromptSet, scorer: Scorer, backend: Backend, batch_size=64,
                  threshold=None) -> List[ScoredMask]:
    """ Decodes all prompts in batches and returns their best candidates (above `threshold`, if given). """
    masks = []
    for start in range(0, len(prompts), batch_size):
        batch = prompts.take(np.arange(start, min(start + batch_size, len(prompts))))
        decoded = backend.decode_prompts(feat, batch)
        masks.extend(scored_masks(batch, decoded, scorer(decoded), threshold))
    return masks
