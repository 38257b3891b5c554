import pandas as pd

from densa_common import *

from densa.backbones import image_to_mask_coords
from densa.geometry import PromptSet, grid_points
from densa.heads import NativeIouScorer
from densa.sampling import (EpsConfig, SamplerError, eps_sample, full_sampler, random_sampler, score_prompts,
                            scored_masks)


@pytest.fixture
def scene_setup(scene_oracle):
    image, gt = scene_images([11], n_objects=8)[0]
    feat = scene_oracle.encode_image(image)
    return scene_oracle, feat, grid_points(32, image.width, image.height), gt


def batch_bounds(trace):
    ends = np.cumsum([row['decoded'] for row in trace.rows])
    return np.concatenate([[0], ends])


def test_config_validation():
    with pytest.raises(ValueError):
        EpsConfig(batch_size=0)
    with pytest.raises(ValueError):
        EpsConfig(batch_size=64, budget=10)
    with pytest.raises(ValueError):
        EpsConfig(threshold=1.5)


def test_budget_respected(scene_setup):
    backend, feat, prompts, _ = scene_setup
    for budget in [16, 40, 100]:
        result = eps_sample(feat, prompts, NativeIouScorer(), backend, EpsConfig(batch_size=16, budget=budget))
        assert result.decoded <= budget
        assert result.trace.total_decoded == result.decoded
    loose = eps_sample(feat, prompts, NativeIouScorer(), backend,
                       EpsConfig(batch_size=16, budget=40, truncate_last_batch=False))
    assert loose.decoded == 48


def test_sampled_prompts_disjoint(scene_setup):
    backend, feat, prompts, _ = scene_setup
    sampled, _, _ = eps_sample(feat, prompts, NativeIouScorer(), backend, EpsConfig(batch_size=32, budget=1024))
    assert np.unique(sampled.grid_index).size == len(sampled)


def assert_pruning_sound(feat, sampled, masks, trace):
    """ No prompt of a batch lies on a mask accepted in an earlier batch. """
    bounds = batch_bounds(trace)
    valid_bounds = np.concatenate([[0], np.cumsum([row['valid'] for row in trace.rows])])
    for it in range(1, trace.n_iterations):
        earlier = masks[:valid_bounds[it]]
        if not earlier:
            continue
        union = np.any(np.stack([m.mask for m in earlier]), axis=0)
        batch = sampled[bounds[it]:bounds[it + 1]]
        rows, cols = image_to_mask_coords(batch.xy, feat.image_size, union.shape)
        assert not union[rows, cols].any()
    assert all(m.score > 0.5 for m in masks)


def test_pruning_is_sound(scene_setup):
    backend, feat, prompts, _ = scene_setup
    sampled, masks, trace = eps_sample(feat, prompts, NativeIouScorer(), backend,
                                       EpsConfig(batch_size=16, budget=1024, seed=3))
    assert trace.total_pruned > 0
    assert len(sampled) + trace.total_pruned == len(prompts)
    assert_pruning_sound(feat, sampled, masks, trace)


def test_deterministic(scene_setup):
    backend, feat, prompts, _ = scene_setup
    cfg = EpsConfig(batch_size=16, budget=200, seed=5)
    first = eps_sample(feat, prompts, NativeIouScorer(), backend, cfg)
    second = eps_sample(feat, prompts, NativeIouScorer(), backend, cfg)
    assert first.sampled == second.sampled
    pd.testing.assert_frame_equal(first.trace.to_dataframe(), second.trace.to_dataframe())
    other = eps_sample(feat, prompts, NativeIouScorer(), backend, EpsConfig(batch_size=16, budget=200, seed=6))
    assert other.sampled != first.sampled


def test_crowd_conformance(scene_oracle):
    cfg = EpsConfig(batch_size=64, budget=500, seed=2)
    for image, _ in scene_images(range(20), n_objects=22, overlap_level=0.4, width=256, height=256):
        feat = scene_oracle.encode_image(image)
        prompts = grid_points(64, image.width, image.height)
        sampled, masks, trace = eps_sample(feat, prompts, NativeIouScorer(), scene_oracle, cfg)
        assert len(sampled) == trace.total_decoded <= 500
        assert np.unique(sampled.grid_index).size == len(sampled)
        assert len(sampled) + trace.total_pruned <= len(prompts)
        assert_pruning_sound(feat, sampled, masks, trace)
        again = eps_sample(feat, prompts, NativeIouScorer(), scene_oracle, cfg)
        assert again.sampled == sampled
        assert [m.score for m in again.masks] == [m.score for m in masks]


def test_empty_prompt_set(scene_setup):
    backend, feat, _, _ = scene_setup
    sampled, masks, trace = eps_sample(feat, PromptSet.empty(), NativeIouScorer(), backend, EpsConfig())
    assert len(sampled) == 0
    assert masks == []
    assert trace.n_iterations == 0


def test_scorer_failure(scene_setup):
    backend, feat, prompts, _ = scene_setup

    def broken(decoded):
        raise RuntimeError("boom")

    with pytest.raises(SamplerError, match="iteration 0"):
        eps_sample(feat, prompts, broken, backend, EpsConfig(batch_size=8, budget=8))


def test_random_sampler():
    prompts = grid_points(10, 100, 100)
    subset = random_sampler(prompts, 30, seed=1)
    assert len(subset) == 30
    assert np.all(np.diff(subset.grid_index) > 0)
    assert random_sampler(prompts, 30, seed=1) == subset
    assert random_sampler(prompts, 500) == prompts
    assert full_sampler(prompts) is prompts
    with pytest.raises(ValueError):
        random_sampler(prompts, -1)


def test_score_prompts(scene_setup):
    backend, feat, prompts, _ = scene_setup
    subset = prompts.take(np.arange(0, 1024, 37))
    every = score_prompts(feat, subset, NativeIouScorer(), backend, batch_size=7)
    assert len(every) == len(subset)
    assert [m.prompt for m in every] == list(subset)
    confident = score_prompts(feat, subset, NativeIouScorer(), backend, batch_size=7, threshold=0.5)
    assert [m.prompt for m in confident] == [m.prompt for m in every if m.score > 0.5]


def test_scored_masks_pick_best(scene_setup):
    backend, feat, prompts, _ = scene_setup
    batch = prompts.take([0, 500])
    decoded = backend.decode_prompts(feat, batch)
    masks = scored_masks(batch, decoded, NativeIouScorer()(decoded))
    for i, scored in enumerate(masks):
        assert scored.candidate == int(np.argmax(decoded.native_iou[i]))
        assert scored.score == pytest.approx(decoded.native_iou[i].max())
        np.testing.assert_array_equal(scored.mask, decoded.masks[i, scored.candidate] > 0)
