import pandas as pd

from densa_common import *

from densa.geometry import grid_points, resize_array
from densa.heads import PwdScorer, adapt_features, compute_heatmap, refine_iou, select_best
from densa.heads.pwdnet import iou_head_inputs
from densa.training import NonFiniteLossError, prepare_example, sample_training_points, total_loss


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_images=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(token_ablation=('pixels',))
    settings = TrainConfig(token_ablation=('mask',)).to_dict()
    assert settings['token_ablation'] == ['mask']
    assert settings['learning_rate'] == 1e-5


def test_sample_training_points():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:6, 3:8] = True
    points = sample_training_points(mask, 5, 7, seed=1)
    assert len(points) == 12
    np.testing.assert_array_equal(points.positive, [True] * 5 + [False] * 7)
    xy = points.prompts.xy
    np.testing.assert_array_equal(xy % 1, 0.5)
    cells = np.floor(xy).astype(int)
    assert mask[cells[:5, 1], cells[:5, 0]].all()
    assert not mask[cells[5:, 1], cells[5:, 0]].any()
    assert np.unique(cells, axis=0).shape[0] == 12
    assert points.shortfall == {}


def test_sample_training_points_shortfall():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, :3] = True
    with pytest.warns(UserWarning):
        points = sample_training_points(mask, 5, 2)
    assert points.shortfall == {'pos': 2}
    assert np.count_nonzero(points.positive) == 3


def test_prepare_example(oracle, blocks):
    cfg = TrainConfig(pos_points_per_image=6, neg_points_per_image=4, point_pool_factor=2)
    example = prepare_example(blocks, BLOCK_BOXES, oracle, cfg, seed=0)
    assert example.pseudo_mask.shape == (256, 256)
    assert len(example.points) == 20
    assert example.weights.shape == (20, 4, 64)
    assert example.iou_inputs.shape == (20, 4, 16)
    assert example.targets.shape == (20, 4)
    cells = np.floor(example.points.prompts.xy).astype(int)
    for i in example.positives:
        col, row = cells[i]
        assert blocks.labels[row, col] == example.owners[i]
        # the whole-object candidate matches its owner
        assert example.targets[i, 0] == pytest.approx(1.)
    assert np.all(example.owners[example.negatives] == -1)
    assert not example.targets[example.negatives].any()


def test_total_loss_needs_examples(small_caps):
    with pytest.raises(ValueError):
        total_loss([], Heads.init(small_caps))


def test_training_is_deterministic(oracle, blocks):
    dataset = [LabeledImage(blocks, BLOCK_BOXES)]
    cfg = TrainConfig(learning_rate=1e-3, iterations=5, pos_points_per_image=4, neg_points_per_image=4)
    first = train(dataset, oracle, cfg)
    second = train(dataset, oracle, cfg)
    assert first.heads.equals(second.heads)
    pd.testing.assert_frame_equal(first.log, second.log)
    # prepared examples can be reused
    third = train(dataset, oracle, cfg, examples=first.examples)
    assert third.heads.equals(first.heads)


def test_zero_iterations_keep_start(oracle, blocks, small_caps):
    start = Heads.init(small_caps, seed=9, zero_outputs=False)
    result = train([LabeledImage(blocks, BLOCK_BOXES)], oracle, TrainConfig(iterations=0), heads=start)
    assert result.heads.equals(start)
    assert result.heads is not start
    assert len(result.log) == 0
    with pytest.raises(ValueError):
        train([], oracle)


def test_training_reduces_loss(trained_setup):
    _, result, _ = trained_setup
    log = result.log
    assert list(log.columns) == ['iteration', 'L_fg', 'L_iou', 'L']
    assert len(log) == 300
    np.testing.assert_allclose(log['L'], log['L_fg'] + log['L_iou'])
    assert log['L'].iloc[-30:].mean() < 0.9 * log['L'].iloc[:30].mean()
    assert log['L_fg'].iloc[-30:].mean() < log['L_fg'].iloc[:30].mean()


def test_trained_heatmap_separates_foreground(trained_setup):
    backend, result, held_out = trained_setup
    for image, _ in held_out:
        heat = compute_heatmap(backend.extract_semantic_features(image), result.heads).data
        fg = resize_array(image.labels >= 0, *heat.shape, mode='bilinear') > 0.5
        assert heat[fg].mean() > heat[~fg].mean() + 0.1


def test_training_keeps_native_iou_frozen(trained_setup):
    backend, result, held_out = trained_setup
    image, _ = held_out[0]
    prompts = grid_points(8, image.width, image.height)
    decoded = backend.decode_prompts(backend.encode_image(image), prompts)
    untouched = OracleBackend(seed=0, caps=backend.caps)
    np.testing.assert_array_equal(decoded.native_iou,
                                  untouched.decode_prompts(untouched.encode_image(image), prompts).native_iou)
    assert {name.split('.')[0] for name in result.heads.store} == {'adapter', 'cls', 'iou_head'}
    s_iou, _ = refine_iou(decoded, result.heads)
    delta, _ = result.heads.iou_head.forward(iou_head_inputs(decoded))
    np.testing.assert_allclose(s_iou - delta[..., 0], decoded.native_iou, atol=1e-12)


def test_iou_loss_halves_within_200_steps(trained_setup):
    backend, result, _ = trained_setup
    cfg = TrainConfig(learning_rate=1e-2, iterations=200, pos_points_per_image=16, neg_points_per_image=16, seed=0)
    short = train([], backend, cfg, examples=result.examples)
    start = total_loss(result.examples, Heads.init(backend.caps, seed=0))
    end = total_loss(result.examples, short.heads)
    assert end.loss_iou <= 0.5 * start.loss_iou


def test_trained_scores_prefer_whole_objects(trained_setup):
    backend, result, held_out = trained_setup
    n_whole, n_fg, fg_scores, bg_scores = 0, 0, [], []
    for image, _ in held_out:
        prompts = grid_points(32, image.width, image.height)
        decoded = backend.decode_prompts(backend.encode_image(image), prompts)
        adapted, _ = adapt_features(backend.extract_semantic_features(image), result.heads)
        scores = PwdScorer(result.heads, adapted)(decoded)
        _, best, idxs = select_best(scores.s, decoded.masks)
        cells = np.floor(prompts.xy).astype(int)
        fg = image.labels[cells[:, 1], cells[:, 0]] >= 0
        n_whole += np.count_nonzero(idxs[fg] == 0)
        n_fg += np.count_nonzero(fg)
        fg_scores.append(best[fg])
        bg_scores.append(best[~fg])
    assert n_whole >= 0.9 * n_fg
    assert np.concatenate(bg_scores).mean() < 0.5 * np.concatenate(fg_scores).mean()


def test_non_finite_loss_error():
    error = NonFiniteLossError({'iteration': 3, 'L_fg': float('nan'), 'L_iou': 0.1})
    assert "iteration 3" in str(error)
    assert error.diagnostics['iteration'] == 3
    assert isinstance(error, FloatingPointError)
