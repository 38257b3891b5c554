from densa_common import *

from densa.evaluation import EvalImage, evaluate, match, recall
from densa.geometry import BoxXYXY, box_iou_matrix, rle_decode
from densa.inference import CropWindow, PipelineConfig, annotate, plan_crops
from densa.inference.pipeline import near_inner_crop_edge
from densa.sampling import EpsConfig

# grid points on every pixel block, frozen decoder scores only
ORACLE_CFG = dict(sampler='full', use_fg_location=False, use_pwdnet=False, score_threshold=0.5)


def scene_recall(result, gt):
    return recall([match(result.boxes, result.scores, gt.visible_boxes)])


def test_plan_crops_disabled():
    plan = plan_crops(700, 1000, enabled=False)
    assert len(plan) == 1
    assert plan[0].is_full_image
    assert plan[0].window == BoxXYXY(0, 0, 1000, 700)
    assert len(plan_crops(300, 400, window_size=512)) == 1


def test_plan_crops_tiles():
    plan = plan_crops(700, 1000, window_size=512, overlap=128, include_full_image=True)
    assert len(plan) == 7
    assert plan[0].is_full_image
    tiles = plan.windows[1:]
    assert [crop.offset for crop in tiles] == [(0, 0), (384, 0), (488, 0), (0, 188), (384, 188), (488, 188)]
    assert all(crop.size == (512, 512) for crop in tiles)
    assert [crop.crop_id for crop in plan] == list(range(7))
    assert plan.coverage().min() >= 2
    tiles_only = plan_crops(700, 1000, window_size=512, overlap=128)
    assert len(tiles_only) == 6
    assert tiles_only.coverage().min() >= 1
    with pytest.raises(ValueError):
        plan_crops(700, 1000, window_size=128, overlap=128)


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(sampler='greedy')
    with pytest.raises(ValueError):
        PipelineConfig(grid_size=0)
    with pytest.raises(ValueError):
        PipelineConfig(workers=0)
    with pytest.raises(ValueError):
        PipelineConfig(token_ablation=('pixels',))


def test_near_inner_crop_edge():
    crop = CropWindow(1, BoxXYXY(0, 0, 64, 64))
    boxes = np.array([[10., 10., 62., 30.], [0., 10., 20., 30.], [20., 20., 40., 40.]])
    np.testing.assert_array_equal(near_inner_crop_edge(boxes, crop, (128, 128), 4.), [True, False, False])


def test_annotate_exact_masks(oracle, small_caps, blocks):
    cfg = PipelineConfig(grid_size=8, **ORACLE_CFG)
    result = annotate(blocks, Heads.init(small_caps), oracle, cfg)
    assert len(result) == 2
    assert result.image_size == (32, 32)
    assert np.all(np.diff(result.scores) <= 0)
    found = sorted(tuple(det.box.to_array()) for det in result.detections)
    assert found == [tuple(box) for box in BLOCK_BOXES]
    for det in result.detections:
        k = 0 if det.box.x1 < 15 else 1
        np.testing.assert_array_equal(rle_decode(det.mask), blocks.labels == k)
        assert det.crop_id == 0
    assert set(result.timing) == {'encode', 'prompt', 'sample', 'merge', 'total'}
    assert result.stats['prompts'] == 64
    assert result.stats['decoded'] == 64
    assert result.stats['crops'] == 1
    assert result.stats['detections'] == 2


def test_annotate_respects_budget(scene_oracle, scene_caps, small_scenes):
    image, _ = small_scenes[0]
    heads = Heads.init(scene_caps)
    eps = EpsConfig(batch_size=16, budget=48)
    for sampler in ['eps', 'random']:
        cfg = PipelineConfig(grid_size=32, eps=eps, **dict(ORACLE_CFG, sampler=sampler))
        result = annotate(image, heads, scene_oracle, cfg)
        assert result.stats['decoded'] <= 48
        assert result.stats['prompts'] == 1024


def test_single_pass_recall(scene_oracle, scene_caps, small_scenes):
    heads = Heads.init(scene_caps)
    cfg = PipelineConfig(grid_size=64, **ORACLE_CFG)
    for image, gt in small_scenes:
        result = annotate(image, heads, scene_oracle, cfg)
        assert scene_recall(result, gt) >= 0.8
        assert all(det.score >= 0.5 for det in result.detections)
        # output is NMS-consistent
        ious = box_iou_matrix(result.boxes, result.boxes)
        np.fill_diagonal(ious, 0.)
        assert ious.max(initial=0.) <= 0.5


def test_multi_crop(scene_oracle, scene_caps, small_scenes):
    heads = Heads.init(scene_caps)
    cfg = PipelineConfig(grid_size=64, crop_grid_size=32, multi_crop=True, window_size=64, overlap=16,
                         edge_tolerance=2., **ORACLE_CFG)
    image, gt = small_scenes[1]
    result = annotate(image, heads, scene_oracle, cfg)
    assert result.stats['crops'] == 10
    assert scene_recall(result, gt) >= 0.8
    boxes = result.boxes
    assert np.all(boxes[:, :2] >= 0) and np.all(boxes[:, 2] <= 128) and np.all(boxes[:, 3] <= 128)
    for det in result.detections:
        assert det.mask.width == 128 and det.mask.height == 128
        assert det.mask.area > 0
    ious = box_iou_matrix(boxes, boxes)
    np.fill_diagonal(ious, 0.)
    assert ious.max(initial=0.) <= 0.5

    parallel = annotate(image, heads, scene_oracle, PipelineConfig(**dict(cfg.__dict__, workers=2)))
    np.testing.assert_array_equal(parallel.boxes, result.boxes)
    np.testing.assert_array_equal(parallel.scores, result.scores)


def test_annotate_with_trained_heads(trained_setup):
    backend, train_result, held_out = trained_setup
    cfg = PipelineConfig(grid_size=32, eps=EpsConfig(batch_size=16, budget=256))
    for image, gt in held_out[:2]:
        result = annotate(image, train_result.heads, backend, cfg)
        assert result.stats['prompts'] < 1024
        assert result.stats['decoded'] <= 256
        assert all(det.score >= cfg.score_threshold for det in result.detections)
        assert np.all(np.diff(result.scores) <= 0)


def test_crowd_annotation_quality():
    caps = BackendCaps(patch_size=8, token_channels=8, feature_channels=8, native_mask_resolution=128)
    backend = OracleBackend(seed=0, caps=caps)
    cfg = PipelineConfig(grid_size=64, eps=EpsConfig(batch_size=64, budget=4096), **dict(ORACLE_CFG, sampler='eps'))
    heads = Heads.init(caps)
    eval_images = []
    for image, gt in scene_images(range(300, 320), n_objects=22, overlap_level=0.4, min_visible_side=4):
        result = annotate(image, heads, backend, cfg)
        eval_images.append(EvalImage(result.boxes, result.scores, gt.visible_boxes))
    metrics = evaluate(eval_images)
    assert metrics['recall'] >= 0.9
    assert metrics['ap50'] >= 0.85


def test_multi_crop_helps_small_objects():
    # coarse native masks blur small objects in the full-image pass, crops see them at a finer scale
    caps = BackendCaps(patch_size=8, token_channels=8, feature_channels=8, native_mask_resolution=32)
    backend = OracleBackend(seed=0, caps=caps)
    heads = Heads.init(caps)
    single = PipelineConfig(grid_size=64, eps=EpsConfig(batch_size=64, budget=4096), **dict(ORACLE_CFG, sampler='eps'))
    multi = PipelineConfig(**dict(single.__dict__, multi_crop=True, crop_grid_size=32, window_size=64, overlap=16,
                                  edge_tolerance=2.))
    single_recall, multi_recall = [], []
    for image, gt in scene_images(range(400, 403), n_objects=22, overlap_level=0.4, width=256, height=256,
                                  object_scale=0.4):
        single_recall.append(scene_recall(annotate(image, heads, backend, single), gt))
        multi_recall.append(scene_recall(annotate(image, heads, backend, multi), gt))
    assert np.mean(multi_recall) >= np.mean(single_recall)
