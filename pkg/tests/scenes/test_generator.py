from densa_common import *

from densa.geometry import BoxXYXY, mask_to_box
from densa.scenes import (SceneObject, SceneSpec, ground_truth, label_plane, painter_plane, rasterize_shape,
                          remove_small_objects)


@pytest.mark.parametrize("shape", ["ellipse", "rounded-rect"])
def test_rasterize_shape_inside_box(shape):
    mask = rasterize_shape(shape, BoxXYXY(10, 5, 30, 45), 50, 60)
    assert mask.shape == (60, 50)
    assert mask_to_box(mask) == BoxXYXY(10, 5, 30, 45)
    assert mask[25, 20]


def test_rasterize_unknown_shape():
    with pytest.raises(ValueError):
        rasterize_shape('star', BoxXYXY(0, 0, 4, 4), 8, 8)


def test_rasterize_clipped():
    mask = rasterize_shape('ellipse', BoxXYXY(-10, -10, 10, 10), 8, 8)
    assert mask[0, 0]
    assert not rasterize_shape('ellipse', BoxXYXY(20, 20, 30, 30), 8, 8).any()


def test_scene_is_deterministic():
    scene_a, gt_a = generate_scene(n_objects=8, width=160, height=160, seed=4)
    scene_b, gt_b = generate_scene(n_objects=8, width=160, height=160, seed=4)
    np.testing.assert_array_equal(render(scene_a).pixels, render(scene_b).pixels)
    np.testing.assert_array_equal(gt_a.visible_boxes, gt_b.visible_boxes)
    scene_c, _ = generate_scene(n_objects=8, width=160, height=160, seed=5)
    assert not np.array_equal(render(scene_a).pixels, render(scene_c).pixels)


def test_ground_truth_consistency():
    scene, gt = generate_scene(n_objects=12, overlap_level=0.6, width=200, height=200, seed=0)
    assert len(gt) + len(gt.dropped) == 12
    covered = np.zeros((200, 200), dtype=int)
    for mask, box, vis, obj_id in zip(gt.visible_masks, gt.visible_boxes, gt.visibility, gt.object_ids):
        covered += mask
        np.testing.assert_array_equal(mask_to_box(mask).to_array(), box)
        full = scene.objects[obj_id].full_mask
        assert not (mask & ~full).any()
        assert 0 < vis <= 1
        assert vis == pytest.approx(mask.sum() / full.sum())
    # visible masks are disjoint
    assert covered.max() <= 1


def test_lower_objects_occlude():
    boxes = [BoxXYXY(10, 10, 30, 50), BoxXYXY(15, 20, 35, 60)]
    objects = [SceneObject('rounded-rect', rasterize_shape('rounded-rect', box, 64, 64), depth, (200, 200, 200))
               for box, depth in zip(boxes, (0, 1))]
    scene = SceneSpec(64, 64, objects, seed=0)
    plane = painter_plane(scene)
    assert plane[30, 20] == 1
    gt = ground_truth(scene)
    assert gt.visibility[1] == 1.
    assert gt.visibility[0] < 1.


def test_label_plane_matches_masks():
    scene, gt = generate_scene(n_objects=10, overlap_level=0.5, width=128, height=128, seed=9)
    labels = label_plane(scene, gt)
    for k, mask in enumerate(gt.visible_masks):
        np.testing.assert_array_equal(labels == k, mask)
    assert labels.min() == -1


def test_render_carries_labels():
    scene, gt = generate_scene(n_objects=5, width=96, height=96, seed=2)
    image = render(scene)
    assert image.size == (96, 96)
    assert image.pixels.dtype == np.uint8
    np.testing.assert_array_equal(image.labels, label_plane(scene, gt))


def test_object_scale():
    _, gt_big = generate_scene(n_objects=1, width=200, height=200, seed=1, size_jitter=0.)
    _, gt_small = generate_scene(n_objects=1, width=200, height=200, seed=1, size_jitter=0., object_scale=0.5)
    height_big = gt_big.visible_boxes[0, 3] - gt_big.visible_boxes[0, 1]
    height_small = gt_small.visible_boxes[0, 3] - gt_small.visible_boxes[0, 1]
    assert height_small < 0.6 * height_big


def test_invalid_parameters():
    with pytest.raises(ValueError):
        generate_scene(n_objects=-1)
    with pytest.raises(ValueError):
        generate_scene(overlap_level=1.5)
    with pytest.raises(ValueError):
        generate_scene(n_objects=1, width=2, height=2)


def test_min_visible_side():
    params = dict(n_objects=30, overlap_level=0.6, width=200, height=200, seed=3)
    scene_all, gt_all = generate_scene(**params)
    scene, gt = generate_scene(min_visible_side=8., **params)
    boxes = gt.visible_boxes
    assert np.all(boxes[:, 2] - boxes[:, 0] >= 8) and np.all(boxes[:, 3] - boxes[:, 1] >= 8)
    assert scene.n_objects <= scene_all.n_objects
    sides = np.minimum(gt_all.visible_boxes[:, 2] - gt_all.visible_boxes[:, 0],
                       gt_all.visible_boxes[:, 3] - gt_all.visible_boxes[:, 1])
    if sides.min() >= 8:
        assert scene.n_objects == scene_all.n_objects
    else:
        assert scene.n_objects < scene_all.n_objects
    # rendering keeps image and labels consistent with the reduced scene
    np.testing.assert_array_equal(render(scene).labels, label_plane(scene, gt))


def test_remove_small_objects_uncovers():
    # only a three pixel wide strip of the back object stays visible
    boxes = [BoxXYXY(10, 10, 30, 50), BoxXYXY(13, 5, 40, 60), BoxXYXY(44, 10, 60, 50)]
    objects = [SceneObject('rounded-rect', rasterize_shape('rounded-rect', box, 64, 64), depth, (200, 200, 200))
               for box, depth in zip(boxes, (0, 1, 2))]
    scene = SceneSpec(64, 64, objects, seed=0)
    gt = ground_truth(scene)
    assert len(gt) == 3
    assert gt.visible_boxes[0, 2] - gt.visible_boxes[0, 0] == 3
    reduced, reduced_gt = remove_small_objects(scene, gt, 4)
    assert reduced.n_objects == 2
    assert len(reduced_gt) == 2
    np.testing.assert_array_equal(reduced_gt.visibility, [1., 1.])
    assert remove_small_objects(scene, gt, 0)[0].n_objects == 3
    with pytest.raises(ValueError):
        generate_scene(n_objects=2, width=64, height=64, min_visible_side=-1)
