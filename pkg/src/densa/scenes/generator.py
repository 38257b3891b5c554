"""
Crowded synthetic scenes made of opaque, pedestrian-proportioned shapes.

Objects are painted back to front (painter's algorithm); an object standing lower in the image (larger bottom edge)
is closer to the camera and occludes the ones behind it. The ground truth covers the visible parts only, as with
visible-box annotations of pedestrian datasets.

"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from densa.backbones.base import SceneImage
from densa.geometry.boxes import BoxXYXY, box_iou_matrix
from densa.geometry.masks import mask_to_box

logger = logging.getLogger(__name__)

SHAPES = ('ellipse', 'rounded-rect')
ASPECT_RATIO = 2.4
RELATIVE_HEIGHT = 0.22
CORNER_RATIO = 0.3
BACKGROUND_LEVEL = 90
BACKGROUND_BLOCK = 8


@dataclass(frozen=True, eq=False)
class SceneObject:
    """
    One opaque shape of a scene.

    Parameters
    ----------
    shape : str
        'ellipse' or 'rounded-rect'.
    full_mask : np.ndarray
        Boolean raster of the whole (unoccluded) shape.
    depth : int
        Painting order; higher depth occludes lower depth.
    color : tuple
        RGB colour used when rendering.

    """
    shape: str
    full_mask: np.ndarray = field(repr=False)
    depth: int
    color: Tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """
    Synthetic crowded scene.

    Parameters
    ----------
    width, height : int
        Canvas size in pixels.
    objects : list of SceneObject
        Objects in placement order.
    seed : int
        Seed the scene was generated from.

    """
    width: int
    height: int
    objects: List[SceneObject]
    seed: int

    @property
    def n_objects(self) -> int:
        return len(self.objects)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """
    Visible ground truth of a scene.

    Parameters
    ----------
    visible_masks : list of np.ndarray
        Visible part of every object that is not fully occluded.
    visible_boxes : np.ndarray
        Tight boxes (N, 4) of the visible masks.
    visibility : np.ndarray
        Visible area / full area per entry.
    object_ids : np.ndarray
        Index into `SceneSpec.objects` per entry.
    dropped : tuple
        Indices of fully occluded objects.

    """
    visible_masks: List[np.ndarray]
    visible_boxes: np.ndarray
    visibility: np.ndarray
    object_ids: np.ndarray
    dropped: Tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.visible_masks)

    @property
    def boxes(self) -> List[BoxXYXY]:
        return [BoxXYXY.from_array(box) for box in self.visible_boxes]


def rasterize_shape(shape, box, width, height) -> np.ndarray:
    """
    Rasterises a shape inscribed in a box; a pixel belongs to the shape if its centre does.

    Parameters
    ----------
    shape : str
        'ellipse' or 'rounded-rect'.
    box : BoxXYXY
        Bounding box of the shape.
    width, height : int
        Canvas size.

    Returns
    -------
    np.ndarray :
        Boolean raster (height, width).

    """
    if shape not in SHAPES:
        err_msg = f"Shape '{shape}' not known, use one of {SHAPES}."
        raise ValueError(err_msg)
    mask = np.zeros((height, width), dtype=bool)
    c_a, c_b = max(0, int(np.floor(box.x1))), min(width, int(np.ceil(box.x2)))
    r_a, r_b = max(0, int(np.floor(box.y1))), min(height, int(np.ceil(box.y2)))
    if c_a >= c_b or r_a >= r_b:
        return mask
    xs = np.arange(c_a, c_b) + 0.5
    ys = np.arange(r_a, r_b) + 0.5
    cx, cy = box.center
    half_w, half_h = box.width / 2., box.height / 2.
    dx = np.abs(xs[None, :] - cx)
    dy = np.abs(ys[:, None] - cy)
    if shape == 'ellipse':
        inside = (dx / half_w) ** 2 + (dy / half_h) ** 2 <= 1.
    else:
        radius = CORNER_RATIO * min(box.width, box.height)
        in_box = (dx <= half_w) & (dy <= half_h)
        corner_dx = np.maximum(dx - (half_w - radius), 0.)
        corner_dy = np.maximum(dy - (half_h - radius), 0.)
        inside = in_box & (corner_dx ** 2 + corner_dy ** 2 <= radius ** 2)
    mask[r_a:r_b, c_a:c_b] = inside
    return mask


def painter_plane(scene: SceneSpec) -> np.ndarray:
    """ Index of the front-most object per pixel (-1 for background). """
    plane = np.full((scene.height, scene.width), -1, dtype=np.int32)
    order = sorted(range(scene.n_objects), key=lambda i: (scene.objects[i].depth, i))
    for i in order:
        plane[scene.objects[i].full_mask] = i
    return plane


def ground_truth(scene: SceneSpec) -> GroundTruth:
    """ Derives the visible ground truth of a scene; fully occluded objects are dropped and recorded. """
    plane = painter_plane(scene)
    masks, boxes, visibility, ids, dropped = [], [], [], [], []
    for i, obj in enumerate(scene.objects):
        visible = plane == i
        full_area = np.count_nonzero(obj.full_mask)
        visible_area = np.count_nonzero(visible)
        if visible_area == 0:
            dropped.append(i)
            continue
        masks.append(visible)
        boxes.append(mask_to_box(visible).to_array())
        visibility.append(visible_area / full_area)
        ids.append(i)
    if dropped:
        logger.debug(f"Scene {scene.seed}: dropped fully occluded object(s) {dropped}.")
    return GroundTruth(masks, np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(visibility),
                       np.array(ids, dtype=np.int64), tuple(dropped))


def label_plane(scene: SceneSpec, gt: GroundTruth = None) -> np.ndarray:
    """ Ground-truth index per pixel (-1 for background), i.e. the painter plane renumbered to GT entries. """
    gt = gt or ground_truth(scene)
    plane = painter_plane(scene)
    lookup = np.full(scene.n_objects + 1, -1, dtype=np.int32)
    lookup[gt.object_ids] = np.arange(len(gt), dtype=np.int32)
    return lookup[plane]


def _place_box(rng, width, height, obj_w, obj_h, anchor=None, overlap_level=0.) -> BoxXYXY:
    if anchor is None:
        x1 = rng.uniform(0, width - obj_w)
        y1 = rng.uniform(0, height - obj_h)
    else:
        spread = 1. - overlap_level
        cx, cy = anchor.center
        cx += rng.normal(0., spread * obj_w)
        cy += rng.normal(0., 0.5 * spread * obj_h)
        x1 = float(np.clip(cx - obj_w / 2., 0, width - obj_w))
        y1 = float(np.clip(cy - obj_h / 2., 0, height - obj_h))
    return BoxXYXY(x1, y1, x1 + obj_w, y1 + obj_h)


def generate_scene(n_objects=22, overlap_level=0.4, width=1024, height=1024, seed=0, size_jitter=0.2,
                   object_scale=1., max_retries=200, min_visible_side=0.) -> Tuple[SceneSpec, GroundTruth]:
    """
    Generates a crowded scene and its visible ground truth.

    Parameters
    ----------
    n_objects : int, optional
        Number of shapes to place (default 22).
    overlap_level : float, optional
        Crowding in [0, 1] (default 0.4). It is both the probability of placing an object next to an already placed
        one and the largest full-box IoU a new object may have with any placed object.
    width, height : int, optional
        Canvas size (default 1024x1024).
    seed : int, optional
        Random seed (default 0).
    size_jitter : float, optional
        Relative object height variation (default 0.2).
    object_scale : float, optional
        Scale of the object height relative to 0.22 canvas heights (default 1).
    max_retries : int, optional
        Placement attempts per object before giving up (default 200).
    min_visible_side : float, optional
        Objects whose visible box is narrower or lower than this many pixels are removed from the scene, see
        `remove_small_objects` (default 0, keep all).

    Returns
    -------
    SceneSpec, GroundTruth

    """
    if n_objects < 0:
        err_msg = f"Number of objects must not be negative, got {n_objects}."
        raise ValueError(err_msg)
    if not 0. <= overlap_level <= 1.:
        err_msg = f"Overlap level must lie in [0, 1], got {overlap_level}."
        raise ValueError(err_msg)
    if min_visible_side < 0:
        err_msg = f"Minimum visible side must not be negative, got {min_visible_side}."
        raise ValueError(err_msg)

    rng = np.random.default_rng(seed)
    boxes, shapes, colors = [], [], []
    for i in range(n_objects):
        obj_h = RELATIVE_HEIGHT * height * object_scale * (1. + rng.uniform(-size_jitter, size_jitter))
        obj_w = obj_h / ASPECT_RATIO
        if obj_w > width or obj_h > height or obj_w < 1 or obj_h < 1:
            err_msg = f"Canvas {width}x{height} cannot hold objects of size {obj_w:.1f}x{obj_h:.1f}."
            raise ValueError(err_msg)
        for _ in range(max_retries):
            anchor = boxes[rng.integers(len(boxes))] if boxes and rng.random() < overlap_level else None
            candidate = _place_box(rng, width, height, obj_w, obj_h, anchor, overlap_level)
            if not boxes or box_iou_matrix([candidate], boxes).max() <= overlap_level:
                break
        else:
            err_msg = f"Could not place object {i} on a {width}x{height} canvas within {max_retries} attempts."
            raise ValueError(err_msg)
        boxes.append(candidate)
        shapes.append(SHAPES[int(rng.integers(len(SHAPES)))])
        colors.append(tuple(int(c) for c in rng.integers(130, 256, size=3)))

    bottoms = np.array([box.y2 for box in boxes])
    depth_order = np.lexsort((np.arange(n_objects), bottoms))
    depths = np.empty(n_objects, dtype=np.int64)
    depths[depth_order] = np.arange(n_objects)
    objects = [SceneObject(shapes[i], rasterize_shape(shapes[i], boxes[i], width, height), int(depths[i]), colors[i])
               for i in range(n_objects)]
    scene = SceneSpec(width, height, objects, int(seed))
    gt = ground_truth(scene)
    if min_visible_side > 0:
        scene, gt = remove_small_objects(scene, gt, min_visible_side)
    logger.debug(f"Generated scene {seed}: {scene.n_objects} object(s), {len(gt)} visible.")
    return scene, gt


def remove_small_objects(scene: SceneSpec, gt: GroundTruth, min_side) -> Tuple[SceneSpec, GroundTruth]:
    """
    Removes every object whose visible box has a side shorter than `min_side` pixels.

    Removing an object uncovers the ones behind it, so this repeats until all visible boxes are large enough.
    Fully occluded objects stay in the scene as long as they remain hidden.

    """
    n_removed = 0
    while len(gt):
        boxes = gt.visible_boxes
        sides = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
        small = set(gt.object_ids[sides < min_side].tolist())
        if not small:
            break
        objects = [obj for i, obj in enumerate(scene.objects) if i not in small]
        scene = SceneSpec(scene.width, scene.height, objects, scene.seed)
        gt = ground_truth(scene)
        n_removed += len(small)
    if n_removed:
        logger.debug(f"Scene {scene.seed}: removed {n_removed} object(s) with a visible side below {min_side} px.")
    return scene, gt


def render(scene: SceneSpec) -> SceneImage:
    """
    Renders a scene: flat-shaded objects over a blocky, low-contrast background texture.

    The returned image carries the ground-truth label plane, so it can be fed to the oracle backend.

    """
    rng = np.random.default_rng([scene.seed, 1])
    n_rows = -(-scene.height // BACKGROUND_BLOCK)
    n_cols = -(-scene.width // BACKGROUND_BLOCK)
    coarse = rng.integers(-12, 13, size=(n_rows, n_cols, 1))
    texture = np.repeat(np.repeat(coarse, BACKGROUND_BLOCK, axis=0), BACKGROUND_BLOCK, axis=1)
    texture = texture[:scene.height, :scene.width]
    fine = rng.integers(-4, 5, size=(scene.height, scene.width, 1))
    pixels = np.broadcast_to(BACKGROUND_LEVEL + texture + fine, (scene.height, scene.width, 3)).astype(np.uint8)

    gt = ground_truth(scene)
    labels = label_plane(scene, gt)
    if len(gt) > 0:
        palette = np.array([scene.objects[i].color for i in gt.object_ids], dtype=np.uint8)
        visible = labels >= 0
        pixels[visible] = palette[labels[visible]]
    return SceneImage(pixels, labels)
