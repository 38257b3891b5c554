"""
End-to-end annotation of one image.

Each crop window runs heatmap, prompt extraction, prompt sampling and part-whole scoring on its own; detections of
all crops are mapped back to image coordinates and merged with box NMS.

"""

import time
import logging
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, List, Tuple

import numpy as np

from densa.backbones.base import Backend, SceneImage
from densa.geometry.boxes import BoxXYXY, nms, nms_detections
from densa.geometry.masks import RleMask, SoftMask, masks_to_boxes, mask_to_box, rle_encode, upsample_binary
from densa.geometry.prompts import grid_points
from densa.heads.layers import sigmoid
from densa.heads.model import Heads
from densa.heads.prompt_gen import adapt_features, heat_logits, extract_prompts
from densa.heads.pwdnet import PwdScorer, NativeIouScorer, check_token_ablation
from densa.sampling.eps import EpsConfig, eps_sample, random_sampler, score_prompts

logger = logging.getLogger(__name__)

SAMPLERS = ('eps', 'full', 'random')
PROC_OBJS = {}


def annotate_init(image, heads, backend, cfg, plan):
    """ Helper method for setting the entries of global variable `PROC_OBJS` to be available during multiprocessing. """
    PROC_OBJS['image'] = image
    PROC_OBJS['heads'] = heads
    PROC_OBJS['backend'] = backend
    PROC_OBJS['cfg'] = cfg
    PROC_OBJS['plan'] = plan


@dataclass(frozen=True)
class CropWindow:
    """
    One inference window.

    Parameters
    ----------
    crop_id : int
        Position in the crop plan.
    window : BoxXYXY
        Integer pixel window in image coordinates.
    scale : float
        Resampling factor applied to the window before inference (1: none).
    is_full_image : bool
        True for the whole-image pass.

    """
    crop_id: int
    window: BoxXYXY
    scale: float = 1.
    is_full_image: bool = False

    @property
    def offset(self) -> Tuple[int, int]:
        return int(self.window.x1), int(self.window.y1)

    @property
    def size(self) -> Tuple[int, int]:
        """ (height, width) """
        return int(self.window.height), int(self.window.width)


@dataclass(frozen=True)
class CropPlan:
    """ Crop windows covering an image; adjacent windows overlap by `overlap` pixels. """
    windows: Tuple[CropWindow, ...]
    overlap: int
    image_size: Tuple[int, int]

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __getitem__(self, item) -> CropWindow:
        return self.windows[item]

    def coverage(self) -> np.ndarray:
        """ Number of windows covering each pixel. """
        counts = np.zeros(self.image_size, dtype=np.int32)
        for crop in self.windows:
            x, y = crop.offset
            h, w = crop.size
            counts[y:y + h, x:x + w] += 1
        return counts


def _axis_starts(n, window, stride) -> List[int]:
    if n <= window:
        return [0]
    starts = list(range(0, n - window, stride))
    starts.append(n - window)
    return starts


def plan_crops(height, width, window_size=512, overlap=128, enabled=True, include_full_image=False) -> CropPlan:
    """
    Regular tiling of an image into overlapping windows.

    Parameters
    ----------
    height, width : int
        Image size.
    window_size : int, optional
        Side length of the windows (default 512).
    overlap : int, optional
        Overlap of adjacent windows (default 128); the stride is `window_size - overlap`.
    enabled : bool, optional
        If false, the plan consists of one full-image window (default True).
    include_full_image : bool, optional
        Add a full-image window in front of the tiles (default False).

    Returns
    -------
    CropPlan :
        Windows in row-major order, the last row and column clamped to the image edge.

    """
    if not window_size > overlap >= 0:
        err_msg = f"Window size ({window_size}) must exceed the overlap ({overlap}), which must not be negative."
        raise ValueError(err_msg)
    full = BoxXYXY(0, 0, width, height)
    if not enabled or (height <= window_size and width <= window_size):
        return CropPlan((CropWindow(0, full, is_full_image=True),), overlap, (height, width))

    stride = window_size - overlap
    windows = [full] if include_full_image else []
    for y in _axis_starts(height, window_size, stride):
        for x in _axis_starts(width, window_size, stride):
            windows.append(BoxXYXY(x, y, x + min(window_size, width), y + min(window_size, height)))
    crops = tuple(CropWindow(i, window, is_full_image=include_full_image and i == 0)
                  for i, window in enumerate(windows))
    return CropPlan(crops, overlap, (height, width))


@dataclass(frozen=True)
class PipelineConfig:
    """
    Annotation settings.

    Parameters
    ----------
    grid_size : int
        Prompt grid per side for single-pass and full-image inference (default 64).
    crop_grid_size : int
        Prompt grid per side inside crop windows (default 32).
    multi_crop : bool
        Overlapping-window inference (default False).
    window_size, overlap : int
        Crop geometry (defaults 512 and 128).
    include_full_image : bool
        Run a full-image pass next to the windows when cropping (default True).
    heat_threshold : float
        Heatmap binarisation threshold t (default 0.5).
    eps : EpsConfig
        Prompt sampler settings.
    nms_threshold : float
        Box NMS IoU threshold (default 0.5).
    score_threshold : float
        Minimum joint score of emitted detections (default 0.3).
    edge_tolerance : float
        Pixels within which a box counts as touching an inner crop edge (default 20).
    sampler : str
        'eps' (default), 'full' or 'random'.
    use_fg_location : bool
        Restrict prompts to hot heatmap cells (default True); otherwise every grid point is a prompt.
    use_pwdnet : bool
        Score with the part-whole heads (default True); otherwise with the frozen native IoU predictions.
    token_ablation : tuple
        Tokens replaced by zeros, any of 'mask', 'iou', 'semantic'.
    workers : int
        Processes for crop-parallel inference (default 1).

    """
    grid_size: int = 64
    crop_grid_size: int = 32
    multi_crop: bool = False
    window_size: int = 512
    overlap: int = 128
    include_full_image: bool = True
    heat_threshold: float = 0.5
    eps: EpsConfig = field(default_factory=EpsConfig)
    nms_threshold: float = 0.5
    score_threshold: float = 0.3
    edge_tolerance: float = 20.
    sampler: str = 'eps'
    use_fg_location: bool = True
    use_pwdnet: bool = True
    token_ablation: tuple = ()
    workers: int = 1

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            err_msg = f"Sampler '{self.sampler}' not known, use one of {SAMPLERS}."
            raise ValueError(err_msg)
        if self.grid_size < 1 or self.crop_grid_size < 1:
            err_msg = "Grid sizes must be at least 1."
            raise ValueError(err_msg)
        if self.workers < 1:
            err_msg = f"Number of workers must be at least 1, got {self.workers}."
            raise ValueError(err_msg)
        object.__setattr__(self, 'token_ablation', check_token_ablation(self.token_ablation))


@dataclass(frozen=True, eq=False)
class Detection:
    """ One annotation: run-length mask and box in image coordinates, joint score and the crop it came from. """
    mask: RleMask
    box: BoxXYXY
    score: float
    crop_id: int = 0


@dataclass(eq=False)
class AnnotationResult:
    """ Detections sorted by descending score, plus per-stage timings (seconds) and counters. """
    detections: List[Detection]
    image_size: Tuple[int, int]
    timing: Dict[str, float] = field(default_factory=dict)
    stats: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([det.box.to_array() for det in self.detections], dtype=np.float64).reshape(-1, 4)

    @property
    def scores(self) -> np.ndarray:
        return np.array([det.score for det in self.detections], dtype=np.float64)


@dataclass(eq=False)
class CropOutput:
    """ Detections of one crop in image coordinates: native masks, coarse boxes, scores. """
    crop: CropWindow
    masks: List[np.ndarray]
    boxes: np.ndarray
    scores: np.ndarray
    timing: Dict[str, float]
    stats: Dict[str, int]


def annotate_crop(image: SceneImage, crop: CropWindow, heads: Heads, backend: Backend,
                  cfg: PipelineConfig) -> CropOutput:
    """ Runs prompt generation, sampling and scoring on one crop window. """
    timing = {}
    start = time.perf_counter()
    crop_image = image if crop.is_full_image else image.crop(crop.window)
    height, width = crop_image.size
    feat = backend.encode_image(crop_image)
    adapted = None
    if cfg.use_fg_location or cfg.use_pwdnet:
        adapted, _ = adapt_features(backend.extract_semantic_features(crop_image), heads)
    timing['encode'] = time.perf_counter() - start

    start = time.perf_counter()
    n = cfg.grid_size if crop.is_full_image else cfg.crop_grid_size
    if cfg.use_fg_location:
        heat = SoftMask(sigmoid(heat_logits(adapted, heads)[0]))
        prompts = extract_prompts(heat, n, cfg.heat_threshold, width, height)
    else:
        prompts = grid_points(n, width, height)
    timing['prompt'] = time.perf_counter() - start

    start = time.perf_counter()
    scorer = PwdScorer(heads, adapted, cfg.token_ablation) if cfg.use_pwdnet else NativeIouScorer()
    eps_cfg = cfg.eps
    if len(prompts) == 0:
        found, decoded = [], 0
    elif cfg.sampler == 'eps':
        result = eps_sample(feat, prompts, scorer, backend, eps_cfg)
        found, decoded = result.masks, result.decoded
    else:
        if cfg.sampler == 'random':
            prompts_used = random_sampler(prompts, eps_cfg.budget, eps_cfg.seed)
        else:
            prompts_used = prompts
        found = score_prompts(feat, prompts_used, scorer, backend, eps_cfg.batch_size)
        decoded = len(prompts_used)
    timing['sample'] = time.perf_counter() - start

    found = [m for m in found if m.score >= cfg.score_threshold]
    stats = {'prompts': len(prompts), 'decoded': decoded, 'kept': len(found)}
    if not found:
        return CropOutput(crop, [], np.zeros((0, 4)), np.zeros(0), timing, stats)

    masks = [m.mask for m in found]
    scores = np.array([m.score for m in found])
    res_h, res_w = masks[0].shape
    boxes = masks_to_boxes(np.stack(masks)) * np.array([width / res_w, height / res_h] * 2)
    nonempty = np.flatnonzero(np.isfinite(boxes[:, 0]))
    keep = nonempty[nms(boxes[nonempty], scores[nonempty], cfg.nms_threshold)]
    dx, dy = crop.offset
    boxes = boxes[keep] + np.array([dx, dy, dx, dy], dtype=np.float64)
    stats['after_nms'] = int(keep.size)
    logger.debug(f"Crop {crop.crop_id}: {len(prompts)} prompt(s), {decoded} decoded, {keep.size} detection(s).")
    return CropOutput(crop, [masks[i] for i in keep], boxes, scores[keep], timing, stats)


def _annotate_crop_worker(crop_idx) -> CropOutput:
    return annotate_crop(PROC_OBJS['image'], PROC_OBJS['plan'][crop_idx], PROC_OBJS['heads'], PROC_OBJS['backend'],
                         PROC_OBJS['cfg'])


def near_inner_crop_edge(boxes, crop: CropWindow, image_size, tolerance) -> np.ndarray:
    """ Flags boxes touching an edge of the crop window that is not also an image edge. """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    height, width = image_size
    window = crop.window.to_array()
    image = np.array([0., 0., width, height])
    near_crop = np.isclose(boxes, window[None, :], atol=tolerance, rtol=0)
    near_image = np.isclose(boxes, image[None, :], atol=tolerance, rtol=0)
    return np.any(near_crop & ~near_image, axis=1)


def merge_crops(outputs: List[CropOutput], image_size, cfg: PipelineConfig) -> List[Detection]:
    """
    Merges crop detections into image detections.

    Detections touching an inner crop edge are dropped (not for the full-image pass), duplicates across crops are
    removed by box NMS, and the survivors are pasted into full-resolution masks with exact boxes.

    """
    height, width = image_size
    multi = len(outputs) > 1
    entries = []
    for output in outputs:
        drop = np.zeros(len(output.masks), dtype=bool)
        if multi and not output.crop.is_full_image:
            drop = near_inner_crop_edge(output.boxes, output.crop, image_size, cfg.edge_tolerance)
        for i in np.flatnonzero(~drop):
            entries.append((output.crop, output.masks[i], output.boxes[i], float(output.scores[i])))
    if not entries:
        return []

    boxes = np.stack([entry[2] for entry in entries])
    scores = np.array([entry[3] for entry in entries])
    keep = nms(boxes, scores, cfg.nms_threshold) if multi else np.arange(len(entries))

    detections = []
    for i in keep:
        crop, native, _, score = entries[i]
        crop_h, crop_w = crop.size
        dx, dy = crop.offset
        full = np.zeros((height, width), dtype=bool)
        full[dy:dy + crop_h, dx:dx + crop_w] = upsample_binary(native, crop_h, crop_w)
        box = mask_to_box(full)
        if box is None:
            continue
        detections.append(Detection(rle_encode(full), box, score, crop.crop_id))
    if not detections:
        return []

    final = nms_detections([(det.box, det.score) for det in detections], cfg.nms_threshold)
    return [detections[i] for i in final]


def annotate(image: SceneImage, heads: Heads, backend: Backend, cfg: PipelineConfig = None) -> AnnotationResult:
    """
    Annotates one image.

    Parameters
    ----------
    image : SceneImage
        Image to annotate.
    heads : Heads
        Trained heads (e.g. `Checkpoint.heads`).
    backend : Backend
        Frozen backbones.
    cfg : PipelineConfig, optional
        Settings. Defaults to `PipelineConfig()`.

    Returns
    -------
    AnnotationResult :
        Detections sorted by descending score.

    """
    cfg = cfg or PipelineConfig()
    start = time.perf_counter()
    height, width = image.size
    plan = plan_crops(height, width, cfg.window_size, cfg.overlap, enabled=cfg.multi_crop,
                      include_full_image=cfg.include_full_image)
    if cfg.workers > 1 and len(plan) > 1:
        with Pool(min(cfg.workers, len(plan)), initializer=annotate_init,
                  initargs=(image, heads, backend, cfg, plan)) as p:
            outputs = p.map(_annotate_crop_worker, range(len(plan)))
    else:
        outputs = [annotate_crop(image, crop, heads, backend, cfg) for crop in plan]

    merge_start = time.perf_counter()
    detections = merge_crops(outputs, image.size, cfg)
    timing = {key: sum(output.timing.get(key, 0.) for output in outputs) for key in ('encode', 'prompt', 'sample')}
    timing['merge'] = time.perf_counter() - merge_start
    timing['total'] = time.perf_counter() - start
    stats = {key: sum(output.stats.get(key, 0) for output in outputs) for key in ('prompts', 'decoded', 'kept')}
    stats['crops'] = len(plan)
    stats['detections'] = len(detections)
    logger.info(f"Annotated image {width}x{height}: {len(detections)} detection(s) from {len(plan)} crop(s), "
                f"{stats['decoded']} prompt(s) decoded.")
    return AnnotationResult(detections, image.size, timing, stats)
