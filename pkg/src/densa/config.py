"""
Run configuration of the densa commands.

A configuration is one flat YAML mapping. Every key not listed in `Config` is rejected. Oracle and scene defaults are
sized for desk-scale runs on synthetic scenes.

"""

import os
import logging
from dataclasses import dataclass, fields, asdict, replace
from typing import Optional, Tuple

import yaml

from densa.backbones import create_backend, BackendCaps
from densa.sampling.eps import EpsConfig
from densa.training.trainer import TrainConfig
from densa.inference.pipeline import PipelineConfig
from densa.utils import fingerprint

logger = logging.getLogger(__name__)

BACKENDS = ('oracle', 'sam')
# settings that do not change any result
RUNTIME_KEYS = ('workers', 'out_dir')
# smallest visible box side of synthetic objects, in native mask cells
MIN_VISIBLE_CELLS = 5


@dataclass(frozen=True)
class Config:
    """
    All settings of a densa run.

    Parameters
    ----------
    seed : int
        Root seed of scenes, sampling and training (default 0).
    backend : str
        'oracle' (synthetic) or 'sam' (SAM + DINOv2 weights).
    sam_checkpoint, sam_model_type, dino_model, dino_repo, device
        Real-model adapter settings (defaults: no checkpoint, 'vit_l', 'dinov2_vitl14', remote hub, 'cpu').
    patch_size, token_channels, feature_channels, native_mask_resolution : int
        Oracle output shapes (default: 16, 32, 32, 256).
    noise_sigma, logit_magnitude, dilation : float
        Oracle signal settings (default: 0.1, 10, 1.2).
    n_objects, overlap_level, width, height, size_jitter, object_scale
        Synthetic scene family (default: 22 objects, overlap 0.4, 1024x1024, jitter 0.2, scale 1).
    n_train_scenes : int
        Labelled scenes for training (default: 10 images).
    n_eval_scenes : int
        Held-out scenes for evaluation (default: 20).
    eval_seed_offset : int
        Offset between training and evaluation scene seeds (default: 10000).
    grid_size, crop_grid_size : int
        Prompt grid side length for the full image and per crop (default: 64 and 32).
    heat_threshold : float
        Foreground heatmap threshold (default: 0.5).
    sampler : str
        'eps', 'full' or 'random' (default: 'eps').
    batch_size, budget, eps_threshold
        Prompt sampler batch size, decode budget and validity threshold (default: 64, 500, 0.5).
    nms_threshold : float
        Box IoU of NMS (default: 0.5).
    score_threshold : float
        Minimum joint score of emitted detections (default: 0.3).
    multi_crop, window_size, overlap, include_full_image, edge_tolerance
        Multi-crop inference (default: off, 512 px windows, 128 px overlap, with full-image pass, 20 px).
    use_fg_location, use_pwdnet : bool
        Module ablations (default on).
    token_ablation : tuple of str
        Tokens replaced by zeros when scoring (default none).
    learning_rate, weight_decay, beta1, beta2, adam_eps
        Optimiser (defaults: 1e-5, 1e-4, 0.9, 0.99, 1e-8).
    iterations, batch_images, pos_points_per_image, neg_points_per_image, point_pool_factor, log_every
        Training loop (defaults: 2000 iterations, batch 1, 32 + 32 points, pool factor 2, log every 100).
    bench_samplers, bench_grids, bench_budgets, bench_seeds
        Sampler benchmark cells (default: all samplers, grids 16-192, budget 500, 20 seeds).
    bench_n_objects, bench_object_scale
        Crowd of the benchmark scenes, replacing `n_objects` and `object_scale` (default: 120 objects, scale 0.4).
    bench_foreground : bool
        Offer only foreground grid points to the samplers, taken from the heatmap of the heads if given, else from
        the label plane (default on).
    eval_iou : float
        Match threshold of the metrics (default: 0.5).
    train_data, eval_data, image_dir : str, optional
        ODGT files and image directory. Synthetic scenes are used if not given.
    checkpoint : str, optional
        Trained heads used by 'annotate' and 'eval'.
    workers : int
        Worker processes (default 1).
    out_dir : str
        Output directory (default 'densa_out').

    """
    seed: int = 0
    backend: str = 'oracle'
    sam_checkpoint: Optional[str] = None
    sam_model_type: str = 'vit_l'
    dino_model: str = 'dinov2_vitl14'
    dino_repo: Optional[str] = None
    device: str = 'cpu'
    patch_size: int = 16
    token_channels: int = 32
    feature_channels: int = 32
    native_mask_resolution: int = 256
    noise_sigma: float = 0.1
    logit_magnitude: float = 10.
    dilation: float = 1.2
    n_objects: int = 22
    overlap_level: float = 0.4
    width: int = 1024
    height: int = 1024
    size_jitter: float = 0.2
    object_scale: float = 1.
    n_train_scenes: int = 10
    n_eval_scenes: int = 20
    eval_seed_offset: int = 10000
    grid_size: int = 64
    crop_grid_size: int = 32
    heat_threshold: float = 0.5
    sampler: str = 'eps'
    batch_size: int = 64
    budget: int = 500
    eps_threshold: float = 0.5
    nms_threshold: float = 0.5
    score_threshold: float = 0.3
    multi_crop: bool = False
    window_size: int = 512
    overlap: int = 128
    include_full_image: bool = True
    edge_tolerance: float = 20.
    use_fg_location: bool = True
    use_pwdnet: bool = True
    token_ablation: Tuple[str, ...] = ()
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
    log_every: int = 100
    bench_samplers: Tuple[str, ...] = ('full', 'eps', 'random')
    bench_grids: Tuple[int, ...] = (16, 32, 64, 128, 192)
    bench_budgets: Tuple[int, ...] = (500,)
    bench_seeds: int = 20
    bench_n_objects: int = 120
    bench_object_scale: float = 0.4
    bench_foreground: bool = True
    eval_iou: float = 0.5
    train_data: Optional[str] = None
    eval_data: Optional[str] = None
    image_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    workers: int = 1
    out_dir: str = 'densa_out'

    def __post_init__(self):
        for name in ('token_ablation', 'bench_samplers', 'bench_grids', 'bench_budgets'):
            value = getattr(self, name)
            if isinstance(value, (str, int)):
                value = (value,)
            object.__setattr__(self, name, tuple(value))
        if self.backend not in BACKENDS:
            err_msg = f"Backend '{self.backend}' not known, use one of {BACKENDS}."
            raise ValueError(err_msg)
        for name in ('n_objects', 'width', 'height', 'n_train_scenes', 'n_eval_scenes', 'bench_seeds',
                     'bench_n_objects', 'workers'):
            if getattr(self, name) < 1:
                err_msg = f"Setting '{name}' must be positive, got {getattr(self, name)}."
                raise ValueError(err_msg)
        if not 0 <= self.overlap_level <= 1:
            err_msg = f"Setting 'overlap_level' must be in [0, 1], got {self.overlap_level}."
            raise ValueError(err_msg)
        if self.object_scale <= 0 or self.bench_object_scale <= 0:
            err_msg = "Object scales must be positive."
            raise ValueError(err_msg)
        if any(grid < 1 for grid in self.bench_grids) or any(budget < 0 for budget in self.bench_budgets):
            err_msg = "Benchmark grids must be positive and budgets must not be negative."
            raise ValueError(err_msg)
        # views validate their own settings
        self.backend_caps()
        self.pipeline_config()
        self.train_config()

    def to_dict(self) -> dict:
        settings = asdict(self)
        for name, value in settings.items():
            if isinstance(value, tuple):
                settings[name] = list(value)
        return settings

    def fingerprint(self) -> str:
        """ sha256 of all settings that influence results. """
        settings = self.to_dict()
        for key in RUNTIME_KEYS:
            settings.pop(key)
        return fingerprint(settings)

    def backend_caps(self) -> BackendCaps:
        return BackendCaps(self.patch_size, self.token_channels, self.feature_channels, self.native_mask_resolution)

    def create_backend(self):
        if self.backend == 'oracle':
            return create_backend('oracle', caps=self.backend_caps(), seed=self.seed, noise_sigma=self.noise_sigma,
                                  logit_magnitude=self.logit_magnitude, dilation=self.dilation)
        return create_backend('sam', sam_checkpoint=self.sam_checkpoint, sam_model_type=self.sam_model_type,
                              dino_model=self.dino_model, dino_repo=self.dino_repo, device=self.device)

    def eps_config(self, seed=None) -> EpsConfig:
        return EpsConfig(batch_size=self.batch_size, budget=self.budget, threshold=self.eps_threshold,
                         seed=self.seed if seed is None else seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay, beta1=self.beta1,
                           beta2=self.beta2, adam_eps=self.adam_eps, iterations=self.iterations,
                           batch_images=self.batch_images, pos_points_per_image=self.pos_points_per_image,
                           neg_points_per_image=self.neg_points_per_image, point_pool_factor=self.point_pool_factor,
                           decode_batch_size=self.batch_size, token_ablation=self.token_ablation, seed=self.seed,
                           log_every=self.log_every)

    def pipeline_config(self, seed=None) -> PipelineConfig:
        return PipelineConfig(grid_size=self.grid_size, crop_grid_size=self.crop_grid_size,
                              multi_crop=self.multi_crop, window_size=self.window_size, overlap=self.overlap,
                              include_full_image=self.include_full_image, heat_threshold=self.heat_threshold,
                              eps=self.eps_config(seed), nms_threshold=self.nms_threshold,
                              score_threshold=self.score_threshold, edge_tolerance=self.edge_tolerance,
                              sampler=self.sampler, use_fg_location=self.use_fg_location,
                              use_pwdnet=self.use_pwdnet, token_ablation=self.token_ablation, workers=self.workers)

    def min_visible_side(self) -> float:
        """ Smallest visible box side in pixels of synthetic objects; 0 if masks are decoded at image resolution. """
        cell = max(self.width, self.height) / self.native_mask_resolution
        return MIN_VISIBLE_CELLS * cell if cell > 1 else 0.

    def scene_params(self, bench=False) -> dict:
        """ Keyword arguments of `generate_scene` (without seed), with the benchmark crowd if `bench`. """
        return {'n_objects': self.bench_n_objects if bench else self.n_objects, 'overlap_level': self.overlap_level,
                'width': self.width, 'height': self.height, 'size_jitter': self.size_jitter,
                'object_scale': self.bench_object_scale if bench else self.object_scale,
                'min_visible_side': self.min_visible_side()}

    def train_seeds(self) -> list:
        return [self.seed + i for i in range(self.n_train_scenes)]

    def eval_seeds(self) -> list:
        return [self.seed + self.eval_seed_offset + i for i in range(self.n_eval_scenes)]


CONFIG_KEYS = tuple(f.name for f in fields(Config))


def parse_overrides(assignments) -> dict:
    """
    Parses 'key=value' strings, the values being YAML scalars or lists.

    Parameters
    ----------
    assignments : list of str
        Override expressions, e.g. ['grid_size=32', 'bench_grids=[16, 32]'].

    Returns
    -------
    dict

    """
    overrides = {}
    for assignment in assignments or []:
        key, sep, value = assignment.partition('=')
        if not sep or not key.strip():
            err_msg = f"Override '{assignment}' is not of the form 'key=value'."
            raise ValueError(err_msg)
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


def _check_keys(settings, origin):
    unknown = sorted(set(settings) - set(CONFIG_KEYS))
    if unknown:
        err_msg = f"Unknown configuration key(s) in {origin}: {', '.join(unknown)}."
        raise ValueError(err_msg)


def load_config(filepath=None, overrides=None) -> Config:
    """
    Loads a configuration.

    Parameters
    ----------
    filepath : str, optional
        YAML file with a flat mapping of settings. Defaults are used if not given.
    overrides : dict, optional
        Settings replacing the file values. Entries set to None are ignored.

    Returns
    -------
    Config

    """
    settings = {}
    if filepath is not None:
        if not os.path.exists(filepath):
            err_msg = f"Configuration file '{filepath}' does not exist."
            raise FileNotFoundError(err_msg)
        with open(filepath, 'r') as f:
            content = yaml.safe_load(f)
        if content is None:
            content = {}
        if not isinstance(content, dict):
            err_msg = f"Configuration file '{filepath}' must contain a mapping."
            raise ValueError(err_msg)
        _check_keys(content, f"'{filepath}'")
        settings.update(content)
    overrides = {key: value for key, value in (overrides or {}).items() if value is not None}
    _check_keys(overrides, 'the overrides')
    settings.update(overrides)
    try:
        config = Config(**settings)
    except TypeError as exc:
        err_msg = f"Invalid configuration: {exc}"
        raise ValueError(err_msg) from exc
    logger.debug(f"Configuration fingerprint {config.fingerprint()}.")
    return config


def write_config(config: Config, filepath):
    """ Writes the full configuration as YAML next to the outputs. """
    with open(filepath, 'w') as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)


def with_overrides(config: Config, **overrides) -> Config:
    _check_keys(overrides, 'the overrides')
    return replace(config, **overrides)
