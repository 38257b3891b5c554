import pytest
import numpy as np

from densa.backbones import BackendCaps, OracleBackend, SceneImage
from densa.heads import Heads
from densa.scenes import generate_scene, render
from densa.training import TrainConfig, LabeledImage, train

# object 0 and 1 of the block scene as (x1, y1, x2, y2)
BLOCK_BOXES = np.array([[4., 4., 12., 14.], [16., 16., 26., 28.]])


def block_image(size=32, boxes=BLOCK_BOXES) -> SceneImage:
    """ Background plus flat rectangles; labels follow the box order. """
    pixels = np.full((size, size, 3), 90, dtype=np.uint8)
    labels = np.full((size, size), -1, dtype=np.int32)
    for k, (x1, y1, x2, y2) in enumerate(boxes.astype(int)):
        pixels[y1:y2, x1:x2] = (200, 150 + 40 * k, 160)
        labels[y1:y2, x1:x2] = k
    return SceneImage(pixels, labels)


def scene_images(seeds, **kwargs):
    """ Rendered synthetic scenes and their ground truth. """
    params = dict(n_objects=6, overlap_level=0.3, width=128, height=128)
    params.update(kwargs)
    out = []
    for seed in seeds:
        scene, gt = generate_scene(seed=seed, **params)
        out.append((render(scene), gt))
    return out


@pytest.fixture
def small_caps():
    return BackendCaps(patch_size=4, token_channels=8, feature_channels=8, native_mask_resolution=32)


@pytest.fixture
def blocks():
    return block_image()


@pytest.fixture
def oracle(small_caps):
    return OracleBackend(seed=0, caps=small_caps)


@pytest.fixture
def scene_caps():
    return BackendCaps(patch_size=8, token_channels=8, feature_channels=8, native_mask_resolution=64)


@pytest.fixture
def scene_oracle(scene_caps):
    return OracleBackend(seed=0, caps=scene_caps)


@pytest.fixture
def small_scenes():
    return scene_images([1, 2, 3])


@pytest.fixture(scope="session")
def trained_setup():
    """ Heads trained on four small scenes with the oracle backend, plus held-out scenes. """
    caps = BackendCaps(patch_size=8, token_channels=8, feature_channels=8, native_mask_resolution=64)
    backend = OracleBackend(seed=0, caps=caps)
    train_set = scene_images(range(4))
    dataset = [LabeledImage(image, gt.visible_boxes) for image, gt in train_set]
    cfg = TrainConfig(learning_rate=1e-2, iterations=300, pos_points_per_image=16, neg_points_per_image=16,
                      seed=0, log_every=100)
    result = train(dataset, backend, cfg)
    return backend, result, scene_images(range(100, 104))
