from densa.scenes.generator import (SceneObject, SceneSpec, GroundTruth, generate_scene, ground_truth, label_plane,
                                   painter_plane, rasterize_shape, remove_small_objects, render)
from densa.scenes.archive import SceneArchive
