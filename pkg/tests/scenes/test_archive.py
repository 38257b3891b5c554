from densa_common import *

from densa.scenes import SceneArchive, ground_truth


@pytest.fixture
def scenes():
    return [generate_scene(n_objects=n, width=96, height=80, seed=seed)[0] for n, seed in [(5, 0), (3, 1), (0, 2)]]


def test_write_read(tmp_path, scenes):
    filepath = str(tmp_path / "scenes.nc")
    with SceneArchive(filepath, mode='w') as archive:
        archive.write(scenes, metadata={'fingerprint': 'abc123'})

    with SceneArchive(filepath) as archive:
        assert archive.metadata['fingerprint'] == 'abc123'
        assert int(archive.metadata['archive_version']) == 1
        read_scenes = archive.read()

    assert len(read_scenes) == len(scenes)
    for scene, read_scene in zip(scenes, read_scenes):
        assert (read_scene.width, read_scene.height, read_scene.seed) == (scene.width, scene.height, scene.seed)
        assert read_scene.n_objects == scene.n_objects
        for obj, read_obj in zip(scene.objects, read_scene.objects):
            assert read_obj.shape == obj.shape
            assert read_obj.depth == obj.depth
            assert read_obj.color == obj.color
            np.testing.assert_array_equal(read_obj.full_mask, obj.full_mask)
        np.testing.assert_array_equal(render(read_scene).pixels, render(scene).pixels)
        np.testing.assert_array_equal(ground_truth(read_scene).visible_boxes, ground_truth(scene).visible_boxes)


def test_overwrite(tmp_path, scenes):
    filepath = str(tmp_path / "scenes.nc")
    with SceneArchive(filepath, mode='w') as archive:
        archive.write(scenes)
    with pytest.raises(FileExistsError):
        SceneArchive(filepath, mode='w')
    with SceneArchive(filepath, mode='w', overwrite=True) as archive:
        archive.write(scenes[:1])
    with SceneArchive(filepath) as archive:
        assert len(archive.read()) == 1


def test_invalid_modes(tmp_path, scenes):
    filepath = str(tmp_path / "scenes.nc")
    with pytest.raises(FileNotFoundError):
        SceneArchive(filepath)
    with pytest.raises(ValueError):
        SceneArchive(filepath, mode='a')
    archive = SceneArchive(filepath, mode='w')
    with pytest.raises(IOError):
        archive.read()
    archive.write(scenes)
    with SceneArchive(filepath) as archive:
        with pytest.raises(IOError):
            archive.write(scenes)
