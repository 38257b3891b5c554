import json

from densa_common import *

from densa.geometry import BoxXYXY, rle_decode, rle_encode
from densa.inference import AnnotationResult, Detection
from densa.io import load_coco, read_fingerprint, save_coco, to_coco


@pytest.fixture
def results(blocks):
    detections = []
    for k, score in [(1, 0.9), (0, 0.6)]:
        mask = blocks.labels == k
        detections.append(Detection(rle_encode(mask), BoxXYXY.from_array(BLOCK_BOXES[k]), score, crop_id=0))
    return {'scene_000001': AnnotationResult(detections, (32, 32)), 'scene_000002': AnnotationResult([], (32, 48))}


def test_to_coco_layout(results):
    content = to_coco(results, fingerprint='abc', sources={'scene_000001': 'scene_000001.png'})
    assert content['info']['fingerprint'] == 'abc'
    assert content['categories'] == [{'id': 1, 'name': 'object'}]
    assert content['images'][0] == {'id': 1, 'name': 'scene_000001', 'file_name': 'scene_000001.png',
                                    'width': 32, 'height': 32}
    assert content['images'][1]['file_name'] == 'scene_000002'
    assert (content['images'][1]['width'], content['images'][1]['height']) == (48, 32)
    first = content['annotations'][0]
    assert first['id'] == 1
    assert first['image_id'] == 1
    assert first['bbox'] == [16., 16., 10., 12.]
    assert first['area'] == 120
    assert first['score'] == 0.9
    assert first['iscrowd'] == 0
    assert first['segmentation']['size'] == [32, 32]
    assert sum(first['segmentation']['counts']) == 32 * 32
    json.dumps(content)


def test_save_load(tmp_path, results, blocks):
    filepath = str(tmp_path / "annotations.json")
    save_coco(results, filepath, fingerprint='abc')
    assert read_fingerprint(filepath) == 'abc'
    with pytest.raises(FileExistsError):
        save_coco(results, filepath)
    save_coco(results, filepath, overwrite=True)

    records = load_coco(filepath)
    assert [r.image_id for r in records] == ['scene_000001', 'scene_000002']
    first = records[0]
    np.testing.assert_allclose(first.boxes, BLOCK_BOXES[[1, 0]])
    np.testing.assert_allclose(first.scores, [0.9, 0.6])
    np.testing.assert_array_equal(rle_decode(first.masks[0]), blocks.labels == 1)
    assert (first.width, first.height) == (32, 32)
    assert len(records[1]) == 0
    assert records[1].masks is None


def test_load_ground_truth_file(tmp_path):
    content = {'images': [{'id': 7, 'width': 20, 'height': 10, 'file_name': 'a.jpg'}],
               'annotations': [{'id': 1, 'image_id': 7, 'bbox': [2, 3, 4, 5], 'category_id': 1},
                               {'id': 2, 'image_id': 7, 'bbox': [0, 0, 20, 10], 'iscrowd': 1}],
               'categories': [{'id': 1, 'name': 'person'}]}
    filepath = tmp_path / "gt.json"
    filepath.write_text(json.dumps(content))
    records = load_coco(str(filepath))
    assert len(records) == 1
    record = records[0]
    assert record.image_id == '7'
    assert record.source == 'a.jpg'
    np.testing.assert_array_equal(record.boxes, [[2, 3, 6, 8]])
    assert record.masks is None
    assert record.scores is None
    assert read_fingerprint(str(filepath)) is None


def test_load_invalid_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_coco(str(tmp_path / "missing.json"))

    filepath = tmp_path / "bad.json"
    filepath.write_text(json.dumps({'images': []}))
    with pytest.raises(ValueError, match="'annotations'"):
        load_coco(str(filepath))

    filepath.write_text(json.dumps({'images': [{'id': 1, 'width': 4}], 'annotations': []}))
    with pytest.raises(ValueError, match="'height'"):
        load_coco(str(filepath))

    filepath.write_text(json.dumps({'images': [], 'annotations': [{'image_id': 3, 'bbox': [0, 0, 1, 1]}]}))
    with pytest.raises(ValueError, match="unknown image"):
        load_coco(str(filepath))


def test_compressed_segmentation(tmp_path):
    mask_utils = pytest.importorskip('pycocotools.mask')
    mask = np.zeros((10, 20), dtype=bool)
    mask[2:6, 3:9] = True
    rle = mask_utils.encode(np.asfortranarray(mask.astype(np.uint8)))
    rle['counts'] = rle['counts'].decode('utf-8')
    content = {'images': [{'id': 1, 'width': 20, 'height': 10}],
               'annotations': [{'image_id': 1, 'bbox': [3, 2, 6, 4], 'segmentation': rle},
                               {'image_id': 1, 'bbox': [3, 2, 6, 4],
                                'segmentation': [[3, 2, 9, 2, 9, 6, 3, 6]]}]}
    filepath = tmp_path / "compressed.json"
    filepath.write_text(json.dumps(content))
    record = load_coco(str(filepath))[0]
    np.testing.assert_array_equal(rle_decode(record.masks[0]), mask)
    assert rle_decode(record.masks[1])[3, 5]
