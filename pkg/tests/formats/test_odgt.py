import json
import os

from densa_common import *

from densa.io import DatasetRecord, load_odgt


def odgt_line(image_id, objects, **extra):
    return json.dumps(dict({'ID': image_id, 'gtboxes': objects}, **extra))


def person(vbox, ignore=0, tag='person'):
    return {'tag': tag, 'vbox': vbox, 'fbox': [0, 0, 1, 1], 'extra': {'ignore': ignore}}


@pytest.fixture
def odgt_file(tmp_path):
    lines = [odgt_line('273271,1a0d6000b9e1f5b7', [person([10, 20, 30, 60]), person([5, 5, 10, 10], ignore=1),
                                                  person([1, 1, 4, 4], tag='mask')]),
             '',
             odgt_line('273271,1b9330008da38cd6', [person([0, 0, 50, 100]), person([60, 10, 20, 40])],
                       width=70, height=90),
             'not json',
             odgt_line('273271,2', [{'tag': 'person', 'fbox': [0, 0, 1, 1]}]),
             json.dumps({'gtboxes': []})]
    filepath = tmp_path / "annotation_val.odgt"
    filepath.write_text('\n'.join(lines) + '\n')
    return str(filepath)


def test_load_odgt(odgt_file):
    with pytest.warns(UserWarning) as record:
        records = load_odgt(odgt_file)
    messages = [str(w.message) for w in record]
    assert any('line 4' in msg for msg in messages)
    assert any('line 5' in msg for msg in messages)
    assert any('line 6' in msg for msg in messages)
    assert len(records) == 2

    first, second = records
    assert first.image_id == '273271,1a0d6000b9e1f5b7'
    assert first.source == first.image_id
    np.testing.assert_array_equal(first.boxes, [[10, 20, 40, 80]])
    assert first.width is None
    # boxes are clipped to the image size
    np.testing.assert_array_equal(second.boxes, [[0, 0, 50, 90], [60, 10, 70, 50]])
    assert (second.width, second.height) == (70, 90)


def test_load_odgt_image_dir(odgt_file):
    with pytest.warns(UserWarning):
        records = load_odgt(odgt_file, image_dir='/data/images', image_ext='.png')
    assert records[0].source == os.path.join('/data/images', '273271,1a0d6000b9e1f5b7.png')
    assert len(records[1]) == 2


def test_load_odgt_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_odgt(str(tmp_path / "missing.odgt"))
    filepath = tmp_path / "broken.odgt"
    filepath.write_text('[1, 2]\n{"ID": "a"}\n')
    with pytest.warns(UserWarning):
        with pytest.raises(ValueError, match="no valid lines"):
            load_odgt(str(filepath))


def test_non_positive_box_is_malformed(tmp_path):
    filepath = tmp_path / "flat.odgt"
    filepath.write_text(odgt_line('a', [person([0, 0, 0, 5])]) + '\n' + odgt_line('b', []) + '\n')
    with pytest.warns(UserWarning, match="line 1"):
        records = load_odgt(str(filepath))
    assert [r.image_id for r in records] == ['b']
    assert len(records[0]) == 0


def test_dataset_record_validation():
    with pytest.raises(ValueError):
        DatasetRecord('a', 'a', BLOCK_BOXES, masks=[None])
    with pytest.raises(ValueError):
        DatasetRecord('a', 'a', BLOCK_BOXES, scores=[0.5])
    record = DatasetRecord('a', 'a', BLOCK_BOXES, scores=[0.5, 0.25])
    assert record.scores.dtype == np.float64
