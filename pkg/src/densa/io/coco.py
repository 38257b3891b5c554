"""
COCO JSON reading and writing.

Result files hold one image entry per annotated image and one annotation per detection with an uncompressed RLE
segmentation (column-major, zero-first counts, `size` = [height, width]), an XYWH box, a score and the single
category 1. The configuration fingerprint is stored in `info.fingerprint`.

"""

import os
import json
import logging
from collections import OrderedDict
from typing import List, Mapping

import numpy as np

from densa.geometry.masks import RleMask, rle_encode
from densa.io.odgt import DatasetRecord

logger = logging.getLogger(__name__)

CATEGORY = {'id': 1, 'name': 'object'}
TOP_LEVEL_KEYS = ('images', 'annotations')
IMAGE_KEYS = ('id', 'width', 'height')
ANNOTATION_KEYS = ('image_id', 'bbox')


def _require(entry, keys, what):
    if not isinstance(entry, dict):
        err_msg = f"COCO {what} entry must be a JSON object."
        raise ValueError(err_msg)
    missing = [key for key in keys if key not in entry]
    if missing:
        err_msg = f"COCO {what} entry is missing the field(s) {', '.join(repr(key) for key in missing)}."
        raise ValueError(err_msg)


def _decode_segmentation(segm, height, width) -> RleMask:
    """ Converts any COCO segmentation (uncompressed RLE, compressed RLE or polygons) to a run-length mask. """
    if isinstance(segm, dict) and not isinstance(segm.get('counts'), (str, bytes)):
        return RleMask.from_dict(segm)
    try:
        from pycocotools import mask as mask_utils
    except ImportError:
        err_msg = "Compressed RLE and polygon segmentations need 'pycocotools' (install densa[coco])."
        raise ValueError(err_msg)
    if isinstance(segm, dict):
        rle = dict(segm)
        if isinstance(rle['counts'], str):
            rle['counts'] = rle['counts'].encode('utf-8')
    else:
        rle = mask_utils.merge(mask_utils.frPyObjects(segm, height, width))
    return rle_encode(mask_utils.decode(rle).astype(bool))


def to_coco(results: Mapping[str, object], fingerprint=None, sources=None) -> dict:
    """
    Builds a COCO result dictionary.

    Parameters
    ----------
    results : mapping
        Image ID to `AnnotationResult`, in output order.
    fingerprint : str, optional
        Configuration fingerprint.
    sources : mapping, optional
        Image ID to image file name. Defaults to the image ID.

    Returns
    -------
    dict

    """
    sources = sources or {}
    images, annotations = [], []
    ann_id = 1
    for img_id, (image_id, result) in enumerate(results.items(), start=1):
        height, width = result.image_size
        images.append({'id': img_id, 'name': str(image_id), 'file_name': str(sources.get(image_id, image_id)),
                       'width': int(width), 'height': int(height)})
        for det in result.detections:
            x, y, w, h = det.box.to_xywh()
            annotations.append({'id': ann_id, 'image_id': img_id, 'category_id': CATEGORY['id'],
                                'bbox': [float(x), float(y), float(w), float(h)], 'area': int(det.mask.area),
                                'segmentation': det.mask.to_dict(), 'score': float(det.score), 'iscrowd': 0})
            ann_id += 1
    return {'info': {'description': 'densa annotations', 'fingerprint': fingerprint},
            'images': images, 'annotations': annotations, 'categories': [dict(CATEGORY)]}


def save_coco(results: Mapping[str, object], filepath, fingerprint=None, sources=None, overwrite=False):
    """ Writes annotation results as a COCO JSON file (see `to_coco`). """
    if os.path.exists(filepath) and not overwrite:
        err_msg = f"File '{filepath}' exists."
        raise FileExistsError(err_msg)
    content = to_coco(results, fingerprint=fingerprint, sources=sources)
    with open(filepath, 'w') as f:
        json.dump(content, f, sort_keys=True, indent=1)
    logger.info(f"Wrote {len(content['annotations'])} annotations of {len(content['images'])} images "
                f"to '{filepath}'.")


def load_coco(filepath) -> List[DatasetRecord]:
    """
    Reads a COCO JSON file (ground truth or results) into dataset records.

    Boxes are converted from XYWH to XYXY. Masks are kept if every annotation of an image has a segmentation, scores
    if every annotation has a score. Crowd annotations are skipped.

    """
    if not os.path.exists(filepath):
        err_msg = f"File '{filepath}' does not exist."
        raise FileNotFoundError(err_msg)
    with open(filepath, 'r') as f:
        content = json.load(f)
    _require(content, TOP_LEVEL_KEYS, 'file')

    images = OrderedDict()
    for img in content['images']:
        _require(img, IMAGE_KEYS, 'image')
        images[img['id']] = (img, [])
    for ann in content['annotations']:
        _require(ann, ANNOTATION_KEYS, 'annotation')
        if ann['image_id'] not in images:
            err_msg = f"COCO annotation refers to unknown image ID {ann['image_id']}."
            raise ValueError(err_msg)
        if ann.get('iscrowd', 0):
            continue
        images[ann['image_id']][1].append(ann)

    records = []
    for img, anns in images.values():
        height, width = int(img['height']), int(img['width'])
        boxes = np.array([ann['bbox'] for ann in anns], dtype=np.float64).reshape(-1, 4)
        boxes[:, 2:] += boxes[:, :2]
        masks, scores = None, None
        if anns and all('segmentation' in ann for ann in anns):
            masks = [_decode_segmentation(ann['segmentation'], height, width) for ann in anns]
        if anns and all('score' in ann for ann in anns):
            scores = np.array([ann['score'] for ann in anns], dtype=np.float64)
        records.append(DatasetRecord(str(img.get('name', img['id'])), img.get('file_name', str(img['id'])), boxes,
                                     masks=masks, scores=scores, width=width, height=height))
    return records


def read_fingerprint(filepath):
    """ Configuration fingerprint stored in a COCO file written by `save_coco`, None if absent. """
    with open(filepath, 'r') as f:
        return json.load(f).get('info', {}).get('fingerprint')
