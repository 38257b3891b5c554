""" Dataset records and the CrowdHuman ODGT (JSON lines) reader. """

import os
import json
import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from densa.geometry.boxes import as_box_array

logger = logging.getLogger(__name__)

PERSON_TAG = 'person'


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    """
    Ground truth of one dataset image.

    Parameters
    ----------
    image_id : str
        Image identifier.
    source : str or int
        Image file path or synthetic scene seed.
    boxes : np.ndarray
        Visible ground truth boxes (N, 4), XYXY.
    masks : list of RleMask, optional
        Instance masks aligned with `boxes`.
    scores : np.ndarray, optional
        Detection scores aligned with `boxes`, for records read from result files.
    width, height : int, optional
        Image size, if known. Boxes are clipped to it.

    """
    image_id: str
    source: object
    boxes: np.ndarray
    masks: Optional[list] = None
    scores: Optional[np.ndarray] = None
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        boxes = as_box_array(self.boxes)
        if self.width is not None and self.height is not None:
            boxes = boxes.copy()
            boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, self.width)
            boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, self.height)
        object.__setattr__(self, 'boxes', boxes)
        if self.masks is not None and len(self.masks) != boxes.shape[0]:
            err_msg = f"Number of masks ({len(self.masks)}) does not match number of boxes ({boxes.shape[0]})."
            raise ValueError(err_msg)
        if self.scores is not None:
            scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if scores.size != boxes.shape[0]:
                err_msg = f"Number of scores ({scores.size}) does not match number of boxes ({boxes.shape[0]})."
                raise ValueError(err_msg)
            object.__setattr__(self, 'scores', scores)

    def __len__(self) -> int:
        return self.boxes.shape[0]


def _vbox_to_xyxy(vbox) -> Tuple[float, float, float, float]:
    x, y, w, h = [float(v) for v in vbox]
    if w <= 0 or h <= 0:
        err_msg = f"Box {vbox} has non-positive extent."
        raise ValueError(err_msg)
    return x, y, x + w, y + h


def _parse_line(line) -> DatasetRecord:
    entry = json.loads(line)
    if not isinstance(entry, dict):
        err_msg = "Line is not a JSON object."
        raise ValueError(err_msg)
    for key in ('ID', 'gtboxes'):
        if key not in entry:
            err_msg = f"Missing field '{key}'."
            raise ValueError(err_msg)
    boxes = []
    for obj in entry['gtboxes']:
        if obj.get('tag') != PERSON_TAG:
            continue
        if obj.get('extra', {}).get('ignore', 0) == 1:
            continue
        if 'vbox' not in obj:
            err_msg = "Person object without field 'vbox'."
            raise ValueError(err_msg)
        boxes.append(_vbox_to_xyxy(obj['vbox']))
    return DatasetRecord(str(entry['ID']), str(entry['ID']), np.array(boxes, dtype=np.float64).reshape(-1, 4),
                         width=entry.get('width'), height=entry.get('height'))


def load_odgt(filepath, image_dir=None, image_ext='.jpg') -> List[DatasetRecord]:
    """
    Reads a CrowdHuman ODGT file.

    Only visible boxes ('vbox', XYWH) of objects tagged 'person' are kept; objects flagged with
    `extra.ignore == 1` are skipped. Malformed lines are skipped with a warning naming the line number.

    Parameters
    ----------
    filepath : str
        Path to the ODGT file.
    image_dir : str, optional
        Directory of the image files. If given, the record sources are '<image_dir>/<ID><image_ext>', otherwise the
        image IDs.
    image_ext : str, optional
        Image file extension (default '.jpg').

    Returns
    -------
    list of DatasetRecord

    """
    if not os.path.exists(filepath):
        err_msg = f"File '{filepath}' does not exist."
        raise FileNotFoundError(err_msg)

    records = []
    bad_lines = []
    with open(filepath, 'r') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = _parse_line(line)
            except (ValueError, TypeError, AttributeError) as exc:
                bad_lines.append(line_no)
                wrn_msg = f"Skipping malformed line {line_no} of '{filepath}': {exc}"
                warnings.warn(wrn_msg)
                continue
            if image_dir is not None:
                source = os.path.join(image_dir, record.image_id + image_ext)
                record = DatasetRecord(record.image_id, source, record.boxes, width=record.width,
                                       height=record.height)
            records.append(record)

    if not records:
        err_msg = f"File '{filepath}' contains no valid lines."
        raise ValueError(err_msg)
    logger.info(f"Read {len(records)} records from '{filepath}' ({len(bad_lines)} malformed lines).")
    return records
