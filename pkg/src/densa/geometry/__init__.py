from densa.geometry.boxes import BoxXYXY, as_box_array, iou_boxes, box_iou_matrix, nms, nms_detections, score_order
from densa.geometry.masks import (SoftMask, RleMask, as_bitmask, iou_masks, mask_to_box, masks_to_boxes,
                                  resize_matrix, resize_array, resize_array_adjoint, resize_mask, upsample_binary,
                                  coverage_resize, label_coverage, rle_encode, rle_decode, rle_area, point_in_mask)
from densa.geometry.prompts import PointPrompt, PromptSet, grid_points
