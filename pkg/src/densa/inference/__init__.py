from densa.inference.pipeline import (CropWindow, CropPlan, PipelineConfig, Detection, AnnotationResult, plan_crops,
                                      annotate, annotate_crop, merge_crops)
