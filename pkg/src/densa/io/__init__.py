from densa.io.odgt import DatasetRecord, load_odgt
from densa.io.coco import load_coco, save_coco, to_coco, read_fingerprint
