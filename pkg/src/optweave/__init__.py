"""Online switching between a stable and an agile tracking controller."""
__version__ = "0.1.0"

CLIP_FORMAT = 1
DATASET_FORMAT = 1
CHECKPOINT_FORMAT = 1
CALIBRATION_FORMAT = 1
MANIFEST_FORMAT = 1
