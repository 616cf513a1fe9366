from .anchors import AnchorSpec, anchor_array, propose_anchors
from .features import FeatureBlock, ImageFeatures, extract_features, resolve_blocks
from .pathway import FeatureSpec, PooledBoxes, pool_boxes
from .model import DetectorHyper, DetectorModel, DetectorBatch, detector_loss, init_detector
from .train import assign_anchors, fit
from .predict import GroupedDetections, flatten, predict, ranked_boxes
from .checkpoint import load_detector, save_detector
