"""Joint panoptic-part fusion and evaluation tools."""
from .config import FusionConfig
from .detections import Detection, filter_detections, read_detections, write_detections
from .estimators import HeadOutputs, JointPanopticPartFusion, TopDownMergeBaseline
from .fusion import FusedLogitStack, fuse_masked_logits, jppf, panoptic_fuse_two
from .labelmap import LabelMap, load_labelmap, save_labelmap
from .merge import part_map_from_logits, top_down_merge
from .taxonomy import ClassCatalog, ClassDef, load_catalog, preset_catalog
from .tensors import BBox, load_tensor, save_tensor

__version__ = "0.1.0"

__all__ = [
    "BBox", "ClassCatalog", "ClassDef", "Detection", "FusedLogitStack", "FusionConfig",
    "HeadOutputs", "JointPanopticPartFusion", "TopDownMergeBaseline",
    "LabelMap", "filter_detections", "fuse_masked_logits", "jppf", "load_catalog",
    "load_labelmap", "load_tensor", "panoptic_fuse_two", "part_map_from_logits",
    "preset_catalog", "read_detections", "save_labelmap", "save_tensor",
    "top_down_merge", "write_detections",
]
