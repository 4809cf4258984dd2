"""Incremental object-centric TSDF mapping from posed depth and instance masks."""
from .association import PersistentLabels, associate_frame, associate_instances, associate_segments, compute_3d_overlaps
from .config import PipelineConfig, load_config
from .evaluation import evaluate, mean_ap
from .geometry import CameraIntrinsics, DepthFrame, RigidPose, VertexMap, project, unproject, unproject_pixel
from .instances import MaskFrame, compute_overlaps, load_masks, refine_segments, save_masks
from .mesh import extract_mesh, write_ply
from .pipeline import Mapper, run
from .segmentation import SegmentationParams, edge_classify, estimate_normals, segment_frame
from .volume import CountTables, GlobalSegment, IntegrationParams, TsdfVolume

__version__ = "0.1.0"
