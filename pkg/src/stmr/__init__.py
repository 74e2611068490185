"""Hand mesh regression with spiral-window attention over a mesh hierarchy."""

from .estimator import STMRRegressor
from .hierarchy import MeshHierarchy, build_hierarchy, simplify_qem, upsample_matrix
from .losses import LossWeights, total_loss
from .mesh_core import Mesh, build_adjacency, face_unit_normals, load_obj, save_obj, validate_manifold
from .metrics import metrics_report, procrustes_align
from .spiral import SpiralTable, build_spiral_table, ring, spiral_sequence

__version__ = "0.1.0"

__all__ = [
    "LossWeights", "Mesh", "MeshHierarchy", "STMRRegressor", "SpiralTable", "build_adjacency",
    "build_hierarchy", "build_spiral_table", "face_unit_normals", "load_obj", "metrics_report",
    "procrustes_align", "ring", "save_obj", "simplify_qem", "spiral_sequence", "total_loss", "upsample_matrix",
    "validate_manifold",
]
