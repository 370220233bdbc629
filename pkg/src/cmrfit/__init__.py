"""Category-level mesh reconstruction from annotated image collections by
direct optimization, shape with cameras first and texture flow second."""

from .camera import Camera, KeypointObservations, SfMResult, align_similarity, project, sfm_factorize
from .errors import CmrError, DataError, DegenerateMotionError, NumericError
from .fit import (CollectionModel, OptimizerConfig, fit_instance, init_model, load_checkpoint, pca_deformations,
                  save_checkpoint, train_shape, train_texture)
from .geom import Mesh, SymmetryMap, build_symmetry, cotangent_laplacian, expand_symmetric, icosphere
from .objective import ObjectiveConfig, total_objective
from .render import RasterConfig, rasterize_hard, soft_silhouette

__all__ = [
    "Camera", "KeypointObservations", "SfMResult", "align_similarity", "project", "sfm_factorize",
    "CmrError", "DataError", "DegenerateMotionError", "NumericError",
    "CollectionModel", "OptimizerConfig", "fit_instance", "init_model", "load_checkpoint", "pca_deformations",
    "save_checkpoint", "train_shape", "train_texture",
    "Mesh", "SymmetryMap", "build_symmetry", "cotangent_laplacian", "expand_symmetric", "icosphere",
    "ObjectiveConfig", "total_objective", "RasterConfig", "rasterize_hard", "soft_silhouette",
]
__version__ = "0.1.0"
