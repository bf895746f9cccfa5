# colon_recon/__init__.py
"""
Toolkit determinista de reconstrucción de colon basada en normales.

Módulos:
- geometry: cámara pinhole, poses rígidas, campos por píxel, warping bilineal
- losses: pérdidas de consistencia (fotométrica, normales, profundidad, ortogonalidad, suavidad)
- illumination: campo de luz de fuente puntual en la cámara
- normal_integration: normales ↔ profundidad y pérdidas de refinamiento
- refinement: refinamiento multi-escala n×NR
- evaluation: métricas de profundidad, Procrustes, Chamfer, folds
- fusion: TSDF, marching cubes, cobertura y huecos
- phantom: fantoma sintético y renderizado por sphere tracing
- pipeline: comandos reproducibles usados por cli.py
"""

from . import errors
from . import utils
from . import geometry
from . import illumination
from . import losses
from . import normal_integration
from . import refinement
from . import evaluation
from . import fusion
from . import phantom
from . import formats
from . import pipeline

from .errors import (
    ColonReconError,
    InvalidInputError,
    SingularityError,
    EmptySupportError,
    DegenerateDataError,
    SolverError,
    OptimizerError,
    DatasetIOError,
    exit_code_for,
)

from .geometry import (
    Intrinsics,
    Pose,
    DepthMap,
    NormalMap,
    ImageRGB,
    Mask,
    backproject,
    project_warp,
    sample_bilinear,
    relative_pose,
)

from .illumination import LightField, light_field, shade_lambertian, assemble_refinement_input

from .losses import (
    LossWeights,
    LossReport,
    LossInputs,
    SourceView,
    loss_normal_consistency,
    loss_orthogonality,
    loss_depth_consistency,
    loss_photometric,
    loss_smoothness,
    compute_masks,
    loss_init_total,
    warp_image,
)

from .normal_integration import normals_from_depth, integrate_normals, loss_gt, loss_dfn, phase_losses

from .refinement import RefinementConfig, RefinementState, refine_iteration, refine_multiscale

from .evaluation import (
    DepthMetrics,
    depth_metrics,
    procrustes_align,
    chamfer_distance,
    optimize_scale_chamfer,
    split_folds,
    aggregate_folds,
)

from .fusion import VoxelGrid, TriangleMesh, Hole, fuse_tsdf, extract_mesh, coverage_holes

from .phantom import Phantom, make_phantom, make_trajectory, render_frame

from .utils import PipelineConfig, load_config

__all__ = [
    # Módulos
    "errors", "utils", "geometry", "illumination", "losses", "normal_integration",
    "refinement", "evaluation", "fusion", "phantom", "formats", "pipeline",
    # Errores
    "ColonReconError", "InvalidInputError", "SingularityError", "EmptySupportError",
    "DegenerateDataError", "SolverError", "OptimizerError", "DatasetIOError", "exit_code_for",
    # Geometría
    "Intrinsics", "Pose", "DepthMap", "NormalMap", "ImageRGB", "Mask",
    "backproject", "project_warp", "sample_bilinear", "relative_pose",
    # Iluminación
    "LightField", "light_field", "shade_lambertian", "assemble_refinement_input",
    # Pérdidas
    "LossWeights", "LossReport", "LossInputs", "SourceView",
    "loss_normal_consistency", "loss_orthogonality", "loss_depth_consistency",
    "loss_photometric", "loss_smoothness", "compute_masks", "loss_init_total", "warp_image",
    # Integración y refinamiento
    "normals_from_depth", "integrate_normals", "loss_gt", "loss_dfn", "phase_losses",
    "RefinementConfig", "RefinementState", "refine_iteration", "refine_multiscale",
    # Evaluación
    "DepthMetrics", "depth_metrics", "procrustes_align", "chamfer_distance",
    "optimize_scale_chamfer", "split_folds", "aggregate_folds",
    # Fusión
    "VoxelGrid", "TriangleMesh", "Hole", "fuse_tsdf", "extract_mesh", "coverage_holes",
    # Fantoma
    "Phantom", "make_phantom", "make_trajectory", "render_frame",
    # Configuración
    "PipelineConfig", "load_config",
]

__version__ = "1.0.0"
__author__ = "colon_recon"
__description__ = "Reconstrucción de colon basada en normales con fantoma sintético"
