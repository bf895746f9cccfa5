# evaluation.py - Métricas de profundidad, alineación Procrustes y distancia Chamfer
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from .errors import DegenerateDataError, EmptySupportError, InvalidInputError
from .geometry import DepthMap, Mask

METRIC_KEYS = ("abs_rel", "sq_rel", "rmse", "log_rmse")


# ============================================================
# Métricas de profundidad
# ============================================================

@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    log_rmse: float
    scale_applied: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def depth_metrics(pred: DepthMap, gt: DepthMap, mask: Optional[Mask] = None) -> DepthMetrics:
    """Métricas estándar tras escalar la predicción a la mediana del GT."""
    if pred.shape != gt.shape:
        raise InvalidInputError(f"predicción {pred.shape} y GT {gt.shape} con dimensiones distintas")
    support = pred.validity & gt.validity
    if mask is not None:
        support &= mask.weights > 0
    if not support.any():
        raise EmptySupportError("depth_metrics: soporte vacío")
    d_gt = gt.values[support]
    d_pred = pred.values[support]
    if np.any(d_gt <= 0) or np.any(d_pred <= 0):
        raise InvalidInputError("profundidades no positivas en el soporte")

    s = float(np.median(d_gt) / np.median(d_pred))
    d = s * d_pred
    diff = d - d_gt
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / d_gt)),
        sq_rel=float(np.mean(diff ** 2 / d_gt)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        log_rmse=float(np.sqrt(np.mean((np.log(d) - np.log(d_gt)) ** 2))),
        scale_applied=s,
    )


# ============================================================
# Procrustes
# ============================================================

@dataclass(frozen=True, eq=False)
class AlignmentResult:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    residual: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> Dict:
        return {"rotation": np.asarray(self.rotation).tolist(),
                "translation": np.asarray(self.translation).tolist(),
                "scale": float(self.scale), "residual": float(self.residual)}


def procrustes_align(points_a, points_b, with_scale: bool = True) -> AlignmentResult:
    """Similitud (R, t, s) por SVD de la covarianza cruzada que lleva a sobre b."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or a.shape != b.shape:
        raise InvalidInputError(f"conjuntos de puntos incompatibles: {a.shape} vs {b.shape}")
    if a.shape[0] < 3:
        raise InvalidInputError("se requieren al menos 3 correspondencias")

    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    a0 = a - mu_a
    b0 = b - mu_b
    sv = np.linalg.svd(a0, compute_uv=False)
    if sv[0] <= 0 or sv[1] / sv[0] < 1e-10:
        raise DegenerateDataError("configuración colineal o degenerada", {"singular_values": sv.tolist()})

    cov = b0.T @ a0 / a.shape[0]
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var_a = float(np.mean(np.sum(a0 ** 2, axis=1)))
    s = float(np.trace(np.diag(S) @ D) / var_a) if with_scale else 1.0
    t = mu_b - s * R @ mu_a
    residual = float(np.sqrt(np.mean(np.sum((s * a @ R.T + t - b) ** 2, axis=1))))
    return AlignmentResult(R, t, s, residual)


# ============================================================
# Chamfer
# ============================================================

def _as_cloud(points, name: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise InvalidInputError(f"{name}: conjunto de puntos vacío")
    return pts


def chamfer_distance(cloud_from, cloud_to, direction: str = "one-way") -> float:
    """Media de la distancia al vecino más cercano (KD-tree); 'symmetric' promedia ambos sentidos."""
    a = _as_cloud(cloud_from, "cloud_from")
    b = _as_cloud(cloud_to, "cloud_to")
    if direction == "one-way":
        dist, _ = cKDTree(b).query(a, k=1)
        return float(np.mean(dist))
    if direction == "symmetric":
        return 0.5 * (chamfer_distance(a, b) + chamfer_distance(b, a))
    raise InvalidInputError(f"dirección desconocida: {direction}")


def _scaled_cloud(cloud_recon: np.ndarray, aligned: AlignmentResult, sigma: float) -> np.ndarray:
    """Reconstrucción alineada con la escala σ alrededor de su centroide."""
    c = cloud_recon.mean(axis=0)
    R = aligned.rotation
    return sigma * (cloud_recon - c) @ R.T + (aligned.scale * R @ c + aligned.translation)


def optimize_scale_chamfer(cloud_gt, cloud_recon, aligned: AlignmentResult,
                           low: float = 0.25, high: float = 4.0, tol: float = 1e-4) -> float:
    """Búsqueda 1-D acotada de la escala que minimiza Chamfer(GT → reconstrucción)."""
    gt = _as_cloud(cloud_gt, "cloud_gt")
    recon = _as_cloud(cloud_recon, "cloud_recon")
    s0 = float(aligned.scale)
    if not s0 > 0:
        raise InvalidInputError(f"escala de alineación no positiva: {s0}")

    def objective(sigma: float) -> float:
        return chamfer_distance(gt, _scaled_cloud(recon, aligned, sigma))

    result = minimize_scalar(objective, bounds=(low * s0, high * s0), method="bounded",
                             options={"xatol": tol * s0})
    best = float(result.x)
    if objective(s0) <= objective(best):
        return s0
    return best


# ============================================================
# Mallas y agregación por folds
# ============================================================

def sample_mesh_points(mesh, count: int = 100000, seed: int = 0) -> np.ndarray:
    """Muestreo uniforme por área (trimesh) con semilla fija."""
    import trimesh
    if len(mesh.triangles) == 0:
        raise InvalidInputError("malla vacía: no hay superficie para muestrear")
    tm = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.triangles, process=False)
    points, _ = trimesh.sample.sample_surface(tm, int(count), seed=int(seed))
    return np.asarray(points, dtype=np.float64)


def mesh_chamfer(mesh_gt, mesh_recon, centers_gt, centers_recon, samples: int = 100000, seed: int = 0,
                 low: float = 0.25, high: float = 4.0, tol: float = 1e-4) -> Dict[str, float]:
    """
    Procrustes sobre centros de cámara + optimización de escala + Chamfer GT → reconstrucción.
    """
    aligned = procrustes_align(centers_recon, centers_gt)
    gt_pts = sample_mesh_points(mesh_gt, samples, seed)
    rec_pts = sample_mesh_points(mesh_recon, samples, seed + 1)
    scale = optimize_scale_chamfer(gt_pts, rec_pts, aligned, low, high, tol)
    moved = _scaled_cloud(rec_pts, aligned, scale)
    return {
        "chamfer": chamfer_distance(gt_pts, moved),
        "chamfer_procrustes": chamfer_distance(gt_pts, aligned.apply(rec_pts)),
        "scale": scale,
        "procrustes_scale": aligned.scale,
        "procrustes_residual": aligned.residual,
    }


def split_folds(frame_ids: Sequence[str], k: int = 5) -> List[List[str]]:
    """Particiones contiguas y deterministas de los frames ordenados."""
    if k < 1:
        raise InvalidInputError("k debe ser >= 1")
    ids = sorted(frame_ids)
    k = min(k, len(ids)) if ids else 1
    return [list(chunk) for chunk in np.array_split(np.array(ids, dtype=object), k)]


def mean_metrics(items: Sequence[DepthMetrics]) -> Dict[str, float]:
    if not items:
        raise EmptySupportError("sin métricas para promediar")
    return {key: float(np.mean([getattr(m, key) for m in items])) for key in METRIC_KEYS}


def aggregate_folds(fold_values: Sequence[Dict[str, float]]) -> Dict[str, Tuple[float, float]]:
    """Media ± desvío estándar (poblacional) de cada métrica a través de los folds."""
    if not fold_values:
        raise EmptySupportError("sin folds para agregar")
    keys = [k for k in fold_values[0] if all(k in f for f in fold_values)]
    return {k: (float(np.mean([f[k] for f in fold_values])), float(np.std([f[k] for f in fold_values])))
            for k in keys}


def format_mean_std(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def table_row(name: str, aggregate: Dict[str, Tuple[float, float]], digits: int = 3) -> str:
    """Fila de tabla: método | Abs Rel | Sq Rel | RMSE | log RMSE | Chamfer."""
    cells = [name]
    for key in METRIC_KEYS + ("chamfer",):
        if key in aggregate:
            cells.append(format_mean_std(*aggregate[key], digits=digits))
        else:
            cells.append("-")
    return " | ".join(cells)


TABLE_HEADER = "Método | Abs Rel | Sq Rel | RMSE | log RMSE | Chamfer"
