# normal_integration.py - Conversión normales ↔ profundidad y pérdidas de refinamiento
"""
normals_from_depth: producto cruz de las diferencias diagonales.
integrate_normals:  mínimos cuadrados sobre log-profundidad (perspectiva),
                    anclado a la mediana.
loss_gt, loss_dfn, phase_losses: pérdidas del régimen de tres fases.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.linalg import spsolve

from .errors import EmptySupportError, InvalidInputError, SolverError
from .geometry import (
    DepthMap, Intrinsics, Mask, NormalMap, Pose,
    backproject_map, resize_depth, resize_normals,
)
from .losses import loss_normal_consistency

GRAZING_COS = 1e-3
SCREENING = 1e-8
# atadura a la referencia (log-profundidad) y salto máximo admitido respecto de ella
REFERENCE_WEIGHT = 1e-3
JUMP_TOLERANCE = 0.1


# ============================================================
# Profundidad → normales
# ============================================================

def normals_from_depth(depth: DepthMap, intrinsics: Intrinsics) -> NormalMap:
    """Normales por producto cruz de los pares diagonales, orientadas hacia la cámara."""
    h, w = depth.shape
    if h < 3 or w < 3:
        raise InvalidInputError(f"normals_from_depth requiere al menos 3x3, recibido {h}x{w}")
    if depth.shape != intrinsics.shape:
        raise InvalidInputError("profundidad y cámara con dimensiones distintas")
    X = backproject_map(depth.filled(1.0), intrinsics)
    dv = depth.validity
    c = (slice(1, -1), slice(1, -1))
    tl, br = (slice(None, -2), slice(None, -2)), (slice(2, None), slice(2, None))
    tr, bl = (slice(None, -2), slice(2, None)), (slice(2, None), slice(None, -2))
    a = X[br] - X[tl]
    b = X[bl] - X[tr]
    n = np.cross(a, b)
    norm = np.linalg.norm(n, axis=-1)
    scale = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    ok = dv[c] & dv[tl] & dv[br] & dv[tr] & dv[bl] & (norm > 1e-12 * np.maximum(scale, 1e-300))
    n = n / np.where(ok, norm, 1.0)[..., None]
    # hacia la cámara: N·X < 0
    flip = np.einsum("hwc,hwc->hw", n, X[c]) > 0
    n = np.where(flip[..., None], -n, n)
    n = np.where(ok[..., None], n, 0.0)

    vectors = np.pad(n, ((1, 1), (1, 1), (0, 0)), mode="edge")
    validity = np.pad(ok, 1, mode="edge")
    return NormalMap(vectors, validity)


# ============================================================
# Normales → profundidad
# ============================================================

def _pair_equations(nrm: np.ndarray, rays: np.ndarray, idx: np.ndarray, first, second):
    """Ecuaciones l_j − l_i = ln((n̄·r_i)/(n̄·r_j)) para un par de vecindad."""
    i = idx[first]
    j = idx[second]
    keep = (i >= 0) & (j >= 0)
    n_bar = nrm[first] + nrm[second]
    n_bar /= np.maximum(np.linalg.norm(n_bar, axis=-1), 1e-300)[..., None]
    ri, rj = rays[first], rays[second]
    di = np.einsum("hwc,hwc->hw", n_bar, ri)
    dj = np.einsum("hwc,hwc->hw", n_bar, rj)
    cos_i = np.abs(di) / np.linalg.norm(ri, axis=-1)
    cos_j = np.abs(dj) / np.linalg.norm(rj, axis=-1)
    keep &= (di * dj > 0) & (cos_i > GRAZING_COS) & (cos_j > GRAZING_COS)
    with np.errstate(divide="ignore", invalid="ignore"):
        rhs = np.log(di / dj)
    return i[keep], j[keep], rhs[keep]


def integrate_normals_with_residual(normals: NormalMap, intrinsics: Intrinsics, anchor_depth: float,
                                   reference: Optional[DepthMap] = None) -> Tuple[DepthMap, float]:
    """
    Integra normales en log-profundidad.

    Con `reference` (una profundidad previa del mismo frame) se descartan las
    ecuaciones cuyo salto contradice al de la referencia en más de
    JUMP_TOLERANCE, y cada píxel se ata débilmente a log(reference): las
    discontinuidades de oclusión sobreviven y las regiones desconectadas
    quedan en su profundidad.

    Returns:
        (profundidad con mediana = anchor_depth, residuo RMS del sistema)
    """
    if not (np.isfinite(anchor_depth) and anchor_depth > 0):
        raise InvalidInputError(f"anchor_depth debe ser > 0, recibido {anchor_depth}")
    if normals.shape != intrinsics.shape:
        raise InvalidInputError("normales y cámara con dimensiones distintas")
    if reference is not None and reference.shape != normals.shape:
        raise InvalidInputError("profundidad de referencia con dimensiones distintas")
    valid = normals.validity
    n_unknowns = int(valid.sum())
    if n_unknowns == 0:
        raise SolverError("integración sin píxeles válidos",
                          {"valid_pixels": 0, "equations": 0, "residual": 0.0})

    idx = np.full(valid.shape, -1, dtype=np.int64)
    idx[valid] = np.arange(n_unknowns)
    rays = intrinsics.rays()
    nrm = normals.vectors

    eqs = [
        _pair_equations(nrm, rays, idx, (slice(None), slice(None, -1)), (slice(None), slice(1, None))),
        _pair_equations(nrm, rays, idx, (slice(None, -1), slice(None)), (slice(1, None), slice(None))),
    ]
    i = np.concatenate([e[0] for e in eqs])
    j = np.concatenate([e[1] for e in eqs])
    rhs = np.concatenate([e[2] for e in eqs])

    weights = np.full(n_unknowns, SCREENING)
    target = np.zeros(n_unknowns)
    has_ref = np.zeros(n_unknowns, dtype=bool)
    if reference is not None:
        ref_ok = reference.validity & (reference.filled(0.0) > 0)
        has_ref = ref_ok[valid]
        target[has_ref] = np.log(reference.values[valid][has_ref])
        weights[has_ref] = REFERENCE_WEIGHT
        both = has_ref[i] & has_ref[j]
        jump = target[j] - target[i]
        consistent = ~both | (np.abs(jump - rhs) <= JUMP_TOLERANCE)
        if not consistent.all():
            print(f"[integrate] {int((~consistent).sum())} ecuaciones descartadas por salto de profundidad")
        i, j, rhs = i[consistent], j[consistent], rhs[consistent]

    m = rhs.size
    if m == 0 and not has_ref.any():
        raise SolverError("sistema singular: ninguna ecuación de gradiente utilizable (normales rasantes)",
                          {"valid_pixels": n_unknowns, "equations": 0, "residual": 0.0})

    rows = np.concatenate([np.arange(m), np.arange(m)])
    cols = np.concatenate([j, i])
    vals = np.concatenate([np.ones(m), -np.ones(m)])
    A = coo_matrix((vals, (rows, cols)), shape=(m, n_unknowns)).tocsr()
    lhs = (A.T @ A + diags(weights, format="csr")).tocsc()
    log_z = spsolve(lhs, A.T @ rhs + weights * target)
    residual = float(np.sqrt(np.mean((A @ log_z - rhs) ** 2))) if m else 0.0
    if not np.all(np.isfinite(log_z)):
        raise SolverError("la integración produjo valores no finitos",
                          {"valid_pixels": n_unknowns, "equations": m, "residual": residual})

    # píxeles sin ecuación ni referencia quedan inválidos
    touched = has_ref.copy()
    touched[i] = True
    touched[j] = True
    z = np.exp(log_z - np.median(log_z[touched]))
    z *= anchor_depth / np.median(z[touched])

    out = np.full(valid.shape, np.nan)
    flat_valid = np.zeros(valid.shape, dtype=bool)
    out[valid] = np.where(touched, z, np.nan)
    flat_valid[valid] = touched
    return DepthMap(out, flat_valid), residual


def integrate_normals(normals: NormalMap, intrinsics: Intrinsics, anchor_depth: float,
                      reference: Optional[DepthMap] = None) -> DepthMap:
    return integrate_normals_with_residual(normals, intrinsics, anchor_depth, reference)[0]


# ============================================================
# Pérdidas de refinamiento
# ============================================================

def _normal_l1(a: NormalMap, b: NormalMap) -> float:
    support = a.validity & b.validity
    if not support.any():
        raise EmptySupportError("término de normales sin soporte")
    return float(np.abs(a.vectors - b.vectors).sum(axis=-1)[support].mean())


def median_scale(pred: DepthMap, gt: DepthMap, support: Optional[np.ndarray] = None) -> float:
    """α = median(gt)/median(pred) sobre el soporte común."""
    if support is None:
        support = pred.validity & gt.validity
    if not support.any():
        raise EmptySupportError("sin píxeles comunes para el escalado por mediana")
    med_pred = float(np.median(pred.values[support]))
    if not med_pred > 0:
        raise InvalidInputError(f"mediana de la predicción no positiva: {med_pred}")
    return float(np.median(gt.values[support])) / med_pred


def loss_gt(pred_depths: Sequence[DepthMap], pred_normals: Sequence[NormalMap],
            gt_depth: DepthMap, gt_normals: NormalMap) -> float:
    """Σ_i ‖N − N̂_i‖₁ + ‖D − α_i·D̂_i‖₁ con el GT reescalado a cada resolución."""
    if len(pred_depths) != len(pred_normals) or not pred_depths:
        raise InvalidInputError("se requiere una predicción de profundidad y normales por iteración")
    total = 0.0
    for depth_i, normals_i in zip(pred_depths, pred_normals):
        h, w = depth_i.shape
        gt_d = resize_depth(gt_depth, w, h)
        gt_n = resize_normals(gt_normals, w, h)
        support = depth_i.validity & gt_d.validity
        alpha = median_scale(depth_i, gt_d, support)
        depth_term = float(np.abs(gt_d.values[support] - alpha * depth_i.values[support]).mean())
        total += _normal_l1(gt_n, normals_i) + depth_term
    return total


def loss_dfn(integrated_depths: Sequence[DepthMap], input_normals: Sequence[NormalMap],
             intrinsics: Intrinsics) -> float:
    """Σ_i ‖normals_from_depth(D_i) − N̂_i‖₁ con la cámara reescalada a cada resolución."""
    if len(integrated_depths) != len(input_normals):
        raise InvalidInputError("listas de profundidad y normales desalineadas")
    total = 0.0
    for depth_i, normals_i in zip(integrated_depths, input_normals):
        h, w = depth_i.shape
        k_i = intrinsics.scaled(w, h) if (h, w) != intrinsics.shape else intrinsics
        total += _normal_l1(normals_from_depth(depth_i, k_i), normals_i)
    return total


@dataclass(frozen=True, eq=False)
class NormPair:
    """Par de frames para L_norm entre normales refinadas."""

    normals_s: NormalMap
    normals_t: NormalMap
    depth_t: DepthMap
    pose_t_to_s: Pose
    intrinsics: Intrinsics
    mask: Optional[Mask] = None


@dataclass(frozen=True, eq=False)
class PhaseLossInputs:
    pred_depths: Sequence[DepthMap] = ()
    pred_normals: Sequence[NormalMap] = ()
    gt_depth: Optional[DepthMap] = None
    gt_normals: Optional[NormalMap] = None
    integrated_depths: Sequence[DepthMap] = ()
    input_normals: Sequence[NormalMap] = ()
    intrinsics: Optional[Intrinsics] = None
    norm_pair: Optional[NormPair] = None


def _norm_term(inputs: PhaseLossInputs, phase: int) -> float:
    p = inputs.norm_pair
    if p is None:
        raise InvalidInputError(f"la fase {phase} requiere norm_pair para L_norm (usar lambda1 = 0 para omitirlo)")
    return loss_normal_consistency(p.normals_s, p.normals_t, p.depth_t, p.pose_t_to_s, p.intrinsics, p.mask)[0]


def phase_losses(phase: int, components: PhaseLossInputs, lambda1: float = 0.1, lambda2: float = 0.5) -> float:
    """
    Fase 1: L_gt + λ1·L_norm
    Fase 2: L_dfn
    Fase 3: L_gt + λ1·L_norm + λ2·L_dfn
    """
    if phase not in (1, 2, 3):
        raise InvalidInputError(f"fase desconocida: {phase}")

    def gt_term():
        return loss_gt(components.pred_depths, components.pred_normals,
                       components.gt_depth, components.gt_normals)

    def dfn_term():
        return loss_dfn(components.integrated_depths, components.input_normals, components.intrinsics)

    def norm_term():
        # con λ1 = 0 el par no se usa
        return lambda1 * _norm_term(components, phase) if lambda1 != 0 else 0.0

    if phase == 1:
        return gt_term() + norm_term()
    if phase == 2:
        return dfn_term()
    value = gt_term() + norm_term()
    if lambda2 != 0:
        value += lambda2 * dfn_term()
    return value
