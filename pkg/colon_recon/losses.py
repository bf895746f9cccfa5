# losses.py - Pérdidas de consistencia auto-supervisadas y sus gradientes
"""
Pérdidas de inicialización:

- L_norm:  consistencia de normales entre vistas (L1 o angular).
- L_orth:  ortogonalidad entre normales y vectores tangentes de la profundidad.
- L_depth: consistencia de profundidad |S − z| / (S + z).
- L_photo: 0.85·(1 − SSIM)/2 + 0.15·L1, mínimo por píxel sobre fuentes.
- L_sm:    suavidad edge-aware sobre profundidad normalizada por la media.

Cada pérdida devuelve (escalar, mapa por píxel); el mapa vale NaN fuera del
soporte. Un soporte vacío lanza EmptySupportError.
"""
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptySupportError, InvalidInputError
from .geometry import (
    DepthMap, ImageRGB, Intrinsics, Mask, NormalMap, Pose,
    bilinear, sample_bilinear_map, warp_coordinates,
)
from .utils import _cv2_or_raise

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WEIGHT = 0.85
SPECULAR_THRESHOLD = 0.98


# ============================================================
# Tipos
# ============================================================

@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.05
    lambda3: float = 0.05
    lambda4: float = 1e-3

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise InvalidInputError(f"{name} debe ser >= 0, recibido {value}")

    @classmethod
    def from_config(cls, section: Dict) -> "LossWeights":
        return cls(*(float(section.get(k, d)) for k, d in (
            ("lambda1", 0.1), ("lambda2", 0.05), ("lambda3", 0.05), ("lambda4", 1e-3))))

    def without_norm(self) -> "LossWeights":
        """Ablación sin el término de normales."""
        return replace(self, lambda1=0.0)


@dataclass(frozen=True)
class LossReport:
    photo: float
    norm: float
    depth: float
    orth: float
    smooth: float
    total: float
    pixel_count: int
    weights: LossWeights = field(default_factory=LossWeights)

    def to_dict(self) -> Dict:
        return {"photo": self.photo, "norm": self.norm, "depth": self.depth, "orth": self.orth,
                "smooth": self.smooth, "total": self.total, "pixel_count": int(self.pixel_count)}


def _check_same_shape(*shapes):
    first = tuple(shapes[0])
    for s in shapes[1:]:
        if tuple(s) != first:
            raise InvalidInputError(f"dimensiones inconsistentes: {first} vs {tuple(s)}")


def _support_weights(support: np.ndarray, mask: Optional[Mask]) -> np.ndarray:
    w = support.astype(np.float64)
    if mask is not None:
        w = w * mask.weights
    return w


def _masked_mean(per_pixel: np.ndarray, weights: np.ndarray, name: str) -> float:
    total = weights.sum()
    if total <= 0:
        raise EmptySupportError(f"{name}: soporte vacío tras el enmascarado")
    return float(np.where(weights > 0, per_pixel, 0.0).ravel() @ weights.ravel() / total)


def _as_map(per_pixel: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.where(weights > 0, per_pixel, np.nan)


# ============================================================
# Consistencia de normales
# ============================================================

def _normal_residual(sampled: np.ndarray, target: np.ndarray, metric: str) -> np.ndarray:
    if metric == "l1":
        return np.abs(sampled - target).sum(axis=-1)
    if metric == "angular":
        cos = np.clip(np.einsum("hwc,hwc->hw", sampled, target), -1.0, 1.0)
        return np.arccos(cos)
    raise InvalidInputError(f"métrica de normales desconocida: {metric}")


def loss_normal_consistency(normals_s: NormalMap, normals_t: NormalMap, depth_t: DepthMap,
                            pose_t_to_s: Pose, intrinsics: Intrinsics, mask: Optional[Mask] = None,
                            metric: str = "l1") -> Tuple[float, np.ndarray]:
    """|N̂_s⟨p̂_s⟩ − R̂·N̂_t(p_t)| sumado sobre las 3 componentes, promedio enmascarado."""
    _check_same_shape(normals_s.shape, normals_t.shape, depth_t.shape, intrinsics.shape)
    u_s, v_s, _, valid = warp_coordinates(depth_t, pose_t_to_s, intrinsics)
    sampled, ok = sample_bilinear_map(normals_s, u_s, v_s)
    target = pose_t_to_s.rotate(normals_t.vectors)
    per_pixel = _normal_residual(sampled, target, metric)
    weights = _support_weights(valid & ok & normals_t.validity, mask)
    return _masked_mean(per_pixel, weights, "L_norm"), _as_map(per_pixel, weights)


# ============================================================
# Ortogonalidad
# ============================================================

def _orth_terms(normals: NormalMap, depth: DepthMap, intrinsics: Intrinsics):
    h, w = depth.shape
    if h < 3 or w < 3:
        raise InvalidInputError(f"L_orth requiere al menos 3x3 píxeles, recibido {h}x{w}")
    _check_same_shape(normals.shape, depth.shape, intrinsics.shape)
    rays = intrinsics.rays()
    X = depth.filled(0.0)[..., None] * rays
    c = (slice(1, -1), slice(1, -1))
    tl, br = (slice(None, -2), slice(None, -2)), (slice(2, None), slice(2, None))
    tr, bl = (slice(None, -2), slice(2, None)), (slice(2, None), slice(None, -2))
    n = normals.vectors[c]
    v1 = X[br] - X[tl]
    v2 = X[bl] - X[tr]
    dot1 = np.einsum("hwc,hwc->hw", n, v1)
    dot2 = np.einsum("hwc,hwc->hw", n, v2)
    dv = depth.validity
    support = normals.validity[c] & dv[c] & dv[tl] & dv[br] & dv[tr] & dv[bl]
    return dict(slices=(c, tl, br, tr, bl), rays=rays, n=n, dot1=dot1, dot2=dot2, support=support)


def loss_orthogonality(normals: NormalMap, depth: DepthMap, intrinsics: Intrinsics) -> Tuple[float, np.ndarray]:
    """Media de (|N̂·V̂₁| + |N̂·V̂₂|)/2 en píxeles interiores (pares TL/BR y TR/BL)."""
    t = _orth_terms(normals, depth, intrinsics)
    inner = 0.5 * (np.abs(t["dot1"]) + np.abs(t["dot2"]))
    weights = t["support"].astype(np.float64)
    value = _masked_mean(inner, weights, "L_orth")
    per_pixel = np.full(depth.shape, np.nan)
    per_pixel[t["slices"][0]] = _as_map(inner, weights)
    return value, per_pixel


def grad_orthogonality(normals: NormalMap, depth: DepthMap, intrinsics: Intrinsics) -> np.ndarray:
    """Gradiente analítico de L_orth respecto de cada profundidad."""
    t = _orth_terms(normals, depth, intrinsics)
    c, tl, br, tr, bl = t["slices"]
    rays, n = t["rays"], t["n"]
    weights = t["support"].astype(np.float64)
    count = weights.sum()
    if count <= 0:
        raise EmptySupportError("L_orth: soporte vacío")
    s1 = np.sign(t["dot1"]) * weights * (0.5 / count)
    s2 = np.sign(t["dot2"]) * weights * (0.5 / count)
    grad = np.zeros(depth.shape)
    grad[br] += s1 * np.einsum("hwc,hwc->hw", n, rays[br])
    grad[tl] -= s1 * np.einsum("hwc,hwc->hw", n, rays[tl])
    grad[bl] += s2 * np.einsum("hwc,hwc->hw", n, rays[bl])
    grad[tr] -= s2 * np.einsum("hwc,hwc->hw", n, rays[tr])
    return grad


# ============================================================
# Consistencia de profundidad
# ============================================================

def loss_depth_consistency(depth_s: DepthMap, depth_t: DepthMap, pose_t_to_s: Pose,
                           intrinsics: Intrinsics, mask: Optional[Mask] = None) -> Tuple[float, np.ndarray]:
    """|D̂_s⟨p̂_s⟩ − d̂ˢₜ| / (D̂_s⟨p̂_s⟩ + d̂ˢₜ); valores por píxel en [0, 1)."""
    _check_same_shape(depth_s.shape, depth_t.shape, intrinsics.shape)
    u_s, v_s, z_s, valid = warp_coordinates(depth_t, pose_t_to_s, intrinsics)
    sampled, ok = sample_bilinear_map(depth_s, u_s, v_s)
    support = valid & ok
    S = np.where(support, sampled, 1.0)
    z = np.where(support, z_s, 1.0)
    per_pixel = np.abs(S - z) / (S + z)
    weights = _support_weights(support, mask)
    return _masked_mean(per_pixel, weights, "L_depth"), _as_map(per_pixel, weights)


def _warp_derivatives(depth_t: DepthMap, pose_t_to_s: Pose, intrinsics: Intrinsics):
    """Coordenadas reproyectadas y sus derivadas respecto de d_t por píxel."""
    u_s, v_s, z_s, valid = warp_coordinates(depth_t, pose_t_to_s, intrinsics)
    rays = intrinsics.rays()
    w = pose_t_to_s.rotate(rays)
    Y = depth_t.filled(1.0)[..., None] * w + pose_t_to_s.translation
    zz = np.where(valid, Y[..., 2], 1.0)
    du = intrinsics.fx * (w[..., 0] * zz - Y[..., 0] * w[..., 2]) / zz ** 2
    dv = intrinsics.fy * (w[..., 1] * zz - Y[..., 1] * w[..., 2]) / zz ** 2
    return u_s, v_s, z_s, valid, du, dv, w[..., 2]


def grad_depth_consistency(depth_s: DepthMap, depth_t: DepthMap, pose_t_to_s: Pose,
                           intrinsics: Intrinsics, mask: Optional[Mask] = None) -> np.ndarray:
    """Gradiente analítico de L_depth respecto de la profundidad del frame t (diagonal por píxel)."""
    u_s, v_s, z_s, valid, du, dv, dz = _warp_derivatives(depth_t, pose_t_to_s, intrinsics)
    S, ok, gu, gv = bilinear(depth_s.values, depth_s.validity, u_s, v_s, with_grad=True)
    support = valid & ok
    weights = _support_weights(support, mask)
    total = weights.sum()
    if total <= 0:
        raise EmptySupportError("L_depth: soporte vacío")
    S = np.where(support, S, 1.0)
    z = np.where(support, z_s, 1.0)
    sgn = np.sign(S - z)
    de_dS = sgn * 2.0 * z / (S + z) ** 2
    de_dz = -sgn * 2.0 * S / (S + z) ** 2
    de_dd = de_dS * (gu * du + gv * dv) + de_dz * dz
    return np.where(weights > 0, de_dd * weights / total, 0.0)


def grad_normal_consistency(normals_s: NormalMap, normals_t: NormalMap, depth_t: DepthMap,
                            pose_t_to_s: Pose, intrinsics: Intrinsics, mask: Optional[Mask] = None,
                            metric: str = "l1") -> np.ndarray:
    """Gradiente analítico de L_norm respecto de la profundidad del frame t."""
    u_s, v_s, _, valid, du, dv, _ = _warp_derivatives(depth_t, pose_t_to_s, intrinsics)
    m, ok, gu, gv = bilinear(normals_s.vectors, normals_s.validity, u_s, v_s, with_grad=True)
    norm = np.linalg.norm(m, axis=-1)
    ok &= norm > 1e-12
    support = valid & ok & normals_t.validity
    weights = _support_weights(support, mask)
    total = weights.sum()
    if total <= 0:
        raise EmptySupportError("L_norm: soporte vacío")
    safe = np.where(support, norm, 1.0)[..., None]
    nhat = m / safe
    dm = gu * du[..., None] + gv * dv[..., None]
    # Jacobiano de la renormalización: (I − n̂n̂ᵀ)/|m|
    dn = (dm - nhat * np.einsum("hwc,hwc->hw", nhat, dm)[..., None]) / safe
    target = pose_t_to_s.rotate(normals_t.vectors)
    if metric == "l1":
        de_dd = np.einsum("hwc,hwc->hw", np.sign(nhat - target), dn)
    elif metric == "angular":
        cos = np.clip(np.einsum("hwc,hwc->hw", nhat, target), -1.0 + 1e-12, 1.0 - 1e-12)
        de_dd = -np.einsum("hwc,hwc->hw", target, dn) / np.sqrt(1.0 - cos ** 2)
    else:
        raise InvalidInputError(f"métrica de normales desconocida: {metric}")
    return np.where(weights > 0, de_dd * weights / total, 0.0)


# ============================================================
# Fotométrica y suavidad
# ============================================================

def dssim(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(1 − SSIM)/2 por píxel y canal, ventana 3x3 con borde reflejado."""
    cv2 = _cv2_or_raise()

    def pool(a):
        return cv2.boxFilter(a, -1, (3, 3), normalize=True, borderType=cv2.BORDER_REFLECT_101)

    mu_x = pool(x)
    mu_y = pool(y)
    sigma_x = pool(x * x) - mu_x ** 2
    sigma_y = pool(y * y) - mu_y ** 2
    sigma_xy = pool(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return np.clip((1.0 - num / den) / 2.0, 0.0, 1.0)


def photometric_error(target: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Error de reproyección por píxel entre dos imágenes H×W×3."""
    l1 = np.abs(target - source).mean(axis=-1)
    return SSIM_WEIGHT * dssim(target, source).mean(axis=-1) + (1.0 - SSIM_WEIGHT) * l1


def _min_error(image_t: ImageRGB, sources: Sequence[ImageRGB]) -> np.ndarray:
    if not sources:
        raise InvalidInputError("se requiere al menos una fuente reproyectada")
    errors = []
    for src in sources:
        _check_same_shape(image_t.shape, src.shape)
        errors.append(photometric_error(image_t.channels, src.channels))
    return np.min(np.stack(errors), axis=0)


def loss_photometric(image_t: ImageRGB, warped_sources: Sequence[ImageRGB],
                     mask: Optional[Mask] = None) -> Tuple[float, np.ndarray]:
    per_pixel = _min_error(image_t, warped_sources)
    weights = _support_weights(np.ones(image_t.shape, dtype=bool), mask)
    return _masked_mean(per_pixel, weights, "L_photo"), _as_map(per_pixel, weights)


def loss_smoothness(depth: DepthMap, image: ImageRGB) -> float:
    """mean(|∂x d*|·e^(−|∂x I|)) + mean(|∂y d*|·e^(−|∂y I|)), d* = d / mean(d)."""
    _check_same_shape(depth.shape, image.shape)
    valid = depth.validity
    if not valid.any():
        raise EmptySupportError("L_sm: profundidad sin píxeles válidos")
    d = depth.filled(0.0) / depth.values[valid].mean()
    img = image.channels

    gx_ok = valid[:, 1:] & valid[:, :-1]
    gy_ok = valid[1:, :] & valid[:-1, :]
    gx = np.abs(d[:, 1:] - d[:, :-1]) * np.exp(-np.abs(img[:, 1:] - img[:, :-1]).mean(axis=-1))
    gy = np.abs(d[1:, :] - d[:-1, :]) * np.exp(-np.abs(img[1:, :] - img[:-1, :]).mean(axis=-1))
    sx = float(gx[gx_ok].mean()) if gx_ok.any() else 0.0
    sy = float(gy[gy_ok].mean()) if gy_ok.any() else 0.0
    return sx + sy


# ============================================================
# Máscaras y warping de imagen
# ============================================================

def warp_image(image_s: ImageRGB, depth_t: DepthMap, pose_t_to_s: Pose,
               intrinsics: Intrinsics) -> Tuple[ImageRGB, np.ndarray]:
    """Reconstruye la vista t muestreando la fuente s; fuera de la proyección queda en 0."""
    u_s, v_s, _, valid = warp_coordinates(depth_t, pose_t_to_s, intrinsics)
    sampled, ok = sample_bilinear_map(image_s, u_s, v_s)
    valid = valid & ok
    out = np.where(valid[..., None], np.clip(sampled, 0.0, 1.0), 0.0)
    return ImageRGB(out), valid


def specular_mask(image: ImageRGB, threshold: float = SPECULAR_THRESHOLD) -> Mask:
    return Mask.from_bool(image.luminance() <= threshold)


def compute_masks(image_t: ImageRGB, images_s: Sequence[ImageRGB], warped_sources: Sequence[ImageRGB],
                  projection_validity: Mask, specular_threshold: float = SPECULAR_THRESHOLD) -> Mask:
    """Auto-máscara ∧ validez de proyección ∧ exclusión especular."""
    warped_err = _min_error(image_t, warped_sources)
    identity_err = _min_error(image_t, images_s)
    auto = warped_err < identity_err
    spec = specular_mask(image_t, specular_threshold).weights > 0
    return Mask(projection_validity.weights * (auto & spec))


# ============================================================
# Pérdida total
# ============================================================

@dataclass(frozen=True, eq=False)
class SourceView:
    image: ImageRGB
    depth: DepthMap
    normals: NormalMap
    pose_t_to_s: Pose


@dataclass(frozen=True, eq=False)
class LossInputs:
    image_t: ImageRGB
    depth_t: DepthMap
    normals_t: NormalMap
    sources: List[SourceView]
    intrinsics: Intrinsics
    mask: Optional[Mask] = None
    specular_threshold: float = SPECULAR_THRESHOLD
    norm_metric: str = "l1"


def build_mask(inputs: LossInputs) -> Mask:
    """Máscara M de la vista objetivo contra todas las fuentes."""
    warped, valid_any = [], np.zeros(inputs.depth_t.shape, dtype=bool)
    for src in inputs.sources:
        img, valid = warp_image(src.image, inputs.depth_t, src.pose_t_to_s, inputs.intrinsics)
        warped.append(img)
        valid_any |= valid
    return compute_masks(inputs.image_t, [s.image for s in inputs.sources], warped,
                         Mask.from_bool(valid_any), inputs.specular_threshold)


def loss_init_total(inputs: LossInputs, weights: LossWeights = LossWeights(),
                    return_maps: bool = False):
    """
    L_photo + λ1·L_norm + λ2·L_depth bajo la máscara M, más λ3·L_orth + λ4·L_sm sin máscara.

    Con varias fuentes, L_norm y L_depth se promedian sobre las fuentes.
    """
    if not inputs.sources:
        raise InvalidInputError("se requiere al menos una vista fuente")
    mask = inputs.mask if inputs.mask is not None else build_mask(inputs)
    warped = [warp_image(s.image, inputs.depth_t, s.pose_t_to_s, inputs.intrinsics)[0] for s in inputs.sources]

    photo, photo_map = loss_photometric(inputs.image_t, warped, mask)
    norms, depths, norm_maps, depth_maps = [], [], [], []
    for src in inputs.sources:
        value, per_pixel = loss_normal_consistency(src.normals, inputs.normals_t, inputs.depth_t,
                                                   src.pose_t_to_s, inputs.intrinsics, mask,
                                                   inputs.norm_metric)
        norms.append(value)
        norm_maps.append(per_pixel)
        value, per_pixel = loss_depth_consistency(src.depth, inputs.depth_t, src.pose_t_to_s,
                                                  inputs.intrinsics, mask)
        depths.append(value)
        depth_maps.append(per_pixel)
    norm = float(np.mean(norms))
    depth = float(np.mean(depths))
    orth, orth_map = loss_orthogonality(inputs.normals_t, inputs.depth_t, inputs.intrinsics)
    smooth = loss_smoothness(inputs.depth_t, inputs.image_t)

    total = photo + weights.lambda1 * norm + weights.lambda2 * depth + weights.lambda3 * orth + weights.lambda4 * smooth
    report = LossReport(photo=photo, norm=norm, depth=depth, orth=orth, smooth=smooth, total=float(total),
                        pixel_count=int(np.count_nonzero(mask.weights > 0)), weights=weights)
    if not return_maps:
        return report
    maps = {"photo": photo_map, "norm": norm_maps[0], "depth": depth_maps[0], "orth": orth_map,
            "mask": mask.weights}
    return report, maps


# ============================================================
# Oráculo de diferencias finitas
# ============================================================

def numeric_gradient(loss_fn: Callable[[DepthMap], float], depth: DepthMap, step: float = 1e-4) -> np.ndarray:
    """Diferencias centrales de loss_fn respecto de cada profundidad válida."""
    if not step > 0:
        raise InvalidInputError(f"step debe ser > 0, recibido {step}")
    values = np.array(depth.values, dtype=np.float64)
    grad = np.zeros(depth.shape)
    for v, u in zip(*np.nonzero(depth.validity)):
        base = values[v, u]
        values[v, u] = base + step
        plus = loss_fn(DepthMap(values, depth.validity))
        values[v, u] = base - step
        minus = loss_fn(DepthMap(values, depth.validity))
        values[v, u] = base
        grad[v, u] = (plus - minus) / (2.0 * step)
    return grad
