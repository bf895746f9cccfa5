# illumination.py - Modelo de luz puntual co-ubicada con la cámara
"""
Campo de luz por píxel y atenuación del endoscopio.

La fuente está en el centro óptico O = (0,0,0) apuntando a +z. Para el punto
de superficie X(p) = D(p)·K⁻¹·p:

    F(p) = (O − X) / ‖O − X‖ = −X / ‖X‖
    A(p) = (−F·ẑ)^μ / ‖X‖²
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import InvalidInputError, SingularityError
from .geometry import DepthMap, ImageRGB, Intrinsics, NormalMap, _frozen

LIGHT_ORIGIN = (0.0, 0.0, 0.0)
LIGHT_AXIS = (0.0, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class LightField:
    directions: np.ndarray
    attenuation: np.ndarray
    mu: float
    validity: np.ndarray
    origin: tuple = LIGHT_ORIGIN
    axis: tuple = LIGHT_AXIS

    def __post_init__(self):
        for name in ("directions", "attenuation", "validity"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def shape(self):
        return self.attenuation.shape


def light_field(depth: Union[DepthMap, np.ndarray], intrinsics: Intrinsics, mu: float) -> LightField:
    """F̂ y Â por píxel a partir de la profundidad."""
    if not (np.isfinite(mu) and mu >= 0):
        raise InvalidInputError(f"mu debe ser >= 0, recibido {mu}")
    if isinstance(depth, DepthMap):
        values, valid = depth.values, depth.validity
    else:
        values = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(values)
        if np.any(values[valid] <= 0):
            v, u = np.argwhere(valid & (values <= 0))[0]
            raise SingularityError(f"profundidad no positiva en el píxel ({u}, {v})")
    if values.shape != intrinsics.shape:
        raise InvalidInputError(f"profundidad {values.shape} no coincide con la cámara {intrinsics.shape}")

    X = np.where(valid, values, 1.0)[..., None] * intrinsics.rays()
    dist = np.linalg.norm(X, axis=-1)
    F = -X / dist[..., None]
    cos_axis = X[..., 2] / dist
    A = np.power(cos_axis, mu) / dist ** 2
    F = np.where(valid[..., None], F, 0.0)
    A = np.where(valid, A, 0.0)
    return LightField(F, A, float(mu), valid)


def shading_factor(normals: np.ndarray, field: LightField) -> np.ndarray:
    """Â·max(0, N̂·F̂) por píxel (sin albedo ni recorte)."""
    cos = np.einsum("hwc,hwc->hw", normals, field.directions)
    return field.attenuation * np.maximum(cos, 0.0)


def shade_lambertian(normals: NormalMap, field: LightField, albedo=1.0) -> ImageRGB:
    """I = clamp(ρ·Â·max(0, N̂·F̂), 0, 1); ρ escalar, H×W (gris) o H×W×3."""
    if normals.shape != field.shape:
        raise InvalidInputError("normales y campo de luz con dimensiones distintas")
    rho = np.asarray(albedo, dtype=np.float64)
    if np.any(rho < 0):
        raise InvalidInputError("albedo negativo")
    valid = normals.validity & field.validity
    base = np.where(valid, shading_factor(normals.vectors, field), 0.0)
    if rho.ndim == 3:
        out = rho * base[..., None]
    else:
        out = (rho * base)[..., None] * np.ones(3)
    return ImageRGB(np.clip(out, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class RefinementInput:
    """Entrada del refinador: RGB + F̂ + Â como canales; las normales viajan aparte."""

    image: ImageRGB
    field: LightField
    normals: Optional[NormalMap] = None

    def as_channels(self) -> np.ndarray:
        return np.concatenate([
            self.image.channels,
            self.field.directions,
            self.field.attenuation[..., None],
        ], axis=-1)


def assemble_refinement_input(image: ImageRGB, field: LightField, normals: Optional[NormalMap] = None) -> RefinementInput:
    if image.shape != field.shape:
        raise InvalidInputError("imagen y campo de luz con dimensiones distintas")
    return RefinementInput(image, field, normals)
