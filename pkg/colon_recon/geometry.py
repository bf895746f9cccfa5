# geometry.py - Cámara pinhole, transformaciones rígidas y campos por píxel
"""
Núcleo geométrico del toolkit.

Convenciones:
- Píxel (u, v): u = columna, v = fila. Imagen H×W.
- Coordenadas de cámara: x a la derecha, y hacia abajo, z hacia adelante.
- Normales apuntando hacia la cámara (componente z <= 0).
- Pose de trayectoria = world-from-camera; pose relativa t→s mapea puntos
  del frame t al frame s.
"""
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError

ORTHO_TOL = 1e-9
UNIT_TOL = 1e-6


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


# ============================================================
# Intrínsecos
# ============================================================

@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focales no positivas: fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError(f"tamaño de imagen inválido: {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError(f"punto principal ({self.cx}, {self.cy}) fuera de la imagen")

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.height), int(self.width))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Intrínsecos para la misma cámara remuestreada a width×height (centros de píxel alineados)."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(
            fx=self.fx * sx, fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5, cy=(self.cy + 0.5) * sy - 0.5,
            width=int(width), height=int(height),
        )

    def pixel_grid(self) -> Tuple[np.ndarray, np.ndarray]:
        """Coordenadas (u, v) de cada píxel, arrays H×W."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return u, v

    def rays(self) -> np.ndarray:
        """K⁻¹·p por píxel (H×W×3) con componente z = 1."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> Dict[str, Any]:
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx),
                "cy": float(self.cy), "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Intrinsics":
        try:
            return cls(fx=float(data["fx"]), fy=float(data["fy"]), cx=float(data["cx"]),
                       cy=float(data["cy"]), width=int(data["width"]), height=int(data["height"]))
        except KeyError as e:
            raise InvalidInputError(f"intrínsecos incompletos, falta {e}")


# ============================================================
# Pose rígida
# ============================================================

@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidInputError("pose: se esperaba rotación 3x3 y traslación de 3 componentes")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise InvalidInputError("pose con valores no finitos")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise InvalidInputError("rotación no ortonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidInputError("rotación con determinante distinto de +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "Pose":
        q = np.asarray(quat_xyzw, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise InvalidInputError(f"quaternion no unitario: {q}")
        return cls(Rotation.from_quat(q).as_matrix(), translation)

    def quaternion(self) -> np.ndarray:
        """Quaternion unitario (x, y, z, w) con w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: aplica other y luego self."""
        R = self.rotation @ other.rotation
        # re-ortonormalizar para que la cadena no acumule error
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return Pose(R, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transforma puntos (...×3)."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    @property
    def center(self) -> np.ndarray:
        """Centro de cámara si la pose es world-from-camera."""
        return np.array(self.translation)


def compose(a: Pose, b: Pose) -> Pose:
    """Aplica b y luego a."""
    return a.compose(b)


def invert(a: Pose) -> Pose:
    return a.inverse()


def relative_pose(world_from_t: Pose, world_from_s: Pose) -> Pose:
    """Pose t→s a partir de dos poses world-from-camera."""
    return world_from_s.inverse().compose(world_from_t)


# ============================================================
# Campos por píxel
# ============================================================

def _check_shape2(arr: np.ndarray, name: str):
    if arr.ndim != 2:
        raise InvalidInputError(f"{name}: se esperaba un array H×W, recibido {arr.shape}")


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        validity = np.asarray(self.validity, dtype=bool)
        _check_shape2(values, "DepthMap")
        if validity.shape != values.shape:
            raise InvalidInputError("DepthMap: validez con forma distinta a los valores")
        good = values[validity]
        if good.size and (not np.all(np.isfinite(good)) or np.any(good <= 0)):
            raise InvalidInputError("DepthMap: profundidad válida no positiva o no finita")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "validity", _frozen(validity))

    @classmethod
    def from_array(cls, values, validity=None) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        if validity is None:
            with np.errstate(invalid="ignore"):
                validity = np.isfinite(values) & (values > 0)
        return cls(values, validity)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.validity, self.values, fill)

    def scaled(self, s: float) -> "DepthMap":
        return DepthMap(np.where(self.validity, self.values * s, self.values), self.validity)


@dataclass(frozen=True, eq=False)
class NormalMap:
    vectors: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 3 or vec.shape[2] != 3:
            raise InvalidInputError(f"NormalMap: se esperaba H×W×3, recibido {vec.shape}")
        validity = np.asarray(self.validity, dtype=bool)
        if validity.shape != vec.shape[:2]:
            raise InvalidInputError("NormalMap: validez con forma distinta a los vectores")
        good = vec[validity]
        if good.size and np.max(np.abs(np.linalg.norm(good, axis=-1) - 1.0)) > UNIT_TOL:
            raise InvalidInputError("NormalMap: vectores válidos no unitarios")
        object.__setattr__(self, "vectors", _frozen(vec))
        object.__setattr__(self, "validity", _frozen(validity))

    @classmethod
    def from_array(cls, vectors, validity=None) -> "NormalMap":
        """Normaliza los vectores; los de norma nula o no finitos quedan inválidos."""
        vec = np.asarray(vectors, dtype=np.float64)
        norm = np.linalg.norm(vec, axis=-1)
        ok = np.isfinite(norm) & (norm > 1e-12)
        if validity is not None:
            ok &= np.asarray(validity, dtype=bool)
        unit = np.where(ok[..., None], vec / np.where(ok, norm, 1.0)[..., None], 0.0)
        return cls(unit, ok)

    @classmethod
    def constant(cls, vector, shape: Tuple[int, int]) -> "NormalMap":
        vec = np.broadcast_to(np.asarray(vector, dtype=np.float64), (shape[0], shape[1], 3))
        return cls.from_array(vec)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.vectors.shape[:2]


@dataclass(frozen=True, eq=False)
class ImageRGB:
    channels: np.ndarray

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[2] != 3:
            raise InvalidInputError(f"ImageRGB: se esperaba H×W×3, recibido {ch.shape}")
        if not np.all(np.isfinite(ch)) or ch.min(initial=0.0) < 0.0 or ch.max(initial=0.0) > 1.0:
            raise InvalidInputError("ImageRGB: intensidades fuera de [0, 1]")
        object.__setattr__(self, "channels", _frozen(ch))

    @classmethod
    def from_gray(cls, gray) -> "ImageRGB":
        g = np.asarray(gray, dtype=np.float64)
        return cls(np.repeat(g[..., None], 3, axis=-1))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.channels.shape[:2]

    def luminance(self) -> np.ndarray:
        return self.channels @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class Mask:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        _check_shape2(w, "Mask")
        if not np.all(np.isfinite(w)) or w.min(initial=0.0) < 0.0 or w.max(initial=0.0) > 1.0:
            raise InvalidInputError("Mask: pesos fuera de [0, 1]")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def ones(cls, shape: Tuple[int, int]) -> "Mask":
        return cls(np.ones(shape))

    @classmethod
    def from_bool(cls, flags) -> "Mask":
        return cls(np.asarray(flags, dtype=np.float64))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weights.shape

    def __and__(self, other: "Mask") -> "Mask":
        return Mask(self.weights * other.weights)


Field = Union[DepthMap, NormalMap, ImageRGB]


def field_arrays(field: Field) -> Tuple[np.ndarray, np.ndarray]:
    """(valores, validez) de cualquier campo; ImageRGB es válida en todos los píxeles."""
    if isinstance(field, DepthMap):
        return field.values, field.validity
    if isinstance(field, NormalMap):
        return field.vectors, field.validity
    if isinstance(field, ImageRGB):
        return field.channels, np.ones(field.shape, dtype=bool)
    raise InvalidInputError(f"campo no soportado: {type(field).__name__}")


# ============================================================
# Proyección y warping
# ============================================================

def backproject(intrinsics: Intrinsics, pixel, depth: float) -> np.ndarray:
    """Punto 3D en coordenadas de cámara: X = d·K⁻¹·p."""
    if not (np.isfinite(depth) and depth > 0):
        raise InvalidInputError(f"profundidad no positiva: {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u <= intrinsics.width - 1 and 0 <= v <= intrinsics.height - 1):
        raise InvalidInputError(f"píxel ({u}, {v}) fuera de la imagen")
    return depth * np.array([(u - intrinsics.cx) / intrinsics.fx,
                             (v - intrinsics.cy) / intrinsics.fy,
                             1.0])


def backproject_map(depth: Union[DepthMap, np.ndarray], intrinsics: Intrinsics) -> np.ndarray:
    """Nube H×W×3; en píxeles inválidos el valor no está definido."""
    values = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    return values[..., None] * intrinsics.rays()


def project_points(points: np.ndarray, intrinsics: Intrinsics) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Proyección perspectiva: (u, v, z) con z la tercera coordenada homogénea."""
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * points[..., 0] / z + intrinsics.cx
        v = intrinsics.fy * points[..., 1] / z + intrinsics.cy
    return u, v, z


def in_image(u: np.ndarray, v: np.ndarray, width: int, height: int) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)


def warp_coordinates(depth_t: DepthMap, pose_t_to_s: Pose, intrinsics: Intrinsics):
    """
    Versión vectorizada de project_warp sobre todo el mapa.

    Returns:
        (u_s, v_s, projected_depth, valid) como arrays H×W.
    """
    points = backproject_map(depth_t.filled(1.0), intrinsics)
    points_s = pose_t_to_s.apply(points)
    u_s, v_s, z_s = project_points(points_s, intrinsics)
    valid = depth_t.validity & (z_s > 0) & in_image(u_s, v_s, intrinsics.width, intrinsics.height)
    return u_s, v_s, z_s, valid


def project_warp(intrinsics: Intrinsics, pose_t_to_s: Pose, depth_t: DepthMap, pixel_t):
    """
    K·T·D(p)·K⁻¹·p para un píxel entero del frame t.

    Returns:
        (pixel_s, projected_depth, in_bounds). Profundidad inválida en p_t
        produce in_bounds = False.
    """
    u, v = int(round(pixel_t[0])), int(round(pixel_t[1]))
    h, w = depth_t.shape
    if not (0 <= u < w and 0 <= v < h) or not depth_t.validity[v, u]:
        return np.array([np.nan, np.nan]), float("nan"), False
    X = depth_t.values[v, u] * np.array([(u - intrinsics.cx) / intrinsics.fx,
                                         (v - intrinsics.cy) / intrinsics.fy, 1.0])
    Y = pose_t_to_s.apply(X)
    us, vs, z = project_points(Y, intrinsics)
    ok = bool(z > 0 and in_image(np.array(us), np.array(vs), intrinsics.width, intrinsics.height))
    return np.array([float(us), float(vs)]), float(z), ok


# ============================================================
# Muestreo bilineal
# ============================================================

def bilinear(values: np.ndarray, validity: np.ndarray, u: np.ndarray, v: np.ndarray,
             with_grad: bool = False):
    """
    Interpolación bilineal vectorizada.

    values es H×W o H×W×C. Una esquina inválida sólo invalida la muestra si
    su peso es > 0. Con with_grad devuelve también ∂/∂u y ∂/∂v.
    """
    h, w = validity.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inb = in_image(u, v, w, h)
    uc = np.where(inb, u, 0.0)
    vc = np.where(inb, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du = uc - u0
    dv = vc - v0

    w00 = (1 - du) * (1 - dv)
    w01 = du * (1 - dv)
    w10 = (1 - du) * dv
    w11 = du * dv

    ok = inb.copy()
    for wt, vv, uu in ((w00, v0, u0), (w01, v0, u1), (w10, v1, u0), (w11, v1, u1)):
        ok &= (wt <= 0) | validity[vv, uu]

    vals = np.where(validity[..., None] if values.ndim == 3 else validity, values, 0.0)
    a = vals[v0, u0]
    b = vals[v0, u1]
    c = vals[v1, u0]
    d = vals[v1, u1]
    if values.ndim == 3:
        du_, dv_ = du[..., None], dv[..., None]
        W00, W01, W10, W11 = (x[..., None] for x in (w00, w01, w10, w11))
    else:
        du_, dv_ = du, dv
        W00, W01, W10, W11 = w00, w01, w10, w11
    out = W00 * a + W01 * b + W10 * c + W11 * d
    if not with_grad:
        return out, ok
    gu = (1 - dv_) * (b - a) + dv_ * (d - c)
    gv = (1 - du_) * (c - a) + du_ * (d - b)
    return out, ok, gu, gv


def sample_bilinear_map(field: Field, u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Muestrea un campo en coordenadas continuas; las normales se renormalizan."""
    values, validity = field_arrays(field)
    out, ok = bilinear(values, validity, u, v)
    if isinstance(field, NormalMap):
        norm = np.linalg.norm(out, axis=-1)
        ok &= norm > 1e-12
        out = np.where(ok[..., None], out / np.where(ok, norm, 1.0)[..., None], 0.0)
    return out, ok


def sample_bilinear(field: Field, coord) -> Tuple[Any, bool]:
    """Operador ⟨·⟩ en una coordenada (u, v); fuera de [0,W−1]×[0,H−1] es inválido."""
    out, ok = sample_bilinear_map(field, np.array([float(coord[0])]), np.array([float(coord[1])]))
    value = out[0]
    if isinstance(field, DepthMap):
        value = float(value)
    return value, bool(ok[0])


def resize_depth(depth: DepthMap, width: int, height: int) -> DepthMap:
    """Submuestreo por promedio de área ponderado por validez (sobremuestreo bilineal)."""
    from .utils import _cv2_or_raise
    cv2 = _cv2_or_raise()
    if (height, width) == depth.shape:
        return depth
    interp = cv2.INTER_AREA if width < depth.shape[1] else cv2.INTER_LINEAR
    wgt = depth.validity.astype(np.float64)
    num = cv2.resize(depth.filled(0.0) * wgt, (width, height), interpolation=interp)
    den = cv2.resize(wgt, (width, height), interpolation=interp)
    ok = den > 0.5
    out = np.where(ok, num / np.where(ok, den, 1.0), np.nan)
    return DepthMap.from_array(out, ok & np.isfinite(out) & (out > 0))


def resize_normals(normals: NormalMap, width: int, height: int) -> NormalMap:
    """Remuestreo bilineal + renormalización."""
    from .utils import _cv2_or_raise
    cv2 = _cv2_or_raise()
    if (height, width) == normals.shape:
        return normals
    wgt = normals.validity.astype(np.float64)
    vec = cv2.resize(normals.vectors * wgt[..., None], (width, height), interpolation=cv2.INTER_LINEAR)
    den = cv2.resize(wgt, (width, height), interpolation=cv2.INTER_LINEAR)
    return NormalMap.from_array(vec, den > 0.5)
