# phantom.py - Fantoma sintético de colon y renderizado por sphere tracing
"""
Tubo alrededor de una línea central (recta o arco) parametrizada por
longitud de arco u, con radio

    r(u) = R0 · (1 + a_f · cos(2πu / λ_f))

La SDF usa la cota de Lipschitz de r(u) para que el sphere tracing nunca
atraviese la pared. Poses de cámara: world-from-camera, z hacia adelante.
"""
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError
from .geometry import DepthMap, ImageRGB, Intrinsics, NormalMap, Pose
from .illumination import light_field, shade_lambertian

VIEWS = ("down-the-barrel", "en-face")


# ============================================================
# Fantoma
# ============================================================

@dataclass(frozen=True)
class Phantom:
    radius: float = 1.0
    fold_amplitude: float = 0.15
    fold_wavelength: float = 1.5
    length: float = 8.0
    centerline: str = "straight"
    arc_radius: float = 0.0
    albedo: float = 0.06

    # ---------------- línea central ----------------

    @property
    def curvature(self) -> float:
        return 1.0 / self.arc_radius if self.centerline == "arc" else 0.0

    def center(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if self.centerline == "straight":
            return np.stack([np.zeros_like(u), np.zeros_like(u), u], axis=-1)
        phi = u / self.arc_radius
        rc = self.arc_radius
        return np.stack([rc * (1 - np.cos(phi)), np.zeros_like(u), rc * np.sin(phi)], axis=-1)

    def frame(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(tangente, e1, e2) de la línea central; e1 apunta al centro de curvatura."""
        u = np.asarray(u, dtype=np.float64)
        zero, one = np.zeros_like(u), np.ones_like(u)
        if self.centerline == "straight":
            t = np.stack([zero, zero, one], axis=-1)
            e1 = np.stack([one, zero, zero], axis=-1)
        else:
            phi = u / self.arc_radius
            t = np.stack([np.sin(phi), zero, np.cos(phi)], axis=-1)
            e1 = np.stack([np.cos(phi), zero, -np.sin(phi)], axis=-1)
        e2 = np.stack([zero, one, zero], axis=-1)
        return t, e1, e2

    # ---------------- superficie ----------------

    def r(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        return self.radius * (1.0 + self.fold_amplitude * np.cos(2 * np.pi * u / self.fold_wavelength))

    def dr_du(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        k = 2 * np.pi / self.fold_wavelength
        return -self.radius * self.fold_amplitude * k * np.sin(k * u)

    def surface_point(self, u, theta) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        _, e1, e2 = self.frame(u)
        radial = np.cos(theta)[..., None] * e1 + np.sin(theta)[..., None] * e2
        return self.center(u) + self.r(u)[..., None] * radial

    def surface_normal(self, u, theta) -> np.ndarray:
        """Normal exterior analítica en el punto (u, θ)."""
        u = np.asarray(u, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        t, e1, e2 = self.frame(u)
        radial = np.cos(theta)[..., None] * e1 + np.sin(theta)[..., None] * e2
        metric = 1.0 - self.curvature * self.r(u) * np.cos(theta)
        grad = radial - (self.dr_du(u) / metric)[..., None] * t
        return grad / np.linalg.norm(grad, axis=-1, keepdims=True)

    def area_element(self, u, theta) -> np.ndarray:
        """‖∂X/∂u × ∂X/∂θ‖ = r·√((1 − κ·r·cos θ)² + r'²)."""
        u = np.asarray(u, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        r = self.r(u)
        metric = 1.0 - self.curvature * r * np.cos(theta)
        return r * np.sqrt(metric ** 2 + self.dr_du(u) ** 2)

    @property
    def lipschitz(self) -> float:
        slope = self.radius * self.fold_amplitude * 2 * np.pi / self.fold_wavelength
        if self.centerline == "arc":
            slope /= 1.0 - self.curvature * self.radius * (1.0 + self.fold_amplitude)
        return float(np.sqrt(1.0 + slope ** 2))

    def tube_coordinates(self, points: np.ndarray):
        """(u, ρ, θ) de puntos arbitrarios respecto de la línea central."""
        p = np.asarray(points, dtype=np.float64)
        if self.centerline == "straight":
            u = p[..., 2]
        else:
            rc = self.arc_radius
            u = rc * np.arctan2(p[..., 2], rc - p[..., 0])
        offset = p - self.center(u)
        rho = np.linalg.norm(offset, axis=-1)
        t, e1, e2 = self.frame(u)
        theta = np.arctan2(np.einsum("...c,...c->...", offset, e2), np.einsum("...c,...c->...", offset, e1))
        return u, rho, theta

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Distancia con signo conservadora: negativa dentro del lumen."""
        u, rho, _ = self.tube_coordinates(points)
        return (rho - self.r(u)) / self.lipschitz

    def normal_at(self, points: np.ndarray) -> np.ndarray:
        u, _, theta = self.tube_coordinates(points)
        return self.surface_normal(u, theta)

    def to_dict(self) -> Dict:
        return asdict(self)


def make_phantom(params: Optional[Dict] = None, **kwargs) -> Phantom:
    """Crea un fantoma validando los parámetros."""
    values = dict(params or {})
    values.update(kwargs)
    known = {k: values[k] for k in Phantom.__dataclass_fields__ if k in values}
    ph = Phantom(**known)
    if not ph.radius > 0:
        raise InvalidInputError(f"radio no positivo: {ph.radius}")
    if not (0 <= ph.fold_amplitude < 1):
        raise InvalidInputError(f"fold_amplitude debe estar en [0, 1): {ph.fold_amplitude}")
    if not ph.fold_wavelength > 0:
        raise InvalidInputError(f"fold_wavelength debe ser > 0: {ph.fold_wavelength}")
    if not ph.length > 0:
        raise InvalidInputError(f"length debe ser > 0: {ph.length}")
    if ph.centerline not in ("straight", "arc"):
        raise InvalidInputError(f"línea central desconocida: {ph.centerline}")
    if ph.centerline == "arc" and not ph.arc_radius > ph.radius * (1 + ph.fold_amplitude):
        raise InvalidInputError("arc_radius debe superar el radio máximo del tubo")
    if ph.albedo < 0:
        raise InvalidInputError("albedo negativo")
    return ph


# ============================================================
# Trayectorias
# ============================================================

@dataclass
class Trajectory:
    frames: List[Tuple[str, Pose]]
    view: str
    seed: int = 0

    def __len__(self):
        return len(self.frames)

    def poses(self) -> List[Pose]:
        return [p for _, p in self.frames]

    def centers(self) -> np.ndarray:
        return np.array([p.center for _, p in self.frames])


def _camera_pose(position: np.ndarray, forward: np.ndarray, up_hint: np.ndarray) -> Pose:
    """Ejes de cámara: z = forward, y ≈ up_hint ortogonalizado, x = y × z."""
    z = forward / np.linalg.norm(forward)
    y = up_hint - np.dot(up_hint, z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z], axis=1)
    u, _, vt = np.linalg.svd(R)
    return Pose(u @ vt, position)


def _frame_id(k: int) -> str:
    return f"{k:06d}"


def _smooth_series(rng: np.random.Generator, count: int, dims: int, sigma: float,
                   harmonics: int = 3) -> np.ndarray:
    """Serie (count, dims) de baja frecuencia: suma de senos con amplitud y fase sembradas."""
    span = 2.0 * max(int(count), 8)
    k = np.arange(int(count), dtype=np.float64)[:, None, None]
    j = np.arange(1, harmonics + 1, dtype=np.float64)[None, :, None]
    amp = rng.normal(0.0, sigma, size=(harmonics, dims)) * np.sqrt(2.0 / harmonics)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(harmonics, dims))
    return (amp * np.sin(2.0 * np.pi * j * k / span + phase)).sum(axis=1)


def make_trajectory(phantom: Phantom, view: str, frame_count: int, seed: int = 0,
                    start: float = 1.0, step: float = 0.1, jitter: float = 0.01,
                    clearance: float = 0.3, theta: float = 0.0) -> Trajectory:
    """
    down-the-barrel: cámara sobre la línea central mirando a lo largo de la tangente.
    en-face: cámara a clearance·R0 de la pared mirando a lo largo de la normal de la pared.

    La rotación (±2°) y el desplazamiento (±0.05·R0) varían suavemente entre
    frames consecutivos (series sembradas con Philox). En down-the-barrel el
    desplazamiento es transversal a la tangente; en en-face es paralelo a la pared.
    """
    if view not in VIEWS:
        raise InvalidInputError(f"vista desconocida: {view}")
    if int(frame_count) < 1:
        raise InvalidInputError("frame_count debe ser >= 1")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    max_angle = np.deg2rad(2.0)
    rotvecs = np.clip(_smooth_series(rng, frame_count, 3, jitter), -max_angle, max_angle)
    shifts = np.clip(_smooth_series(rng, frame_count, 2, jitter), -0.05, 0.05) * phantom.radius
    frames = []
    for k in range(int(frame_count)):
        u = start + k * step
        rotvec, shift = rotvecs[k], shifts[k]
        t, e1, e2 = (a[0] for a in phantom.frame(np.array([u])))
        if view == "down-the-barrel":
            position = phantom.center(np.array([u]))[0] + shift[0] * e1 + shift[1] * e2
            base = _camera_pose(position, t, e2)
        else:
            wall = phantom.surface_point(np.array([u]), np.array([theta]))[0]
            normal = phantom.surface_normal(np.array([u]), np.array([theta]))[0]
            along = t - np.dot(t, normal) * normal
            along /= np.linalg.norm(along)
            across = np.cross(normal, along)
            position = wall - clearance * phantom.radius * normal + shift[0] * along + shift[1] * across
            base = _camera_pose(position, normal, t)
        perturb = Rotation.from_rotvec(rotvec).as_matrix()
        frames.append((_frame_id(k), Pose(base.rotation @ perturb, base.translation)))
    return Trajectory(frames, view, int(seed))


def make_enface_ring(phantom: Phantom, u_values: Sequence[float], theta_values: Sequence[float],
                     clearance: float = 0.3) -> Trajectory:
    """Frames en-face sin perturbación en cada (u, θ) (θ en radianes)."""
    frames = []
    k = 0
    for u in u_values:
        t = phantom.frame(np.array([u]))[0][0]
        for th in theta_values:
            wall = phantom.surface_point(np.array([u]), np.array([th]))[0]
            normal = phantom.surface_normal(np.array([u]), np.array([th]))[0]
            frames.append((_frame_id(k), _camera_pose(wall - clearance * phantom.radius * normal, normal, t)))
            k += 1
    return Trajectory(frames, "en-face", 0)


# ============================================================
# Renderizado
# ============================================================

def sphere_trace(phantom: Phantom, origins: np.ndarray, directions: np.ndarray,
                 max_steps: int = 256, relaxation: float = 0.9, max_distance: Optional[float] = None):
    """
    Marcha por la SDF desde el interior del tubo.

    Returns:
        (distancia a lo largo del rayo, impacto)
    """
    tol = 1e-5 * phantom.radius
    if max_distance is None:
        max_distance = 20.0 * phantom.radius
    n = directions.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(int(max_steps)):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = origins[idx] + t[idx, None] * directions[idx]
        dist = -phantom.sdf(p)
        done = dist < tol
        hit[idx[done]] = True
        t[idx[~done]] += relaxation * dist[~done]
        escaped = t[idx] > max_distance
        active[idx[done | escaped]] = False
    return t, hit


def render_frame(phantom: Phantom, pose: Pose, intrinsics: Intrinsics, mu: float = 2.0,
                 albedo: Optional[float] = None, max_steps: int = 256, relaxation: float = 0.9):
    """(ImageRGB, DepthMap, NormalMap) de una cámara dentro del fantoma."""
    if phantom.sdf(pose.translation[None])[0] >= 0:
        raise InvalidInputError("la cámara está fuera del fantoma")
    h, w = intrinsics.shape
    rays_cam = intrinsics.rays()
    dirs_cam = rays_cam / np.linalg.norm(rays_cam, axis=-1, keepdims=True)
    dirs_world = pose.rotate(dirs_cam.reshape(-1, 3))
    origins = np.broadcast_to(pose.translation, dirs_world.shape)
    t, hit = sphere_trace(phantom, origins, dirs_world, max_steps, relaxation)
    hit = hit.reshape(h, w)

    depth_values = np.where(hit, t.reshape(h, w) * dirs_cam[..., 2], np.nan)
    depth = DepthMap.from_array(depth_values, hit)

    points = origins + t[:, None] * dirs_world
    n_world = phantom.normal_at(points)
    n_cam = (n_world @ pose.rotation).reshape(h, w, 3)
    facing = np.einsum("hwc,hwc->hw", n_cam, dirs_cam) > 0
    n_cam = np.where(facing[..., None], -n_cam, n_cam)
    normals = NormalMap.from_array(np.where(hit[..., None], n_cam, 0.0), hit)

    lf = light_field(depth, intrinsics, mu)
    rho = phantom.albedo if albedo is None else albedo
    image = shade_lambertian(normals, lf, rho)
    return image, depth, normals


def inject_specular(image: ImageRGB, count: int, seed: int = 0, radius: float = 1.5) -> Tuple[ImageRGB, np.ndarray]:
    """Agrega manchas saturadas (luminancia 1) para ejercitar la máscara especular."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    h, w = image.shape
    out = np.array(image.channels)
    spots = np.zeros((h, w), dtype=bool)
    v, u = np.mgrid[0:h, 0:w]
    for _ in range(int(count)):
        cu, cv = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        spots |= (u - cu) ** 2 + (v - cv) ** 2 <= radius ** 2
    out[spots] = 1.0
    return ImageRGB(out), spots
