# fusion.py - Fusión TSDF con poses conocidas, extracción de malla y cobertura
"""
Sustituto simplificado del back end de SLAM: integra profundidad + pose de
cada frame en un volumen TSDF, extrae la superficie con marching cubes y
reporta como huecos las regiones del fantoma que ningún frame observó.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .geometry import DepthMap, Intrinsics, Pose, bilinear, in_image, project_points

Frame = Tuple[DepthMap, Pose]


# ============================================================
# Tipos
# ============================================================

@dataclass(frozen=True)
class GridConfig:
    origin: Tuple[float, float, float]
    voxel_size: float
    dims: Tuple[int, int, int]
    truncation: float

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise InvalidInputError(f"voxel_size debe ser > 0: {self.voxel_size}")
        if not self.truncation > self.voxel_size:
            raise InvalidInputError("el truncamiento debe superar el tamaño de voxel")
        if any(int(d) < 2 for d in self.dims):
            raise InvalidInputError(f"dimensiones de grilla inválidas: {self.dims}")


@dataclass
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float
    dims: Tuple[int, int, int]
    truncation: float
    tsdf: np.ndarray
    weights: np.ndarray

    @classmethod
    def empty(cls, config: GridConfig) -> "VoxelGrid":
        dims = tuple(int(d) for d in config.dims)
        return cls(np.asarray(config.origin, dtype=np.float64), float(config.voxel_size), dims,
                   float(config.truncation), np.ones(dims), np.zeros(dims))

    def centers(self) -> np.ndarray:
        """Centros de voxel en coordenadas de mundo, forma (nx, ny, nz, 3)."""
        idx = np.stack(np.meshgrid(*(np.arange(d) for d in self.dims), indexing="ij"), axis=-1)
        return self.origin + idx * self.voxel_size

    @property
    def observed(self) -> np.ndarray:
        return self.weights > 0


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def to_trimesh(self):
        import trimesh
        return trimesh.Trimesh(vertices=self.vertices, faces=self.triangles, process=False)

    @property
    def area(self) -> float:
        return 0.0 if self.is_empty else float(self.to_trimesh().area)


@dataclass(frozen=True)
class Hole:
    area_fraction: float
    bbox_u: Tuple[float, float]
    bbox_theta: Tuple[float, float]
    cells: int

    def to_dict(self) -> Dict:
        return {"area_fraction": self.area_fraction, "bbox_u": list(self.bbox_u),
                "bbox_theta": list(self.bbox_theta)}


@dataclass
class CoverageMap:
    observed: np.ndarray
    u_edges: np.ndarray
    theta_edges: np.ndarray
    cell_area: np.ndarray
    holes: List[Hole] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return float((self.cell_area * self.observed).sum() / self.cell_area.sum())

    def to_dict(self) -> Dict:
        return {"coverage": self.coverage, "holes": [h.to_dict() for h in self.holes]}


# ============================================================
# Fusión TSDF
# ============================================================

def grid_config_for_bounds(bounds_min, bounds_max, voxel_fraction: float = 1.0 / 128.0,
                           truncation_voxels: float = 3.0, voxel_size: Optional[float] = None) -> GridConfig:
    """Voxel = diagonal/128 salvo que se indique; el volumen se extiende por el truncamiento."""
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    diag = float(np.linalg.norm(hi - lo))
    if voxel_size is None:
        if not diag > 0:
            raise InvalidInputError("caja envolvente degenerada")
        voxel_size = diag * voxel_fraction
    trunc = truncation_voxels * voxel_size
    lo = lo - trunc
    hi = hi + trunc
    dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel_size)) + 1 for i in range(3))
    return GridConfig(tuple(lo), float(voxel_size), dims, float(trunc))


def frame_bounds(frames: Sequence[Frame], intrinsics: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Caja envolvente de todos los puntos observados en mundo."""
    rays = intrinsics.rays()
    pts = []
    for depth, pose in frames:
        cam = depth.filled(0.0)[..., None] * rays
        pts.append(pose.apply(cam[depth.validity]))
    allpts = np.concatenate(pts) if pts else np.zeros((0, 3))
    if allpts.shape[0] == 0:
        raise InvalidInputError("ningún frame tiene profundidad válida")
    return allpts.min(axis=0), allpts.max(axis=0)


def grid_config_for_frames(frames: Sequence[Frame], intrinsics: Intrinsics, **kwargs) -> GridConfig:
    lo, hi = frame_bounds(frames, intrinsics)
    return grid_config_for_bounds(lo, hi, **kwargs)


def integrate_frame(grid: VoxelGrid, depth: DepthMap, pose: Pose, intrinsics: Intrinsics) -> None:
    """Actualización proyectiva: promedio con peso 1 por observación, tallado limitado a la banda."""
    centers = grid.centers().reshape(-1, 3)
    cam = pose.inverse().apply(centers)
    u, v, z = project_points(cam, intrinsics)
    visible = (z > 0) & in_image(u, v, intrinsics.width, intrinsics.height)
    d, ok = bilinear(depth.values, depth.validity, np.where(visible, u, -1.0), np.where(visible, v, -1.0))
    ok &= visible
    sdf = np.where(ok, d - z, -np.inf)
    update = ok & (sdf >= -grid.truncation)
    obs = np.minimum(1.0, sdf[update] / grid.truncation)

    tsdf = grid.tsdf.reshape(-1)
    weights = grid.weights.reshape(-1)
    w_old = weights[update]
    tsdf[update] = (tsdf[update] * w_old + obs) / (w_old + 1.0)
    weights[update] = w_old + 1.0


def fuse_tsdf(frames: Sequence[Frame], intrinsics: Intrinsics, grid_config: Optional[GridConfig] = None,
              **grid_kwargs) -> VoxelGrid:
    """Integra los frames en orden; poses world-from-camera."""
    if not frames:
        raise InvalidInputError("fuse_tsdf requiere al menos un frame")
    if grid_config is None:
        grid_config = grid_config_for_frames(frames, intrinsics, **grid_kwargs)
    grid = VoxelGrid.empty(grid_config)
    for depth, pose in frames:
        if depth.shape != intrinsics.shape:
            raise InvalidInputError("profundidad y cámara con dimensiones distintas")
        integrate_frame(grid, depth, pose, intrinsics)
    return grid


# ============================================================
# Marching cubes
# ============================================================

def extract_mesh(grid: VoxelGrid) -> TriangleMesh:
    """Nivel cero del TSDF restringido a voxels observados; sin datos → malla vacía."""
    from skimage import measure

    observed = grid.observed
    volume = np.where(observed, grid.tsdf, 1.0)
    if not observed.any() or volume.min() >= 0.0 or volume.max() <= 0.0:
        return TriangleMesh.empty()

    verts, faces, normals, _ = measure.marching_cubes(volume, level=0.0)
    # un vértice vive sobre una arista: ambos extremos deben estar observados
    lo = np.floor(verts).astype(np.int64)
    hi = np.ceil(verts).astype(np.int64)
    lo = np.clip(lo, 0, np.array(grid.dims) - 1)
    hi = np.clip(hi, 0, np.array(grid.dims) - 1)
    vert_ok = observed[lo[:, 0], lo[:, 1], lo[:, 2]] & observed[hi[:, 0], hi[:, 1], hi[:, 2]]
    keep = vert_ok[faces].all(axis=1)

    world = grid.origin + verts * grid.voxel_size
    tri = world[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    keep &= area2 > 1e-12 * grid.voxel_size ** 2
    faces = faces[keep]
    if faces.size == 0:
        return TriangleMesh.empty()

    used = np.unique(faces)
    remap = np.full(world.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return TriangleMesh(world[used], remap[faces], normals[used])


# ============================================================
# Cobertura sobre el dominio (u, θ) del fantoma
# ============================================================

def _observed_cells(points: np.ndarray, normals: np.ndarray, frames: Sequence[Frame], intrinsics: Intrinsics,
                    depth_tolerance: float, min_incidence: float) -> np.ndarray:
    observed = np.zeros(points.shape[0], dtype=bool)
    sin_min = np.sin(np.deg2rad(min_incidence))
    for depth, pose in frames:
        cam = pose.inverse().apply(points)
        u, v, z = project_points(cam, intrinsics)
        visible = (z > 0) & in_image(u, v, intrinsics.width, intrinsics.height)
        d, ok = bilinear(depth.values, depth.validity, np.where(visible, u, -1.0), np.where(visible, v, -1.0))
        ok &= visible
        agree = ok & (np.abs(np.where(ok, d, 0.0) - z) <= depth_tolerance * np.abs(z))
        to_cam = pose.translation - points
        to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
        # la normal exterior apunta fuera del lumen; la cámara está dentro
        incidence = np.einsum("nc,nc->n", -normals, to_cam) >= sin_min
        observed |= agree & incidence
    return observed


def _merge_seam(labels: np.ndarray, count: int) -> np.ndarray:
    """Une componentes que se tocan a través de θ = 0 / 2π."""
    parent = np.arange(count + 1)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in zip(labels[:, 0], labels[:, -1]):
        if a and b:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(count + 1)])
    return roots[labels]


def _theta_extent(cols: np.ndarray, theta_edges: np.ndarray) -> Tuple[float, float]:
    """Intervalo angular (grados) de un conjunto de columnas, consciente del cruce por 0."""
    n = len(theta_edges) - 1
    present = np.zeros(n, dtype=bool)
    present[cols] = True
    if present.all():
        return (float(np.rad2deg(theta_edges[0])), float(np.rad2deg(theta_edges[-1])))
    # el intervalo empieza justo después de la mayor racha circular de columnas ausentes
    best_len, best_end, run = 0, 0, 0
    for k in range(2 * n):
        if present[k % n]:
            run = 0
            continue
        run += 1
        if run > best_len:
            best_len, best_end = run, k % n
    first = (best_end + 1) % n
    last = (first + n - best_len - 1) % n
    start = float(np.rad2deg(theta_edges[first]))
    end = float(np.rad2deg(theta_edges[last + 1]))
    return (start, end)


def coverage_holes(frames: Sequence[Frame], intrinsics: Intrinsics, phantom, cells_u: int = 40,
                   cells_theta: int = 72, u_range: Optional[Tuple[float, float]] = None,
                   depth_tolerance: float = 0.02, incidence_degrees: float = 5.0) -> CoverageMap:
    """Celdas (u, θ) observadas por al menos un frame y huecos como componentes conexas no observadas."""
    u0, u1 = u_range if u_range is not None else (0.0, phantom.length)
    if not u1 > u0:
        raise InvalidInputError(f"rango axial inválido: {(u0, u1)}")
    u_edges = np.linspace(u0, u1, cells_u + 1)
    theta_edges = np.linspace(0.0, 2 * np.pi, cells_theta + 1)
    uc = 0.5 * (u_edges[:-1] + u_edges[1:])
    tc = 0.5 * (theta_edges[:-1] + theta_edges[1:])
    UU, TT = np.meshgrid(uc, tc, indexing="ij")
    # área de cada celda con el elemento de superficie del tubo (pliegues y curvatura incluidos)
    cell_area = phantom.area_element(UU, TT) * (u_edges[1] - u_edges[0]) * (theta_edges[1] - theta_edges[0])

    points = phantom.surface_point(UU.ravel(), TT.ravel())
    normals = phantom.surface_normal(UU.ravel(), TT.ravel())
    observed = _observed_cells(points, normals, list(frames), intrinsics, depth_tolerance, incidence_degrees)
    observed = observed.reshape(UU.shape)

    labels, count = ndimage.label(~observed)
    if count:
        labels = _merge_seam(labels, count)
    total = cell_area.sum()
    holes = []
    for lab in np.unique(labels[labels > 0]):
        sel = labels == lab
        rows, cols = np.nonzero(sel)
        holes.append(Hole(
            area_fraction=float(cell_area[sel].sum() / total),
            bbox_u=(float(u_edges[rows.min()]), float(u_edges[rows.max() + 1])),
            bbox_theta=_theta_extent(np.unique(cols), theta_edges),
            cells=int(sel.sum()),
        ))
    holes.sort(key=lambda h: -h.area_fraction)
    return CoverageMap(observed, u_edges, theta_edges, cell_area, holes)
