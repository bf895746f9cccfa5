# refinement.py - Refinamiento multi-escala n×NR con un minimizador de energía determinista
"""
Cada iteración i trabaja a la resolución min(base·2^(i−1), entrada):

    profundidad → re-estimación fotométrica → campo de luz → normales
                → refine_iteration → integración (atada a la re-estimación)

refine_iteration minimiza por descenso de gradiente proyectado (sobre la
esfera unitaria) con backtracking, precondicionado por la curvatura diagonal
de un mayorante cuadrático (pesos IRLS):

    E(N) = w_shading·mean((ρ̂·Â·(N·F̂)₊ − I)²)
         + w_prior·mean(Σ_c φ(N − N_in))
         + w_smooth·mean(Σ_c φ(∇N))          φ(x) = √(x² + ε²) − ε
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix

from .errors import ColonReconError, EmptySupportError, InvalidInputError, OptimizerError
from .geometry import DepthMap, ImageRGB, Intrinsics, NormalMap, resize_depth
from .illumination import LightField, RefinementInput, assemble_refinement_input, light_field
from .normal_integration import integrate_normals, normals_from_depth
from .utils import _cv2_or_raise

CHARBONNIER_EPS = 1e-2
SATURATION = 0.98
MIN_STEP = 1e-12
MIN_INTENSITY = 1e-3
MIN_COS = 0.02
# pesos (al cuadrado) del Laplaciano y de la atadura al arranque; escala soft-L1 en log-brillo
PHOTOMETRIC_SMOOTH = 1e-2
PHOTOMETRIC_PRIOR = 1e-2
PHOTOMETRIC_SCALE = 0.05


@dataclass(frozen=True)
class RefinementConfig:
    iterations: int = 1
    base_resolution: int = 32
    upsample_factor: int = 2
    w_shading: float = 1.0
    w_prior: float = 0.1
    w_smooth: float = 0.05
    lambda1: float = 0.1
    lambda2: float = 0.5
    max_optimizer_steps: int = 150
    photometric_evaluations: int = 30
    mu: float = 2.0

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise InvalidInputError(f"iterations debe ser >= 1, recibido {self.iterations}")
        if int(self.base_resolution) < 3:
            raise InvalidInputError("base_resolution debe ser >= 3")
        if self.upsample_factor != 2:
            raise InvalidInputError("upsample_factor está fijo en 2")
        for name in ("w_shading", "w_prior", "w_smooth", "lambda1", "lambda2", "mu"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} debe ser >= 0")
        if int(self.max_optimizer_steps) < 0:
            raise InvalidInputError("max_optimizer_steps debe ser >= 0")
        if int(self.photometric_evaluations) < 0:
            raise InvalidInputError("photometric_evaluations debe ser >= 0")

    @classmethod
    def from_config(cls, section: Dict, mu: Optional[float] = None) -> "RefinementConfig":
        keys = ("iterations", "base_resolution", "w_shading", "w_prior", "w_smooth",
                "lambda1", "lambda2", "max_optimizer_steps", "photometric_evaluations")
        kwargs = {k: section[k] for k in keys if k in section}
        if mu is not None:
            kwargs["mu"] = float(mu)
        return cls(**kwargs)

    def resolutions(self, width: int, height: int) -> List[Tuple[int, int]]:
        """(ancho, alto) por iteración; no decreciente y acotado por la entrada."""
        sizes = []
        for i in range(int(self.iterations)):
            w_i = min(int(self.base_resolution) * self.upsample_factor ** i, width)
            h_i = min(max(3, int(round(w_i * height / width))), height)
            sizes.append((w_i, h_i))
        return sizes


@dataclass
class RefinementState:
    normals: NormalMap
    depth: DepthMap
    scale_index: int
    energy_trace: List[float] = field(default_factory=list)
    pred_depths: List[DepthMap] = field(default_factory=list)
    pred_normals: List[NormalMap] = field(default_factory=list)
    initial_normals: List[NormalMap] = field(default_factory=list)
    light_fields: List[LightField] = field(default_factory=list)
    traces: List[List[float]] = field(default_factory=list)

    def energy_rows(self) -> List[Tuple[int, int, float]]:
        """Filas (iteración, paso, energía) para el CSV."""
        return [(i + 1, s, e) for i, trace in enumerate(self.traces) for s, e in enumerate(trace)]


# ============================================================
# Energía
# ============================================================

def _charbonnier(x: np.ndarray):
    root = np.sqrt(x * x + CHARBONNIER_EPS ** 2)
    return root - CHARBONNIER_EPS, x / root


class _ShadingEnergy:
    """Energía de refinamiento y su gradiente para una imagen y campo de luz fijos."""

    def __init__(self, inputs: RefinementInput, config: RefinementConfig):
        self.cfg = config
        channels = inputs.as_channels()
        rgb = channels[..., :3]
        self.gray = rgb.mean(axis=-1)
        self.F = channels[..., 3:6]
        self.A = channels[..., 6]
        self.N_in = inputs.normals.vectors
        self.valid = inputs.normals.validity & inputs.field.validity
        self.lit = self.valid & (rgb.max(axis=-1) <= SATURATION)
        self.n_valid = max(int(self.valid.sum()), 1)
        self.n_lit = max(int(self.lit.sum()), 1)
        self.pair_x = self.valid[:, 1:] & self.valid[:, :-1]
        self.pair_y = self.valid[1:, :] & self.valid[:-1, :]
        self.rho = self._robust_albedo()

    def _robust_albedo(self) -> float:
        cos = np.einsum("hwc,hwc->hw", self.N_in, self.F)
        well_lit = self.lit & (self.gray > 0.05) & (cos > 0.2) & (self.A > 0)
        if not well_lit.any():
            print("[refine] sin píxeles bien iluminados, albedo = 1")
            return 1.0
        ratio = self.gray[well_lit] / (self.A[well_lit] * np.maximum(1e-3, cos[well_lit]))
        return float(np.median(ratio))

    def __call__(self, N: np.ndarray, with_grad: bool = True):
        cfg = self.cfg
        cos = np.einsum("hwc,hwc->hw", N, self.F)
        pos = cos > 0
        r = np.where(self.lit, self.rho * self.A * np.where(pos, cos, 0.0) - self.gray, 0.0)
        e_shade = float((r * r).sum()) / self.n_lit

        vmask = self.valid[..., None]
        phi_p, dphi_p = _charbonnier(np.where(vmask, N - self.N_in, 0.0))
        e_prior = float(phi_p.sum()) / self.n_valid

        dx = N[:, 1:] - N[:, :-1]
        dy = N[1:, :] - N[:-1, :]
        phi_x, dphi_x = _charbonnier(np.where(self.pair_x[..., None], dx, 0.0))
        phi_y, dphi_y = _charbonnier(np.where(self.pair_y[..., None], dy, 0.0))
        e_tv = float(phi_x.sum() + phi_y.sum()) / self.n_valid

        energy = cfg.w_shading * e_shade + cfg.w_prior * e_prior + cfg.w_smooth * e_tv
        if not with_grad:
            return energy

        grad = (cfg.w_shading * 2.0 / self.n_lit) * (r * self.rho * self.A * pos)[..., None] * self.F
        grad = grad + (cfg.w_prior / self.n_valid) * dphi_p
        tv = np.zeros_like(N)
        tv[:, 1:] += dphi_x
        tv[:, :-1] -= dphi_x
        tv[1:, :] += dphi_y
        tv[:-1, :] -= dphi_y
        grad = grad + (cfg.w_smooth / self.n_valid) * tv
        return energy, np.where(vmask, grad, 0.0)

    def curvature(self, N: np.ndarray) -> np.ndarray:
        """
        Curvatura diagonal (por píxel) de un mayorante cuadrático de E en N:
        pesos IRLS 1/√(x² + ε²) de Charbonnier (×2 en los pares del TV) y
        2·(ρ̂·Â)²·‖F̂‖² del sombreado.
        """
        cfg = self.cfg
        eps2 = CHARBONNIER_EPS ** 2
        dp = np.where(self.valid[..., None], N - self.N_in, 0.0)
        w_p = (1.0 / np.sqrt(dp * dp + eps2)).max(axis=-1)
        dx = N[:, 1:] - N[:, :-1]
        dy = N[1:, :] - N[:-1, :]
        w_x = np.where(self.pair_x, (1.0 / np.sqrt(dx * dx + eps2)).max(axis=-1), 0.0)
        w_y = np.where(self.pair_y, (1.0 / np.sqrt(dy * dy + eps2)).max(axis=-1), 0.0)
        tv = np.zeros(self.valid.shape)
        tv[:, 1:] += w_x
        tv[:, :-1] += w_x
        tv[1:, :] += w_y
        tv[:-1, :] += w_y
        shade = np.where(self.lit, (self.rho * self.A) ** 2 * np.einsum("hwc,hwc->hw", self.F, self.F), 0.0)
        d = (cfg.w_prior / self.n_valid) * w_p + (2.0 * cfg.w_smooth / self.n_valid) * tv \
            + (2.0 * cfg.w_shading / self.n_lit) * shade
        return np.where(self.valid, np.maximum(d, 1e-12), 1.0)


def _project_sphere(N: np.ndarray, valid: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(N, axis=-1, keepdims=True)
    return np.where(valid[..., None], N / np.maximum(norm, 1e-12), N)


def refine_iteration(image: ImageRGB, field: LightField, normals_in: NormalMap,
                     config: RefinementConfig, return_trace: bool = False):
    """Minimiza E(N) partiendo de normals_in; la traza de energía es no creciente."""
    if not (image.shape == field.shape == normals_in.shape):
        raise InvalidInputError("imagen, campo de luz y normales con dimensiones distintas")
    energy_fn = _ShadingEnergy(assemble_refinement_input(image, field, normals_in), config)
    valid = energy_fn.valid
    N = np.where(valid[..., None], normals_in.vectors, 0.0)

    energy, grad = energy_fn(N)
    if not np.isfinite(energy):
        raise OptimizerError("energía inicial no finita", {"energy": energy})
    trace = [energy]

    for _ in range(int(config.max_optimizer_steps)):
        # paso de Newton del mayorante; t = 1 ya decrece E salvo por la proyección
        direction = grad / energy_fn.curvature(N)[..., None]
        tangent = direction - np.einsum("hwc,hwc->hw", direction, N)[..., None] * N
        gmax = float(np.max(np.linalg.norm(tangent, axis=-1), initial=0.0))
        if gmax <= 0:
            break
        step = 1.0
        accepted = False
        while step * gmax > MIN_STEP:
            candidate = _project_sphere(N - step * tangent, valid)
            cand_energy = energy_fn(candidate, with_grad=False)
            if not np.isfinite(cand_energy):
                raise OptimizerError("energía no finita durante la optimización", {"step": step})
            if cand_energy < energy:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        N = candidate
        energy, grad = energy_fn(N)
        trace.append(energy)

    out = NormalMap.from_array(N, valid)
    if return_trace:
        return out, trace
    return out


# ============================================================
# Re-estimación fotométrica de la profundidad
# ============================================================

def _stencil_ok(valid: np.ndarray) -> np.ndarray:
    """Píxeles interiores con sus 4 vecinos válidos."""
    ok = np.zeros_like(valid)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[:-2, 1:-1] & valid[2:, 1:-1]
                      & valid[1:-1, :-2] & valid[1:-1, 2:])
    return ok


def _stencil_columns(idx: np.ndarray, rows_v: np.ndarray, rows_u: np.ndarray,
                     centers_v: np.ndarray, centers_u: np.ndarray):
    """(fila, columna) de la cruz de 5 píxeles alrededor de cada centro, más el propio píxel."""
    cols = [idx[rows_v, rows_u], idx[centers_v, centers_u],
            idx[centers_v - 1, centers_u], idx[centers_v + 1, centers_u],
            idx[centers_v, centers_u - 1], idx[centers_v, centers_u + 1]]
    r = np.tile(np.arange(rows_v.size), len(cols))
    c = np.concatenate(cols)
    keep = c >= 0
    return r[keep], c[keep]


def photometric_depth(image: ImageRGB, depth: DepthMap, intrinsics: Intrinsics, mu: float,
                      max_evaluations: int = 30) -> DepthMap:
    """
    Re-estima la profundidad desde el brillo con la luz co-ubicada.

    Con F̂ y cos_axis fijos por el rayo del píxel, I = ρ·r̂_z^μ·c/‖X‖² con
    c = N̂·F̂. Se resuelve en log-profundidad ℓ

        log c(ℓ) − 2ℓ + log ρ̂ + μ·log r̂_z − 2·log‖r‖ − log I = 0

    con c desde diferencias centrales de la propia ℓ, un Laplaciano débil y
    pérdida robusta (soft-L1) que absorbe las discontinuidades de oclusión.
    El arranque es la forma cerrada con c de la profundidad actual y ρ̂
    elegido para que la mediana quede en la de `depth`.
    """
    if depth.shape != image.shape or depth.shape != intrinsics.shape:
        raise InvalidInputError("imagen, profundidad y cámara con dimensiones distintas")
    valid = depth.validity
    if not valid.any():
        raise EmptySupportError("photometric_depth: profundidad sin píxeles válidos")
    h, w = depth.shape
    anchor = float(np.median(depth.values[valid]))
    gray = image.channels.mean(axis=-1)
    usable = valid & (gray > MIN_INTENSITY) & (image.channels.max(axis=-1) <= SATURATION)
    if h < 3 or w < 3 or usable.sum() < 9 or max_evaluations <= 0:
        return depth

    rays = intrinsics.rays()
    ray_norm = np.linalg.norm(rays, axis=-1)
    r_hat = rays / ray_norm[..., None]
    rz = r_hat[..., 2]

    normals = normals_from_depth(depth, intrinsics)
    c_now = np.einsum("hwc,hwc->hw", normals.vectors, -r_hat)
    c_now = np.where(normals.validity, np.clip(c_now, MIN_COS, 1.0), rz)
    z0 = rz * np.sqrt(np.power(rz, mu) * c_now / np.where(usable, gray, 1.0))
    s = anchor / float(np.median(z0[usable]))
    log_rho = 2.0 * np.log(s)

    L = np.log(np.where(valid, depth.filled(anchor), anchor))
    L[usable] = np.log(s * z0[usable])
    n = int(usable.sum())
    idx = np.full((h, w), -1, dtype=np.int64)
    idx[usable] = np.arange(n)
    x0 = L[usable].copy()

    V, U = np.mgrid[0:h, 0:w]
    QV, QU = np.clip(V, 1, h - 2), np.clip(U, 1, w - 2)
    inner = _stencil_ok(valid)
    shade_rows = usable & inner[QV, QU]
    sv, su = np.nonzero(shade_rows)
    qv, qu = QV[sv, su], QU[sv, su]
    lap_rows = inner & usable
    lv, lu = np.nonzero(lap_rows)
    b = (log_rho + mu * np.log(rz) - 2.0 * np.log(ray_norm) - np.log(np.where(usable, gray, 1.0)))[sv, su]
    lap_w = np.sqrt(PHOTOMETRIC_SMOOTH)
    prior_w = np.sqrt(PHOTOMETRIC_PRIOR)

    def residuals(x: np.ndarray) -> np.ndarray:
        Lf = L.copy()
        Lf[usable] = x
        X = np.exp(Lf)[..., None] * rays
        du = X[1:-1, 2:] - X[1:-1, :-2]
        dv = X[2:, 1:-1] - X[:-2, 1:-1]
        nrm = np.cross(du, dv)
        cos = np.abs(np.einsum("hwc,hwc->hw", nrm, r_hat[1:-1, 1:-1]))
        cos = cos / np.maximum(np.linalg.norm(nrm, axis=-1), 1e-300)
        c = np.clip(cos, MIN_COS, 1.0)[qv - 1, qu - 1]
        shade = np.log(c) - 2.0 * Lf[sv, su] + b
        lap = 4.0 * Lf[lv, lu] - Lf[lv - 1, lu] - Lf[lv + 1, lu] - Lf[lv, lu - 1] - Lf[lv, lu + 1]
        return np.concatenate([shade, prior_w * (x - x0), lap_w * lap])

    r_s, c_s = _stencil_columns(idx, sv, su, qv, qu)
    r_l, c_l = _stencil_columns(idx, lv, lu, lv, lu)
    n_s, n_l = sv.size, lv.size
    rows = np.concatenate([r_s, n_s + np.arange(n), n_s + n + r_l])
    cols = np.concatenate([c_s, np.arange(n), c_l])
    sparsity = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n_s + n + n_l, n)).tocsr()

    result = least_squares(residuals, x0, jac_sparsity=sparsity, method="trf", tr_solver="lsmr",
                           loss="soft_l1", f_scale=PHOTOMETRIC_SCALE, max_nfev=int(max_evaluations))
    if not np.all(np.isfinite(result.x)):
        raise OptimizerError("re-estimación fotométrica no finita", {"status": int(result.status)})
    L[usable] = result.x
    z = np.exp(L)
    z *= anchor / float(np.median(z[valid]))
    print(f"[refine] re-estimación fotométrica: {n} píxeles, costo {0.5 * float(np.sum(result.fun ** 2)):.4g}, "
          f"{result.nfev} evaluaciones")
    return DepthMap(np.where(valid, z, np.nan), valid)


# ============================================================
# Recursión multi-escala
# ============================================================

def _resize_image(image: ImageRGB, width: int, height: int) -> ImageRGB:
    if image.shape == (height, width):
        return image
    cv2 = _cv2_or_raise()
    interp = cv2.INTER_AREA if width < image.shape[1] else cv2.INTER_LINEAR
    return ImageRGB(np.clip(cv2.resize(image.channels, (width, height), interpolation=interp), 0.0, 1.0))


def build_pyramid(image: ImageRGB, sizes: Sequence[Tuple[int, int]]) -> List[ImageRGB]:
    return [_resize_image(image, w, h) for w, h in sizes]


def flat_init(intrinsics: Intrinsics, depth: float = 1.0, width: Optional[int] = None,
              height: Optional[int] = None) -> DepthMap:
    """Plano fronto-paralelo constante ('flat init')."""
    w = width or intrinsics.width
    h = height or intrinsics.height
    return DepthMap(np.full((h, w), float(depth)), np.ones((h, w), dtype=bool))


def corrupted_init(depth_gt: DepthMap, seed: int = 0, amplitude: float = 0.2) -> DepthMap:
    """GT × campo suave en [1 − a, 1 + a] (sólo experimentos sintéticos)."""
    if not 0 <= amplitude < 1:
        raise InvalidInputError(f"amplitude debe estar en [0, 1): {amplitude}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    h, w = depth_gt.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    freq = rng.uniform(0.5, 1.5, size=2)
    warp = 1.0 + amplitude * np.sin(2.0 * np.pi * freq[0] * u / w + phase[0]) \
        * np.cos(2.0 * np.pi * freq[1] * v / h + phase[1])
    return DepthMap(np.where(depth_gt.validity, depth_gt.values * warp, np.nan), depth_gt.validity)


def refine_multiscale(image: Union[ImageRGB, Sequence[ImageRGB]], depth_init: DepthMap,
                      intrinsics: Intrinsics, config: RefinementConfig) -> RefinementState:
    """
    n×NR: por iteración re-estima la profundidad desde el brillo, calcula luz y
    normales, refina e integra anclando a la mediana de la profundidad actual;
    la profundidad se reescala ×2 entre iteraciones.
    """
    sizes = config.resolutions(intrinsics.width, intrinsics.height)
    if isinstance(image, ImageRGB):
        if image.shape != intrinsics.shape:
            raise InvalidInputError("la imagen no coincide con la cámara")
        pyramid = build_pyramid(image, sizes)
    else:
        pyramid = list(image)
        if len(pyramid) != len(sizes):
            raise InvalidInputError(f"pirámide con {len(pyramid)} niveles, se esperaban {len(sizes)}")

    state = None
    current = depth_init
    for i, ((w_i, h_i), img_i) in enumerate(zip(sizes, pyramid)):
        try:
            if img_i.shape != (h_i, w_i):
                raise InvalidInputError(f"nivel de pirámide {img_i.shape} != {(h_i, w_i)}")
            k_i = intrinsics.scaled(w_i, h_i) if (h_i, w_i) != intrinsics.shape else intrinsics
            depth_i = resize_depth(current, w_i, h_i)
            if not depth_i.validity.any():
                raise InvalidInputError("profundidad sin píxeles válidos")
            anchor = float(np.median(depth_i.values[depth_i.validity]))
            depth_i = photometric_depth(img_i, depth_i, k_i, config.mu, config.photometric_evaluations)
            lf = light_field(depth_i, k_i, config.mu)
            normals_i = normals_from_depth(depth_i, k_i)
            refined, trace = refine_iteration(img_i, lf, normals_i, config, return_trace=True)
            integrated = integrate_normals(refined, k_i, anchor, reference=depth_i)
        except ColonReconError as e:
            raise e.with_context(f"iteración {i + 1}") from e
        print(f"[refine] iteración {i + 1}/{len(sizes)} {w_i}x{h_i}: "
              f"energía {trace[0]:.6g} → {trace[-1]:.6g} ({len(trace) - 1} pasos)")

        if state is None:
            state = RefinementState(refined, integrated, i)
        state.normals = refined
        state.depth = integrated
        state.scale_index = i
        state.energy_trace = trace
        state.traces.append(trace)
        state.pred_depths.append(integrated)
        state.pred_normals.append(refined)
        state.initial_normals.append(normals_i)
        state.light_fields.append(lf)
        current = integrated
    return state
