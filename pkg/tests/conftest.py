# conftest.py - Fixtures compartidas de la suite
import json
import os
import tempfile
from pathlib import Path

# el log del terminal no debe caer en la raíz del repo durante los tests
os.environ.setdefault("COLON_RECON_LOG", str(Path(tempfile.mkdtemp(prefix="colon_recon_")) / "log.json"))

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from colon_recon.geometry import DepthMap, Intrinsics, NormalMap, Pose
from colon_recon.utils import PipelineConfig


def make_intrinsics(fx=24.0, fy=24.0, cx=None, cy=None, width=64, height=64) -> Intrinsics:
    cx = (width - 1) / 2.0 if cx is None else cx
    cy = (height - 1) / 2.0 if cy is None else cy
    return Intrinsics(fx, fy, cx, cy, width, height)


def random_pose(rng: np.random.Generator, angle: float = 0.05, shift: float = 0.05) -> Pose:
    rotvec = rng.normal(size=3)
    rotvec *= angle / np.linalg.norm(rotvec)
    return Pose(Rotation.from_rotvec(rotvec).as_matrix(), rng.uniform(-shift, shift, size=3))


def plane_depth(intrinsics: Intrinsics, normal, offset: float) -> DepthMap:
    """Profundidad z del plano n·X = offset visto por la cámara."""
    n = np.asarray(normal, dtype=np.float64)
    rays = intrinsics.rays()
    return DepthMap.from_array(offset / np.einsum("hwc,c->hw", rays, n))


def plane_normals(intrinsics: Intrinsics, normal) -> NormalMap:
    """Normal unitaria del plano orientada hacia la cámara."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    return NormalMap.constant(n, intrinsics.shape)


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cos = np.clip(np.einsum("...c,...c->...", a, b), -1.0, 1.0)
    return np.rad2deg(np.arccos(cos))


SMALL_CONFIG = {
    "camera": {"fx": 12.0, "fy": 12.0, "cx": 15.5, "cy": 15.5, "width": 32, "height": 32},
    "phantom": {"fold_amplitude": 0.1},
    "trajectory": {"view": "en-face", "frames": 4, "seed": 3, "step": 0.05},
    "refinement": {"iterations": 1, "base_resolution": 16, "max_optimizer_steps": 20},
    "fusion": {"voxel_fraction": 1.0 / 48.0},
    "evaluation": {"samples": 2000, "folds": 2},
}


@pytest.fixture
def config_file(tmp_path) -> Path:
    path = tmp_path / "config.json"
    cfg = dict(SMALL_CONFIG)
    cfg["paths"] = {"dataset": str(tmp_path / "scene"), "output": str(tmp_path / "out")}
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture
def small_config(config_file) -> PipelineConfig:
    return PipelineConfig.load(str(config_file))


@pytest.fixture
def unit_intrinsics() -> Intrinsics:
    return Intrinsics(1.0, 1.0, 0.0, 0.0, 8, 8)


def render_enface_pair(intrinsics: Intrinsics, fold_amplitude: float = 0.1, step: float = 0.005, seed: int = 0,
                       start: float = 1.5, jitter: float = 0.0, mu: float = 2.0):
    """Dos frames en-face consecutivos del fantoma: [(image, depth, normals, pose), ...]."""
    from colon_recon.phantom import make_phantom, make_trajectory, render_frame

    phantom = make_phantom(fold_amplitude=fold_amplitude)
    trajectory = make_trajectory(phantom, "en-face", 2, seed=seed, start=start, step=step, jitter=jitter)
    frames = []
    for _, pose in trajectory.frames:
        image, depth, normals = render_frame(phantom, pose, intrinsics, mu=mu)
        frames.append((image, depth, normals, pose))
    return frames


def render_panning_pair(intrinsics: Intrinsics, degrees: float = 7.0, fold_amplitude: float = 0.1, u: float = 1.5):
    """La cámara en-face gira sobre su eje y; luz sin caída angular (μ = 0)."""
    from colon_recon.phantom import make_enface_ring, make_phantom, render_frame

    phantom = make_phantom(fold_amplitude=fold_amplitude)
    pose_t = make_enface_ring(phantom, [u], [0.0]).frames[0][1]
    turn = Rotation.from_rotvec([0.0, np.deg2rad(degrees), 0.0]).as_matrix()
    pose_s = Pose(pose_t.rotation @ turn, pose_t.translation)
    frames = []
    for pose in (pose_t, pose_s):
        image, depth, normals = render_frame(phantom, pose, intrinsics, mu=0.0)
        frames.append((image, depth, normals, pose))
    return frames


def sphere_cap(intrinsics: Intrinsics, center_z: float = 4.0, radius: float = 2.0):
    """Profundidad y normales de la cara frontal de una esfera centrada en el eje."""
    rays = intrinsics.rays()
    C = np.array([0.0, 0.0, center_z])
    a = np.einsum("hwc,hwc->hw", rays, rays)
    b = rays @ C
    t = (b - np.sqrt(b ** 2 - a * (C @ C - radius ** 2))) / a
    X = t[..., None] * rays
    return DepthMap.from_array(t), NormalMap.from_array((X - C) / radius)
