"""Tests de fusión TSDF, extracción de malla y cobertura del fantoma."""
import numpy as np
import pytest
from scipy.integrate import quad

from colon_recon.errors import InvalidInputError
from colon_recon.fusion import (
    TriangleMesh, VoxelGrid, coverage_holes, extract_mesh, fuse_tsdf, grid_config_for_bounds,
)
from colon_recon.geometry import DepthMap, Pose
from colon_recon.phantom import make_enface_ring, make_phantom, render_frame

from conftest import make_intrinsics, plane_depth, sphere_cap


class TestFuseTsdf:

    def test_plane_surface_within_half_voxel(self):
        K = make_intrinsics(width=32, height=32)
        n = np.array([0.2, 0.0, -1.0])
        depth = plane_depth(K, n, -1.0)
        grid = fuse_tsdf([(depth, Pose.identity())], K, voxel_size=0.02)
        mesh = extract_mesh(grid)
        assert not mesh.is_empty
        dist = np.abs(mesh.vertices @ n + 1.0) / np.linalg.norm(n)
        assert np.sqrt(np.mean(dist ** 2)) <= 0.5 * grid.voxel_size

    def test_two_views_of_same_plane(self):
        K = make_intrinsics(width=32, height=32)
        depth = DepthMap.from_array(np.full(K.shape, 1.0))
        frames = [(depth, Pose.identity()), (depth, Pose(np.eye(3), [0.05, 0.0, 0.0]))]
        mesh = extract_mesh(fuse_tsdf(frames, K, voxel_size=0.02))
        np.testing.assert_allclose(mesh.vertices[:, 2], 1.0, atol=1e-2)

    def test_repeated_frame_is_idempotent(self):
        K = make_intrinsics(width=24, height=24)
        depth = plane_depth(K, [0.1, 0.1, -1.0], -1.2)
        frame = (depth, Pose.identity())
        once = fuse_tsdf([frame], K, voxel_size=0.03)
        twice = fuse_tsdf([frame, frame], K, voxel_size=0.03)
        np.testing.assert_allclose(twice.tsdf, once.tsdf, atol=1e-12)
        np.testing.assert_array_equal(twice.weights, 2.0 * once.weights)

    def test_zero_frames_rejected(self):
        with pytest.raises(InvalidInputError):
            fuse_tsdf([], make_intrinsics())

    def test_unobserved_grid_gives_empty_mesh(self):
        config = grid_config_for_bounds([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], voxel_size=0.1)
        mesh = extract_mesh(VoxelGrid.empty(config))
        assert mesh.is_empty
        assert mesh.area == 0.0

    def test_invalid_grid(self):
        with pytest.raises(InvalidInputError):
            grid_config_for_bounds([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], voxel_size=0.1, truncation_voxels=0.5)

    def test_sphere_cap_area(self):
        K = make_intrinsics(width=193, height=193, fx=256.0, fy=256.0)
        depth, _ = sphere_cap(K, center_z=4.0, radius=2.0)
        # sólo los rayos dentro de un cono de 20°: la región vista es un casquete
        rays = K.rays()
        inside = np.hypot(rays[..., 0], rays[..., 1]) <= np.tan(np.deg2rad(20.0))
        depth = DepthMap.from_array(np.where(inside, depth.values, np.nan))
        mesh = extract_mesh(fuse_tsdf([(depth, Pose.identity())], K, voxel_size=0.01))

        alpha = np.deg2rad(20.0)
        b = 4.0 * np.cos(alpha)
        t = b - np.sqrt(b ** 2 - 12.0)
        cos_beta = (4.0 - t * np.cos(alpha)) / 2.0
        expected = 2.0 * np.pi * 4.0 * (1.0 - cos_beta)
        assert mesh.area == pytest.approx(expected, rel=0.05)


# ============================================================
# Cobertura
# ============================================================

U_RANGE = (1.0, 3.0)


@pytest.fixture(scope="module")
def ring_scene():
    """Anillo en-face completo sobre un cilindro (sin pliegues)."""
    phantom = make_phantom(fold_amplitude=0.0)
    K = make_intrinsics(fx=12.0, fy=12.0, width=32, height=32)
    ring = make_enface_ring(phantom, np.arange(1.0, 3.01, 0.3), np.arange(12) * np.pi / 6.0)
    frames = []
    for _, pose in ring.frames:
        _, depth, _ = render_frame(phantom, pose, K)
        frames.append((depth, pose))
    return phantom, K, frames


def _hide_sector(phantom, K, frames, low_deg, high_deg):
    """Invalida los píxeles que ven el sector angular [low, high)."""
    out = []
    for depth, pose in frames:
        points = pose.apply(depth.filled(1.0)[..., None] * K.rays())
        _, _, theta = phantom.tube_coordinates(points)
        theta = np.rad2deg(np.mod(theta, 2 * np.pi))
        hidden = (theta >= low_deg) & (theta < high_deg)
        out.append((DepthMap.from_array(np.where(hidden, np.nan, depth.values), depth.validity & ~hidden), pose))
    return out


class TestCoverage:

    def test_full_ring_is_covered(self, ring_scene):
        phantom, K, frames = ring_scene
        cov = coverage_holes(frames, K, phantom, u_range=U_RANGE)
        assert cov.coverage >= 0.99

    def test_hidden_quadrant_is_one_hole(self, ring_scene):
        phantom, K, frames = ring_scene
        cov = coverage_holes(_hide_sector(phantom, K, frames, 0.0, 90.0), K, phantom, u_range=U_RANGE)
        big = [h for h in cov.holes if h.area_fraction > 0.01]
        assert len(big) == 1
        assert big[0].area_fraction == pytest.approx(0.25, abs=0.02)
        assert big[0].bbox_theta[0] == pytest.approx(0.0, abs=5.0)
        assert big[0].bbox_theta[1] == pytest.approx(90.0, abs=5.0)

    def test_hole_across_the_seam_is_merged(self, ring_scene):
        phantom, K, frames = ring_scene
        hidden = _hide_sector(phantom, K, _hide_sector(phantom, K, frames, 330.0, 360.0), 0.0, 30.0)
        cov = coverage_holes(hidden, K, phantom, u_range=U_RANGE)
        big = [h for h in cov.holes if h.area_fraction > 0.01]
        assert len(big) == 1
        assert big[0].area_fraction == pytest.approx(60.0 / 360.0, abs=0.02)
        assert big[0].bbox_theta[0] == pytest.approx(330.0, abs=5.0)
        assert big[0].bbox_theta[1] == pytest.approx(30.0, abs=5.0)

    def test_zero_frames(self):
        phantom = make_phantom()
        cov = coverage_holes([], make_intrinsics(), phantom)
        assert cov.coverage == 0.0
        assert len(cov.holes) == 1
        assert cov.holes[0].area_fraction == pytest.approx(1.0)
        assert set(cov.to_dict()) == {"coverage", "holes"}

    def test_cell_areas_follow_the_folds(self):
        phantom = make_phantom(fold_amplitude=0.3, fold_wavelength=1.0)
        cov = coverage_holes([], make_intrinsics(), phantom, cells_u=200, u_range=(1.0, 2.0))
        expected, _ = quad(lambda u: 2 * np.pi * float(phantom.r(u)) * np.sqrt(1.0 + float(phantom.dr_du(u)) ** 2),
                           1.0, 2.0)
        assert cov.cell_area.sum() == pytest.approx(expected, rel=1e-3)
        # los flancos de los pliegues pesan más que r·Δu·Δθ
        assert cov.cell_area.sum() > 1.3 * 2 * np.pi

    def test_cell_areas_on_a_bent_tube(self):
        phantom = make_phantom(fold_amplitude=0.0, centerline="arc", arc_radius=5.0)
        cov = coverage_holes([], make_intrinsics(), phantom, u_range=(1.0, 3.0))
        assert cov.cell_area.sum() == pytest.approx(2 * np.pi * 2.0, rel=1e-9)
        # el lado interno de la curva (θ ≈ 0) es más chico que el externo (θ ≈ π)
        assert np.all(cov.cell_area[:, 0] < cov.cell_area[:, 36])

    def test_invalid_range(self):
        with pytest.raises(InvalidInputError):
            coverage_holes([], make_intrinsics(), make_phantom(), u_range=(2.0, 1.0))


class TestTriangleMesh:

    def test_empty(self):
        mesh = TriangleMesh.empty()
        assert mesh.is_empty
        assert mesh.vertices.shape == (0, 3)

    def test_area(self):
        mesh = TriangleMesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]), np.array([[0, 1, 2]]))
        assert mesh.area == pytest.approx(0.5)
