"""Tests de métricas de profundidad, Procrustes, Chamfer y agregación por folds."""
import numpy as np
import pytest
import trimesh
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from colon_recon.errors import DegenerateDataError, EmptySupportError, InvalidInputError
from colon_recon.evaluation import (
    TABLE_HEADER, aggregate_folds, chamfer_distance, depth_metrics, format_mean_std,
    _scaled_cloud, mean_metrics, mesh_chamfer, optimize_scale_chamfer, procrustes_align,
    sample_mesh_points, split_folds, table_row,
)
from colon_recon.fusion import TriangleMesh
from colon_recon.geometry import DepthMap, Mask


class TestDepthMetrics:

    def test_identity(self):
        gt = DepthMap.from_array(np.random.default_rng(0).uniform(1.0, 3.0, size=(6, 6)))
        m = depth_metrics(gt, gt)
        assert (m.abs_rel, m.sq_rel, m.rmse, m.log_rmse) == (0.0, 0.0, 0.0, 0.0)
        assert m.scale_applied == 1.0

    def test_global_scale_is_removed(self):
        gt = DepthMap.from_array(np.random.default_rng(1).uniform(1.0, 3.0, size=(6, 6)))
        m = depth_metrics(gt.scaled(3.0), gt)
        assert m.scale_applied == pytest.approx(1.0 / 3.0)
        assert m.rmse == pytest.approx(0.0, abs=1e-12)
        assert m.abs_rel == pytest.approx(0.0, abs=1e-12)

    def test_hand_oracle_2x2(self):
        gt = DepthMap.from_array([[1.0, 2.0], [3.0, 4.0]])
        pred = DepthMap.from_array([[2.0, 2.0], [3.0, 3.0]])
        m = depth_metrics(pred, gt)
        # medianas iguales (2.5): s = 1, diferencias (1, 0, 0, −1)
        assert m.scale_applied == 1.0
        assert m.abs_rel == pytest.approx((1.0 + 0.25) / 4.0, abs=1e-15)
        assert m.sq_rel == pytest.approx((1.0 + 0.25) / 4.0, abs=1e-15)
        assert m.rmse == pytest.approx(np.sqrt(0.5), abs=1e-15)
        assert m.log_rmse == pytest.approx(np.sqrt((np.log(2.0) ** 2 + np.log(0.75) ** 2) / 4.0), abs=1e-15)

    def test_prediction_scale_invariance(self):
        rng = np.random.default_rng(2)
        gt = DepthMap.from_array(rng.uniform(1.0, 3.0, size=(8, 8)))
        pred = DepthMap.from_array(rng.uniform(1.0, 3.0, size=(8, 8)))
        a = depth_metrics(pred, gt)
        b = depth_metrics(pred.scaled(7.3), gt)
        for key in ("abs_rel", "sq_rel", "rmse", "log_rmse"):
            assert getattr(b, key) == pytest.approx(getattr(a, key), abs=1e-12)

    def test_mask_restricts_support(self):
        gt = DepthMap.from_array([[1.0, 2.0], [3.0, 4.0]])
        pred = DepthMap.from_array([[1.0, 2.0], [3.0, 40.0]])
        m = depth_metrics(pred, gt, Mask.from_bool([[True, True], [True, False]]))
        assert m.rmse == pytest.approx(0.0, abs=1e-15)

    def test_empty_support(self):
        gt = DepthMap.from_array(np.ones((2, 2)))
        with pytest.raises(EmptySupportError):
            depth_metrics(gt, gt, Mask(np.zeros((2, 2))))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            depth_metrics(DepthMap.from_array(np.ones((2, 2))), DepthMap.from_array(np.ones((3, 3))))


class TestProcrustes:

    def test_recovers_similarity(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(50, 3))
        R = Rotation.from_rotvec([0.3, -0.5, 0.9]).as_matrix()
        t = np.array([1.0, -2.0, 0.5])
        b = 2.5 * a @ R.T + t
        result = procrustes_align(a, b)
        np.testing.assert_allclose(result.rotation, R, atol=1e-9)
        np.testing.assert_allclose(result.translation, t, atol=1e-9)
        assert result.scale == pytest.approx(2.5, abs=1e-9)
        assert result.residual <= 1e-9
        np.testing.assert_allclose(result.apply(a), b, atol=1e-9)

    def test_without_scale(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(20, 3))
        R = Rotation.from_rotvec([0.0, 0.2, 0.0]).as_matrix()
        result = procrustes_align(a, 2.0 * a @ R.T, with_scale=False)
        assert result.scale == 1.0
        np.testing.assert_allclose(result.rotation, R, atol=1e-9)

    def test_reflection_is_never_returned(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(20, 3))
        result = procrustes_align(a, a * np.array([1.0, 1.0, -1.0]))
        assert np.linalg.det(result.rotation) == pytest.approx(1.0)

    def test_collinear_points(self):
        a = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateDataError):
            procrustes_align(a, a)

    def test_too_few_points(self):
        with pytest.raises(InvalidInputError):
            procrustes_align(np.eye(3)[:2], np.eye(3)[:2])


class TestChamfer:

    def test_one_way_and_symmetric(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        assert chamfer_distance(a, b) == 1.0
        assert chamfer_distance(b, a) == 2.0
        assert chamfer_distance(a, b, direction="symmetric") == 1.5

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(-1.0, 1.0, size=(1000, 3))
        b = rng.uniform(-1.0, 1.0, size=(1000, 3))
        brute = float(np.mean(cdist(a, b).min(axis=1)))
        assert chamfer_distance(a, b) == pytest.approx(brute, abs=1e-12)

    def test_empty_cloud(self):
        with pytest.raises(InvalidInputError):
            chamfer_distance(np.zeros((0, 3)), np.zeros((3, 3)))

    def test_unknown_direction(self):
        with pytest.raises(InvalidInputError):
            chamfer_distance(np.zeros((1, 3)), np.zeros((1, 3)), direction="both")


class TestScaleOptimization:

    def test_recovers_scale_without_procrustes_scale(self):
        rng = np.random.default_rng(7)
        recon = rng.uniform(-1.0, 1.0, size=(300, 3))
        R = Rotation.from_rotvec([0.1, 0.2, -0.3]).as_matrix()
        gt = 1.7 * (recon - recon.mean(axis=0)) @ R.T + np.array([0.5, 0.0, -1.0])
        aligned = procrustes_align(recon, gt, with_scale=False)
        scale = optimize_scale_chamfer(gt, recon, aligned)
        assert scale == pytest.approx(1.7, abs=1e-3)

    def test_never_worse_than_procrustes_scale(self):
        rng = np.random.default_rng(8)
        gt = rng.uniform(-1.0, 1.0, size=(200, 3))
        recon = gt + rng.normal(scale=0.05, size=gt.shape)
        aligned = procrustes_align(recon, gt)
        scale = optimize_scale_chamfer(gt, recon, aligned)
        at_best = chamfer_distance(gt, _scaled_cloud(recon, aligned, scale))
        at_procrustes = chamfer_distance(gt, _scaled_cloud(recon, aligned, aligned.scale))
        assert at_best <= at_procrustes


def _sphere_mesh(radius=1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    tm = trimesh.creation.icosphere(subdivisions=3, radius=radius)
    return TriangleMesh(np.asarray(tm.vertices) + np.asarray(center), np.asarray(tm.faces))


class TestMeshChamfer:

    def test_sampling_is_seeded(self):
        mesh = _sphere_mesh()
        a = sample_mesh_points(mesh, 500, seed=3)
        b = sample_mesh_points(mesh, 500, seed=3)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=2e-2)

    def test_empty_mesh_rejected(self):
        with pytest.raises(InvalidInputError):
            sample_mesh_points(TriangleMesh.empty(), 10)

    def test_similar_meshes_align(self):
        centers_gt = np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [0.0, 0.3, 0.0], [0.1, 0.1, 0.4]])
        # reconstrucción a la mitad de escala y desplazada
        centers_recon = 0.5 * centers_gt + np.array([1.0, 0.0, 0.0])
        gt = _sphere_mesh(1.0)
        recon = _sphere_mesh(0.5, center=(1.0, 0.0, 0.0))
        result = mesh_chamfer(gt, recon, centers_gt, centers_recon, samples=20000)
        assert result["procrustes_scale"] == pytest.approx(2.0, abs=1e-9)
        assert result["chamfer"] <= result["chamfer_procrustes"] + 1e-12
        assert result["chamfer"] < 0.05


class TestFolds:

    def test_contiguous_split(self):
        ids = [f"{i:06d}" for i in range(10)]
        folds = split_folds(ids[::-1], k=5)
        assert folds == [ids[0:2], ids[2:4], ids[4:6], ids[6:8], ids[8:10]]

    def test_more_folds_than_frames(self):
        assert split_folds(["a", "b"], k=5) == [["a"], ["b"]]

    def test_invalid_k(self):
        with pytest.raises(InvalidInputError):
            split_folds(["a"], k=0)

    def test_two_fold_aggregate(self):
        agg = aggregate_folds([{"rmse": 0.021, "chamfer": 0.030}, {"rmse": 0.055, "chamfer": 0.046}])
        assert agg["rmse"] == pytest.approx((0.038, 0.017))
        assert agg["chamfer"] == pytest.approx((0.038, 0.008))
        assert format_mean_std(*agg["rmse"]) == "0.038 ± 0.017"

    def test_mean_metrics(self):
        gt = DepthMap.from_array([[1.0, 2.0], [3.0, 4.0]])
        pred = DepthMap.from_array([[2.0, 2.0], [3.0, 3.0]])
        means = mean_metrics([depth_metrics(gt, gt), depth_metrics(pred, gt)])
        assert means["rmse"] == pytest.approx(np.sqrt(0.5) / 2.0)
        with pytest.raises(EmptySupportError):
            mean_metrics([])

    def test_table_row(self):
        agg = {"abs_rel": (0.1, 0.01), "sq_rel": (0.2, 0.02), "rmse": (0.3, 0.03), "log_rmse": (0.4, 0.04)}
        row = table_row("flat 1×NR", agg)
        assert row == "flat 1×NR | 0.100 ± 0.010 | 0.200 ± 0.020 | 0.300 ± 0.030 | 0.400 ± 0.040 | -"
        assert TABLE_HEADER.count("|") == row.count("|")
