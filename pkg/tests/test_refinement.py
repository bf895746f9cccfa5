"""Tests del refinamiento n×NR y de su minimizador."""
import numpy as np
import pytest

from colon_recon.errors import InvalidInputError
from colon_recon.evaluation import depth_metrics
from colon_recon.geometry import DepthMap, ImageRGB, NormalMap
from colon_recon.illumination import light_field, shade_lambertian
from colon_recon.phantom import make_phantom, make_trajectory, render_frame
from colon_recon.refinement import (
    RefinementConfig, build_pyramid, corrupted_init, flat_init, photometric_depth, refine_iteration,
    refine_multiscale,
)

from conftest import (
    angular_error_deg, make_intrinsics, plane_depth, plane_normals, render_enface_pair, sphere_cap,
)


def _noisy(normals: NormalMap, degrees: float, seed: int = 0) -> NormalMap:
    rng = np.random.default_rng(seed)
    noise = rng.normal(scale=np.deg2rad(degrees), size=normals.vectors.shape)
    return NormalMap.from_array(normals.vectors + noise)


def _rotated(normals: NormalMap, degrees: float, seed: int = 0) -> NormalMap:
    # cada normal gira exactamente `degrees` sobre un eje tangente al azar
    rng = np.random.default_rng(seed)
    n = normals.vectors
    axis = np.cross(n, rng.normal(size=n.shape))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.deg2rad(degrees)
    rotated = n * np.cos(angle) + np.cross(axis, n) * np.sin(angle)
    return NormalMap.from_array(rotated, normals.validity)


class TestRefinementConfig:

    def test_resolutions_double_until_input(self):
        config = RefinementConfig(iterations=3, base_resolution=32)
        assert config.resolutions(64, 48) == [(32, 24), (64, 48), (64, 48)]

    def test_resolutions_never_exceed_input(self):
        config = RefinementConfig(iterations=2, base_resolution=128)
        assert config.resolutions(64, 64) == [(64, 64), (64, 64)]

    def test_zero_iterations_rejected(self):
        with pytest.raises(InvalidInputError):
            RefinementConfig(iterations=0)

    def test_upsample_factor_is_fixed(self):
        with pytest.raises(InvalidInputError):
            RefinementConfig(upsample_factor=3)

    def test_from_config_section(self):
        config = RefinementConfig.from_config({"iterations": 4, "w_smooth": 0.2, "unrelated": 1}, mu=1.5)
        assert config.iterations == 4
        assert config.w_smooth == 0.2
        assert config.mu == 1.5


class TestRefineIteration:

    def setup_method(self):
        self.K = make_intrinsics(width=24, height=24)
        n = np.array([0.2, -0.1, -1.0])
        self.depth = plane_depth(self.K, n, -1.5)
        self.normals = plane_normals(self.K, n)
        self.field = light_field(self.depth, self.K, mu=2.0)
        self.image = shade_lambertian(self.normals, self.field)

    def test_ground_truth_plane_is_fixed_point(self):
        refined = refine_iteration(self.image, self.field, self.normals, RefinementConfig())
        assert angular_error_deg(refined.vectors, self.normals.vectors).max() <= 0.5

    def test_ground_truth_sphere_without_smoothing(self):
        K = make_intrinsics(width=24, height=24, fx=96.0, fy=96.0)
        depth, normals = sphere_cap(K)
        field = light_field(depth, K, mu=2.0)
        image = shade_lambertian(normals, field)
        refined = refine_iteration(image, field, normals, RefinementConfig(w_smooth=0.0))
        assert angular_error_deg(refined.vectors, normals.vectors).max() <= 0.5

    def test_energy_trace_is_non_increasing(self):
        noisy = _noisy(self.normals, 10.0)
        _, trace = refine_iteration(self.image, self.field, noisy, RefinementConfig(), return_trace=True)
        assert len(trace) > 1
        assert np.all(np.diff(trace) <= 0)

    def test_noisy_plane_gets_closer_to_truth(self):
        noisy = _rotated(self.normals, 10.0, seed=1)
        refined = refine_iteration(self.image, self.field, noisy, RefinementConfig())
        before = angular_error_deg(noisy.vectors, self.normals.vectors).mean()
        after = angular_error_deg(refined.vectors, self.normals.vectors).mean()
        assert after <= 0.5 * before

    def test_output_is_unit(self):
        refined = refine_iteration(self.image, self.field, _noisy(self.normals, 5.0), RefinementConfig())
        np.testing.assert_allclose(np.linalg.norm(refined.vectors[refined.validity], axis=-1), 1.0)

    def test_zero_steps_returns_input(self):
        noisy = _noisy(self.normals, 5.0)
        refined, trace = refine_iteration(self.image, self.field, noisy,
                                          RefinementConfig(max_optimizer_steps=0), return_trace=True)
        assert len(trace) == 1
        np.testing.assert_allclose(refined.vectors, noisy.vectors)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            refine_iteration(ImageRGB(np.zeros((8, 8, 3))), self.field, self.normals, RefinementConfig())


class TestInitializations:

    def test_flat_init(self):
        K = make_intrinsics(width=16, height=12)
        depth = flat_init(K, depth=2.0)
        assert depth.shape == (12, 16)
        assert np.all(depth.values == 2.0)

    def test_corrupted_init_bounds_and_determinism(self):
        K = make_intrinsics(width=32, height=32)
        gt = plane_depth(K, [0.1, 0.0, -1.0], -1.5)
        a = corrupted_init(gt, seed=4, amplitude=0.2)
        ratio = a.values / gt.values
        assert ratio.min() >= 0.8 - 1e-12
        assert ratio.max() <= 1.2 + 1e-12
        np.testing.assert_array_equal(a.values, corrupted_init(gt, seed=4, amplitude=0.2).values)
        assert not np.array_equal(a.values, corrupted_init(gt, seed=5, amplitude=0.2).values)

    def test_corrupted_init_keeps_invalid_pixels(self):
        values = np.full((8, 8), 2.0)
        values[0, 0] = np.nan
        out = corrupted_init(DepthMap.from_array(values), seed=0)
        assert not out.validity[0, 0]

    def test_corrupted_amplitude_range(self):
        with pytest.raises(InvalidInputError):
            corrupted_init(DepthMap.from_array(np.ones((4, 4))), amplitude=1.0)


@pytest.fixture(scope="module")
def enface_frame():
    K = make_intrinsics(fx=12.0, fy=12.0, width=32, height=32)
    image, depth, normals, _ = render_enface_pair(K)[0]
    return K, image, depth, normals


class TestRefineMultiscale:

    def test_per_iteration_outputs(self, enface_frame):
        K, image, _, _ = enface_frame
        config = RefinementConfig(iterations=2, base_resolution=16, max_optimizer_steps=20)
        state = refine_multiscale(image, flat_init(K), K, config)
        assert [d.shape for d in state.pred_depths] == [(16, 16), (32, 32)]
        assert len(state.pred_normals) == len(state.light_fields) == len(state.traces) == 2
        assert state.scale_index == 1
        assert state.depth.shape == (32, 32)
        assert state.energy_rows()[0][:2] == (1, 0)

    def test_integration_is_anchored_to_current_median(self, enface_frame):
        K, image, _, _ = enface_frame
        state = refine_multiscale(image, flat_init(K, depth=0.7), K,
                                  RefinementConfig(iterations=1, base_resolution=32, max_optimizer_steps=5))
        assert np.median(state.depth.values[state.depth.validity]) == pytest.approx(0.7, rel=1e-9)

    def test_pyramid_length_checked(self, enface_frame):
        K, image, _, _ = enface_frame
        config = RefinementConfig(iterations=2, base_resolution=16)
        pyramid = build_pyramid(image, [(16, 16)])
        with pytest.raises(InvalidInputError):
            refine_multiscale(pyramid, flat_init(K), K, config)

    def test_errors_carry_iteration_context(self, enface_frame):
        K, image, _, _ = enface_frame
        empty = DepthMap.from_array(np.full(K.shape, np.nan))
        with pytest.raises(InvalidInputError, match="iteración 1"):
            refine_multiscale(image, empty, K, RefinementConfig(iterations=1, base_resolution=32))


# ============================================================
# Re-estimación fotométrica
# ============================================================

class TestPhotometricDepth:

    def setup_method(self):
        self.K = make_intrinsics(width=24, height=24)
        n = np.array([0.3, -0.2, -1.0])
        self.depth = plane_depth(self.K, n, -1.5)
        normals = plane_normals(self.K, n)
        self.image = shade_lambertian(normals, light_field(self.depth, self.K, mu=2.0))

    def test_zero_evaluations_returns_input(self):
        out = photometric_depth(self.image, flat_init(self.K), self.K, mu=2.0, max_evaluations=0)
        assert np.all(out.values == 1.0)

    def test_keeps_median_of_input(self):
        start = flat_init(self.K, depth=0.8)
        out = photometric_depth(self.image, start, self.K, mu=2.0)
        assert out.validity.all()
        assert np.median(out.values) == pytest.approx(0.8, rel=1e-9)

    def test_flat_start_moves_toward_the_plane(self):
        start = flat_init(self.K)
        out = photometric_depth(self.image, start, self.K, mu=2.0)
        before = depth_metrics(start, self.depth).rmse
        after = depth_metrics(out, self.depth).rmse
        assert after < before

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            photometric_depth(self.image, DepthMap.from_array(np.ones((8, 8))), self.K, mu=2.0)


# ============================================================
# Secuencia en-face desde plano constante
# ============================================================

@pytest.fixture(scope="module")
def enface_sequence():
    K = make_intrinsics(fx=24.0, fy=24.0, width=64, height=64)
    phantom = make_phantom()
    trajectory = make_trajectory(phantom, "en-face", 10, seed=0)
    frames = [render_frame(phantom, pose, K) for pose in trajectory.poses()]
    return K, frames


class TestEnfaceSequence:

    def test_flat_init_halves_depth_error(self, enface_sequence):
        K, frames = enface_sequence
        config = RefinementConfig(iterations=4)
        gains = []
        for image, depth_gt, _ in frames:
            start = flat_init(K)
            state = refine_multiscale(image, start, K, config)
            before = depth_metrics(start, depth_gt).rmse
            after = depth_metrics(state.depth, depth_gt).rmse
            gains.append(1.0 - after / before)
        assert np.median(gains) >= 0.5

    def test_corrupted_init_improves(self, enface_sequence):
        K, frames = enface_sequence
        config = RefinementConfig(iterations=2)
        for image, depth_gt, _ in frames[:3]:
            start = corrupted_init(depth_gt, seed=3, amplitude=0.3)
            state = refine_multiscale(image, start, K, config)
            assert depth_metrics(state.depth, depth_gt).rmse < depth_metrics(start, depth_gt).rmse
