import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity as sk_ssim

from rayfield.evaluation import (
    EmptySurfaceError,
    ImageTooSmallError,
    MetricError,
    chamfer_and_hausdorff,
    extract_mesh,
    field_sdf_numpy,
    icp_align,
    mesh_metrics,
    precision_recall_f,
    psnr,
    render_image,
    sample_mesh_surface,
    ssim_metric,
)
from rayfield.evaluation import test_time_refine as refine_pose
from rayfield.geometry import so3_exp
from rayfield.scenes import build_scene


class TestPsnr:
    def test_identical_capped_at_100(self):
        img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        assert psnr(img, img) == 100.0

    def test_known_mse(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


class TestSsimMetric:
    def test_identical_is_one(self):
        img = np.random.default_rng(2).uniform(0, 1, (24, 24, 3))
        assert abs(ssim_metric(img, img) - 1.0) < 1e-12

    def test_matches_skimage(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, (48, 48, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        ours = ssim_metric(a, b)
        ref = sk_ssim(
            a,
            b,
            channel_axis=2,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
        )
        assert abs(ours - ref) < 2e-3  # skimage pads borders; we crop them

    def test_structured_difference_below_one(self):
        a = np.full((24, 24), 0.9)
        a[:12] = 0.1
        b = 1.0 - a
        assert ssim_metric(a, b) < 0.5

    def test_too_small(self):
        with pytest.raises(ImageTooSmallError):
            ssim_metric(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        assert abs(ssim_metric(a, b) - ssim_metric(b, a)) < 1e-12


class TestExtractMesh:
    def test_sphere_radii(self):
        sdf = lambda p: np.linalg.norm(p, axis=-1) - 0.5
        verts, faces = extract_mesh(sdf, resolution=64)
        cell = 2.0 / 63
        radii = np.linalg.norm(verts, axis=1)
        assert np.abs(radii - 0.5).max() <= 2 * cell
        assert len(faces) > 100

    def test_constant_positive_raises(self):
        with pytest.raises(EmptySurfaceError):
            extract_mesh(lambda p: np.full(len(p), 0.5), resolution=16)

    def test_box_aabb(self):
        half = np.array([0.4, 0.3, 0.25])
        def sdf(p):
            q = np.abs(p) - half
            return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(-1), 0)
        verts, _ = extract_mesh(sdf, resolution=64)
        cell = 2.0 / 63
        assert np.all(verts.max(0) <= half + 2 * cell)
        assert np.all(verts.max(0) >= half - 2 * cell)
        assert np.all(verts.min(0) >= -half - 2 * cell)

    def test_low_resolution_rejected(self):
        with pytest.raises(MetricError):
            extract_mesh(lambda p: np.ones(len(p)), resolution=8)


def brute_force_nn(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return d.min(axis=1)


class TestPointMetrics:
    def test_identical_sets(self):
        pts = np.random.default_rng(5).normal(size=(50, 3))
        assert chamfer_and_hausdorff(pts, pts) == (0.0, 0.0)
        assert precision_recall_f(pts, pts) == (100.0, 100.0, 100.0)

    def test_single_points(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[1.0, 0.0, 0.0]])
        assert chamfer_and_hausdorff(a, b) == (1.0, 1.0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(40, 3))
        b = rng.normal(size=(30, 3))
        cd, hd = chamfer_and_hausdorff(a, b)
        d_ab = brute_force_nn(a, b)
        d_ba = brute_force_nn(b, a)
        assert abs(cd - 0.5 * (d_ab.mean() + d_ba.mean())) < 1e-12
        assert abs(hd - max(d_ab.max(), d_ba.max())) < 1e-12

    def test_disjoint_far_sets_prf(self):
        a = np.zeros((5, 3))
        b = np.ones((5, 3))
        assert precision_recall_f(a, b, tau=0.01) == (0.0, 0.0, 0.0)

    def test_constructed_half_inlier(self):
        ref = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        pred = np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0], [6.0, 0, 0]])
        p, r, f = precision_recall_f(pred, ref, tau=0.01)
        assert p == 50.0 and r == 100.0
        assert abs(f - 200.0 / 3.0) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            chamfer_and_hausdorff(np.zeros((0, 3)), np.ones((3, 3)))


class TestSampling:
    def test_mesh_surface_samples_on_sphere(self):
        sdf = lambda p: np.linalg.norm(p, axis=-1) - 0.5
        verts, faces = extract_mesh(sdf, resolution=48)
        pts = sample_mesh_surface(verts, faces, 2000, rng=0)
        assert np.abs(np.linalg.norm(pts, axis=1) - 0.5).max() < 0.05


class TestIcp:
    def test_realigns_rotated_cloud(self):
        rng = np.random.default_rng(7)
        dst = rng.normal(size=(300, 3))
        R = so3_exp(np.array([0.05, -0.03, 0.08]))
        src = dst @ R.T + np.array([0.02, -0.01, 0.03])
        _, _, aligned = icp_align(src, dst)
        assert np.abs(aligned - dst).max() < 1e-6


class TestMeshMetrics:
    def test_analytic_sphere_against_itself(self):
        scene = build_scene("sphere", 0)
        sdf = lambda p: scene.sdf(p)
        verts, faces = extract_mesh(sdf, resolution=72)
        m = mesh_metrics(verts, faces, scene, n_pred=4000, n_ref=4000, rng=0)
        assert m["chamfer"] < 0.01  # box-normalized units
        assert m["fscore"] > 60.0


class TestFieldRendering:
    @pytest.fixture(scope="class")
    def trained_stub(self, tiny_dataset, tiny_matches):
        from rayfield.fieldvol import HashGridConfig, ProgressiveMask
        from rayfield.nets import FieldConfig
        from rayfield.pipeline import TrainConfig, build_state, train

        cfg = TrainConfig(
            iterations=30,
            warmup_iterations=3,
            rays_pairs_per_batch=2,
            patch_size=3,
            n_samples=8,
            grid=HashGridConfig(num_levels=4, base_resolution=4, finest_resolution=16, table_size_log2=8),
            mask=ProgressiveMask(start_level=2, step_iterations=10),
            field=FieldConfig(hidden=16, feat_dim=6, sh_degree=2),
            log_every=10,
        )
        state = build_state(tiny_dataset, cfg)
        train(state, tiny_dataset, tiny_matches, cfg)
        return state, cfg

    def test_field_sdf_has_surface(self, trained_stub):
        state, cfg = trained_stub
        sdf = field_sdf_numpy(state.model, state.iteration)
        verts, faces = extract_mesh(sdf, cfg.grid.bounding_box, resolution=24)
        assert len(verts) > 0

    def test_render_image_deterministic(self, trained_stub, tiny_dataset):
        state, cfg = trained_stub
        v = tiny_dataset.views[0]
        a = render_image(state.model, v.K, v.pose_gt, 1.5, 4.5, n_samples=8, iteration=30)
        b = render_image(state.model, v.K, v.pose_gt, 1.5, 4.5, n_samples=8, iteration=30)
        assert np.array_equal(a, b)
        assert a.shape == (32, 32, 3)

    def test_refine_zero_steps_keeps_pose(self, trained_stub, tiny_dataset):
        state, _ = trained_stub
        v = tiny_dataset.views[0]
        pose, value = refine_pose(
            state, v.image, v.K, v.pose_gt, steps=0, near=1.5, far=4.5, n_samples=8
        )
        assert np.abs(pose.matrix() - v.pose_gt.matrix()).max() < 1e-12
        assert isinstance(value, float)

    def test_refine_near_converged_pose_does_not_regress(self, trained_stub, tiny_dataset):
        state, _ = trained_stub
        v = tiny_dataset.views[0]
        _, before = refine_pose(
            state, v.image, v.K, v.pose_gt, steps=0, near=1.5, far=4.5, n_samples=8
        )
        _, after = refine_pose(
            state, v.image, v.K, v.pose_gt, steps=10, lr=1e-5,
            near=1.5, far=4.5, n_samples=8, seed=1,
        )
        assert after >= before - 0.1

    def test_refine_moves_pose_and_freezes_field(self, trained_stub, tiny_dataset):
        state, _ = trained_stub
        v = tiny_dataset.views[0]
        before = {k: p.clone() for k, p in state.model.state_dict().items()}
        pose, _ = refine_pose(
            state, v.image, v.K, v.pose_init, steps=5, near=1.5, far=4.5, n_samples=8
        )
        for k, p in state.model.state_dict().items():
            assert torch.equal(before[k], p), k
        assert np.abs(pose.matrix() - v.pose_init.matrix()).max() > 0
