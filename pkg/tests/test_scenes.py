import hashlib
import json
import math

import numpy as np
import pytest

from rayfield.geometry import Intrinsics, RigidPose, so3_exp
from rayfield.scenes import (
    DatasetError,
    Scene,
    build_scene,
    load_dataset,
    load_nerf_synthetic,
    look_at_pose,
    make_dataset,
    make_rig,
    noise_scale_for,
    quantize_image,
    render_ground_truth,
    save_dataset,
    sd_box,
    sd_sphere,
    sd_torus,
    sphere_trace,
    surface_samples,
)

K32 = Intrinsics.from_fov_x(32, 32, math.radians(45))


def unit_sphere_scene():
    return Scene(
        name="unit",
        seed=0,
        sdf_fn=lambda p: sd_sphere(p, (0, 0, 0), 1.0),
        color_fn=lambda p: np.full(p.shape[:-1] + (3,), 0.5),
        light=np.array([0.0, 0.0, 1.0]),
    )


class TestSdfPrimitives:
    def test_lipschitz_spot_check(self):
        rng = np.random.default_rng(0)
        for name in ("sphere", "sphere_box", "torus_box"):
            scene = build_scene(name, 0)
            p = rng.uniform(-1.5, 1.5, (500, 3))
            q = rng.uniform(-1.5, 1.5, (500, 3))
            lhs = np.abs(scene.sdf(p) - scene.sdf(q))
            rhs = np.linalg.norm(p - q, axis=1)
            assert (lhs <= rhs + 1e-9).all()

    def test_sphere_values(self):
        assert abs(sd_sphere(np.array([2.0, 0, 0]), (0, 0, 0), 0.5) - 1.5) < 1e-12
        assert sd_sphere(np.zeros(3), (0, 0, 0), 0.5) < 0

    def test_box_inside_outside(self):
        half = (0.5, 0.4, 0.3)
        assert sd_box(np.zeros(3), (0, 0, 0), half) < 0
        assert abs(sd_box(np.array([1.5, 0, 0]), (0, 0, 0), half) - 1.0) < 1e-12

    def test_torus_ring(self):
        d = sd_torus(np.array([0.45, 0.0, 0.0]), (0, 0, 0), 0.45, 0.1)
        assert abs(d + 0.1) < 1e-12

    def test_unknown_scene(self):
        with pytest.raises(DatasetError):
            build_scene("nope")

    def test_color_in_unit_cube(self):
        scene = build_scene("sphere_box", 3)
        rng = np.random.default_rng(1)
        c = scene.color(rng.uniform(-1, 1, (200, 3)))
        assert (c >= 0).all() and (c <= 1).all()


class TestSphereTrace:
    def test_axial_hit(self):
        scene = unit_sphere_scene()
        hit, t, pts, normals = sphere_trace(
            scene, np.array([[0.0, 0, 3.0]]), np.array([[0.0, 0, -1.0]])
        )
        assert hit[0]
        assert np.abs(pts[0] - [0, 0, 1.0]).max() < 1e-4
        assert np.abs(normals[0] - [0, 0, 1.0]).max() < 1e-3

    def test_miss(self):
        scene = unit_sphere_scene()
        hit, _, _, _ = sphere_trace(
            scene, np.array([[0.0, 0, 3.0]]), np.array([[0.0, 1.0, 0.0]])
        )
        assert not hit[0]

    def test_grazing_matches_quadratic_oracle(self):
        scene = unit_sphere_scene()
        o = np.array([0.0, 0.0, 3.0])
        rng = np.random.default_rng(2)
        for _ in range(50):
            target = rng.normal(size=3)
            target = target / np.linalg.norm(target) * rng.uniform(0.2, 1.6)
            d = target - o
            d /= np.linalg.norm(d)
            # quadratic |o + t d|^2 = 1
            b = 2 * o @ d
            c = o @ o - 1.0
            disc = b * b - 4 * c
            hit, t, _, _ = sphere_trace(scene, o[None], d[None], max_steps=256)
            if disc < -1e-6:
                assert not hit[0]
            elif disc > 1e-4:
                t_true = (-b - math.sqrt(disc)) / 2
                assert hit[0] and abs(t[0] - t_true) < 2e-3

    def test_eps_validation(self):
        with pytest.raises(ValueError):
            sphere_trace(unit_sphere_scene(), np.zeros((1, 3)), np.ones((1, 3)), eps=0.0)


class TestRenderGroundTruth:
    def test_empty_scene_is_white(self):
        empty = Scene(
            name="empty", seed=0,
            sdf_fn=lambda p: np.full(p.shape[:-1], 10.0),
            color_fn=lambda p: np.zeros(p.shape[:-1] + (3,)),
            light=np.array([0, 0, 1.0]),
        )
        img = render_ground_truth(empty, K32, RigidPose.identity())
        assert (img == 1.0).all()

    def test_flat_wall_constant_shading(self):
        wall = Scene(
            name="wall", seed=0,
            sdf_fn=lambda p: -(p[..., 2] + 2.0),  # solid z > -2, boundary z = -2
            color_fn=lambda p: np.full(p.shape[:-1] + (3,), 0.8),
            light=np.array([0, 0, 1.0]),
        )
        img = render_ground_truth(wall, K32, RigidPose.identity())
        assert img.std() < 1e-6  # uniform normal, uniform albedo

    def test_pose_equivariance(self):
        scene = build_scene("sphere_box", 0)
        R = so3_exp(np.array([0.3, -0.2, 0.5]))
        rotated = Scene(
            name="rot", seed=0,
            sdf_fn=lambda p: scene.sdf(p @ R),       # sdf'(p) = sdf(R^T p): scene rotated by R
            color_fn=lambda p: scene.color(p @ R),
            light=R @ scene.light,
        )
        pose = look_at_pose(np.array([2.5, 1.0, 1.2]))
        pose_rot = RigidPose(R @ pose.R, R @ pose.t)
        a = render_ground_truth(scene, K32, pose)
        b = render_ground_truth(rotated, K32, pose_rot)
        assert np.abs(a - b).max() < 5e-3  # tracing tolerance

    def test_golden_image_stable(self):
        scene = build_scene("sphere_box", 0)
        pose = look_at_pose(np.array([3.0, 0.0, 1.0]))
        img = quantize_image(render_ground_truth(scene, K32, pose))
        digest = hashlib.md5((img * 255).astype(np.uint8).tobytes()).hexdigest()
        again = quantize_image(render_ground_truth(scene, K32, pose))
        assert hashlib.md5((again * 255).astype(np.uint8).tobytes()).hexdigest() == digest
        assert img.min() < 0.9  # the object is actually in frame


class TestRig:
    def test_single_view_rejected(self):
        with pytest.raises(DatasetError):
            make_rig(1)

    def test_stratified_azimuths(self):
        rig = make_rig(4, elevation_range=(20.0, 20.0), rng=0)
        az = np.array([math.atan2(p.t[1], p.t[0]) for p in rig])
        gaps = np.degrees(np.diff(az)) % 360.0
        assert np.allclose(gaps, 90.0, atol=1e-9)

    def test_radius(self):
        rig = make_rig(7, radius=2.5, rng=3)
        for p in rig:
            assert abs(np.linalg.norm(p.t) - 2.5) < 1e-9

    def test_look_at_origin(self):
        rig = make_rig(5, rng=1)
        for p in rig:
            fwd = -p.R[:, 2]
            to_origin = -p.t / np.linalg.norm(p.t)
            assert np.abs(fwd - to_origin).max() < 1e-9


class TestMakeDataset:
    def test_zero_noise_keeps_ground_truth(self):
        scene = build_scene("sphere", 0)
        ds = make_dataset(scene, K32, n_train=3, n_test=0, noise="none", rng=0)
        for v in ds.views:
            assert np.array_equal(v.pose_init.R, v.pose_gt.R)
            assert np.array_equal(v.pose_init.t, v.pose_gt.t)

    def test_noise_presets(self):
        assert noise_scale_for("none") == 0.0
        assert noise_scale_for("high") == 0.15
        assert noise_scale_for("low") == 0.075
        with pytest.raises(DatasetError):
            noise_scale_for("medium")

    def test_seeded_reproducible(self):
        scene = build_scene("sphere_box", 0)
        a = make_dataset(scene, K32, n_train=3, n_test=1, noise="high", rng=5)
        b = make_dataset(scene, K32, n_train=3, n_test=1, noise="high", rng=5)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.image, vb.image)
            assert np.array_equal(va.pose_init.R, vb.pose_init.R)

    def test_splits(self):
        scene = build_scene("sphere", 0)
        ds = make_dataset(scene, K32, n_train=3, n_test=2, noise="low", rng=0)
        assert len(ds.train_views()) == 3 and len(ds.test_views()) == 2


class TestSurfaceSamples:
    def test_on_surface(self):
        scene = build_scene("sphere_box", 0)
        pts = surface_samples(scene, 500, rng=0)
        assert pts.shape == (500, 3)
        assert np.abs(scene.sdf(pts)).max() < 1e-5


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        scene = build_scene("sphere_box", 2)
        ds = make_dataset(scene, K32, n_train=3, n_test=1, noise="high", rng=2)
        save_dataset(ds, tmp_path, noise_preset="high")
        loaded = load_dataset(tmp_path)
        assert len(loaded.views) == 4
        assert loaded.scene is not None and loaded.scene.name == "sphere_box"
        assert loaded.noise_scale == ds.noise_scale
        for a, b in zip(ds.views, loaded.views):
            assert np.array_equal(a.image, b.image)  # 8-bit quantization agrees
            assert np.abs(a.pose_init.matrix() - b.pose_init.matrix()).max() < 1e-12
            assert np.abs(a.pose_gt.matrix() - b.pose_gt.matrix()).max() < 1e-12
            assert a.split == b.split
        assert (tmp_path / "images" / "0000.png").exists()
        assert (tmp_path / "ground_truth_poses.json").exists()

    def test_missing_dir_raises(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nothing")


class TestNerfSyntheticIngestion:
    def _write_fixture(self, root, n=2, angle_x=0.6911112070083618, bad_matrix=False):
        import imageio.v3 as iio

        (root / "train").mkdir(parents=True)
        frames = []
        rig = make_rig(n, rng=0)
        for i in range(n):
            img = (np.random.default_rng(i).uniform(0, 1, (8, 8, 3)) * 255).astype(np.uint8)
            iio.imwrite(root / "train" / f"r_{i}.png", img)
            m = rig[i].matrix().tolist()
            if bad_matrix and i == 1:
                m = [row[:3] for row in m[:3]]
            frames.append({"file_path": f"train/r_{i}", "transform_matrix": m})
        (root / "transforms_train.json").write_text(
            json.dumps({"camera_angle_x": angle_x, "frames": frames})
        )

    def test_minimal_fixture(self, tmp_path):
        self._write_fixture(tmp_path)
        ds = load_nerf_synthetic(tmp_path)
        assert len(ds.views) == 2
        v = ds.views[0]
        expected_fx = 0.5 * 8 / math.tan(0.5 * 0.6911112070083618)
        assert abs(v.K.fx - expected_fx) < 1e-9
        assert v.pose_gt is not None  # file poses are ground truth
        # orthonormality enforced by RigidPose construction
        assert np.abs(v.pose_gt.R.T @ v.pose_gt.R - np.eye(3)).max() < 1e-9

    def test_malformed_matrix_names_frame(self, tmp_path):
        self._write_fixture(tmp_path, bad_matrix=True)
        with pytest.raises(DatasetError, match="frame 1"):
            load_nerf_synthetic(tmp_path)

    def test_missing_image_reported(self, tmp_path):
        self._write_fixture(tmp_path)
        (tmp_path / "train" / "r_0.png").unlink()
        with pytest.raises(DatasetError, match="missing image"):
            load_nerf_synthetic(tmp_path)

    def test_rgba_composited_onto_white(self, tmp_path):
        import imageio.v3 as iio

        (tmp_path / "train").mkdir()
        rgba = np.zeros((4, 4, 4), dtype=np.uint8)
        rgba[..., 3] = 0  # fully transparent -> white
        iio.imwrite(tmp_path / "train" / "r_0.png", rgba)
        (tmp_path / "transforms_train.json").write_text(
            json.dumps(
                {
                    "camera_angle_x": 0.7,
                    "frames": [
                        {
                            "file_path": "train/r_0",
                            "transform_matrix": np.eye(4).tolist(),
                        }
                    ],
                }
            )
        )
        ds = load_nerf_synthetic(tmp_path)
        assert np.allclose(ds.views[0].image, 1.0)
