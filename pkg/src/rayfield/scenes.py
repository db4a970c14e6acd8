"""Synthetic test scenes and dataset I/O.

A scene is an analytic signed-distance field plus a procedural color field
with enough texture for keypoint matching to be meaningful.  Ground-truth
images are rendered by sphere tracing with Lambertian shading against a
fixed directional light; datasets pair those images with true poses and
noise-perturbed initial poses.

The on-disk layout written by :func:`save_dataset`::

    images/0000.png ...          8-bit renders
    transforms.json              initial (noisy) poses, NeRF-Synthetic style
    ground_truth_poses.json      true poses (synthetic scenes only)
    scene.json                   analytic scene descriptor + noise record
    matches.txt                  written separately by the matching stage

Standard NeRF-Synthetic directories (``transforms_train.json`` + image
files) are also ingested; there the file poses are treated as ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from .geometry import Intrinsics, RigidPose, perturb_pose

NOISE_PRESETS = ("none", "low", "high")
DEFAULT_HIGH_NOISE = 0.15


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Analytic SDF primitives (all Lipschitz-1)
# ---------------------------------------------------------------------------


def sd_sphere(p: np.ndarray, center, radius: float) -> np.ndarray:
    return np.linalg.norm(p - np.asarray(center), axis=-1) - radius


def sd_box(p: np.ndarray, center, half) -> np.ndarray:
    q = np.abs(p - np.asarray(center)) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def sd_torus(p: np.ndarray, center, major: float, minor: float) -> np.ndarray:
    q = p - np.asarray(center)
    ring = np.hypot(np.linalg.norm(q[..., :2], axis=-1) - major, q[..., 2])
    return ring - minor


def op_union(*ds: np.ndarray) -> np.ndarray:
    out = ds[0]
    for d in ds[1:]:
        out = np.minimum(out, d)
    return out


def op_subtract(d_a: np.ndarray, d_b: np.ndarray) -> np.ndarray:
    return np.maximum(d_a, -d_b)


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    """Analytic SDF + procedural color field + one directional light."""

    name: str
    seed: int
    sdf_fn: object
    color_fn: object
    light: np.ndarray

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return self.sdf_fn(np.asarray(p, dtype=np.float64))

    def color(self, p: np.ndarray) -> np.ndarray:
        return self.color_fn(np.asarray(p, dtype=np.float64))

    def normal(self, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Central-difference SDF gradient, normalized."""
        p = np.asarray(p, dtype=np.float64)
        g = np.empty_like(p)
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = h
            g[..., i] = self.sdf(p + dp) - self.sdf(p - dp)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(n, 1e-12)


def _color_lattice(seed: int, period: float = 0.25, extent: float = 2.0):
    """Trilinearly interpolated random color grid plus a stripe modulation."""
    rng = np.random.default_rng(seed)
    n = int(round(2 * extent / period)) + 2
    grid = rng.uniform(0.15, 1.0, size=(n, n, n, 3))
    stripe_dir = np.array([1.0, 0.6, 0.3])
    stripe_dir /= np.linalg.norm(stripe_dir)

    def color(p: np.ndarray) -> np.ndarray:
        q = (p + extent) / period
        q = np.clip(q, 0.0, n - 1.001)
        i0 = np.floor(q).astype(np.int64)
        f = q - i0
        out = np.zeros(p.shape[:-1] + (3,))
        for corner in range(8):
            dx, dy, dz = corner >> 2 & 1, corner >> 1 & 1, corner & 1
            w = (
                (dx * f[..., 0] + (1 - dx) * (1 - f[..., 0]))
                * (dy * f[..., 1] + (1 - dy) * (1 - f[..., 1]))
                * (dz * f[..., 2] + (1 - dz) * (1 - f[..., 2]))
            )
            out += w[..., None] * grid[i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz]
        stripes = 0.5 + 0.5 * np.sin(2.0 * math.pi * (p @ stripe_dir) / 0.2)
        return np.clip(out * (0.7 + 0.3 * stripes[..., None]), 0.0, 1.0)

    return color


_LIGHT = np.array([0.35, 0.25, 0.9])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

SCENE_NAMES = ("sphere", "sphere_box", "torus_box")


def build_scene(name: str, seed: int = 0) -> Scene:
    """Construct one of the named analytic scenes."""
    if name == "sphere":
        sdf = lambda p: sd_sphere(p, (0.0, 0.0, 0.0), 0.6)
    elif name == "sphere_box":
        sdf = lambda p: op_union(
            sd_sphere(p, (-0.32, 0.08, 0.05), 0.42),
            sd_box(p, (0.34, -0.08, -0.05), (0.30, 0.26, 0.28)),
        )
    elif name == "torus_box":
        sdf = lambda p: op_union(
            sd_torus(p, (0.0, 0.0, -0.15), 0.45, 0.16),
            sd_box(p, (0.0, 0.0, 0.25), (0.22, 0.22, 0.18)),
        )
    else:
        raise DatasetError(f"unknown scene '{name}' (expected one of {SCENE_NAMES})")
    return Scene(
        name=name, seed=seed, sdf_fn=sdf, color_fn=_color_lattice(seed), light=_LIGHT.copy()
    )


# ---------------------------------------------------------------------------
# Sphere tracing and ground-truth rendering
# ---------------------------------------------------------------------------


def sphere_trace(
    scene: Scene,
    origins: np.ndarray,
    dirs: np.ndarray,
    max_steps: int = 128,
    eps: float = 1e-4,
    t_max: float = 12.0,
):
    """March rays against the analytic SDF.

    Returns ``(hit [N] bool, t [N], points [N,3], normals [N,3])``; ``t`` and
    the derived entries are meaningful only where ``hit`` is set.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_steps):
        p = origins[active] + t[active, None] * dirs[active]
        s = scene.sdf(p)
        newly = np.abs(s) < eps
        hit[active[newly]] = True
        t[active] += s
        active = active[~newly & (t[active] + s <= t_max)]
        if active.size == 0:
            break
    points = origins + t[:, None] * dirs
    normals = np.zeros_like(points)
    if hit.any():
        normals[hit] = scene.normal(points[hit])
    return hit, t, points, normals


def _pixel_dirs_world(K: Intrinsics, pose: RigidPose, uv: np.ndarray) -> np.ndarray:
    u = uv[..., 0] + 0.5
    v = uv[..., 1] + 0.5
    d = np.stack(
        ((u - K.cx) / K.fx, -(v - K.cy) / K.fy, -np.ones_like(u)), axis=-1
    )
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ pose.R.T


def render_ground_truth(
    scene: Scene, K: Intrinsics, pose: RigidPose, background: float = 1.0
) -> np.ndarray:
    """Sphere-traced, Lambertian-shaded reference image, float in [0, 1]."""
    vv, uu = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
    uv = np.stack((uu, vv), axis=-1).reshape(-1, 2).astype(np.float64)
    dirs = _pixel_dirs_world(K, pose, uv)
    origins = np.broadcast_to(pose.t, dirs.shape)
    hit, _, points, normals = sphere_trace(scene, origins, dirs)
    img = np.full((K.height * K.width, 3), background, dtype=np.float64)
    if hit.any():
        albedo = scene.color(points[hit])
        lam = 0.2 + 0.8 * np.maximum(0.0, normals[hit] @ scene.light)
        img[hit] = albedo * lam[:, None]
    return img.reshape(K.height, K.width, 3)


# ---------------------------------------------------------------------------
# Camera rigs and datasets
# ---------------------------------------------------------------------------


def look_at_pose(center: np.ndarray, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-to-world pose at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    z = -fwd
    x = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.cross(fwd, (0.0, 1.0, 0.0))
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    return RigidPose(np.stack((x, y, z), axis=1), center)


def make_rig(
    n_views: int,
    radius: float = 3.0,
    elevation_range: tuple[float, float] = (10.0, 45.0),
    rng=0,
) -> list[RigidPose]:
    """Cameras on a sphere around the origin with stratified azimuths."""
    if n_views < 2:
        raise DatasetError("a rig needs at least 2 views")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    lo, hi = elevation_range
    offset = rng.uniform(0.15, 0.85)  # shared, so azimuths stay exactly stratified
    poses = []
    for i in range(n_views):
        az = 2.0 * math.pi * (i + offset) / n_views
        el = math.radians(rng.uniform(lo, hi))
        c = radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        poses.append(look_at_pose(c))
    return poses


@dataclass
class View:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    K: Intrinsics
    pose_init: RigidPose
    pose_gt: RigidPose | None
    split: str = "train"


@dataclass
class Dataset:
    views: list[View]
    scene: Scene | None = None
    noise_scale: float = 0.0

    def train_views(self) -> list[View]:
        return [v for v in self.views if v.split == "train"]

    def test_views(self) -> list[View]:
        return [v for v in self.views if v.split == "test"]


def noise_scale_for(preset: str, n_high: float = DEFAULT_HIGH_NOISE) -> float:
    """Noise presets: high = n_high, low = n_high / 2, none = 0."""
    if preset not in NOISE_PRESETS:
        raise DatasetError(f"unknown noise preset '{preset}'")
    return {"none": 0.0, "low": 0.5 * n_high, "high": n_high}[preset]


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits so in-memory and on-disk pixels agree."""
    return (np.clip(np.round(img * 255.0), 0, 255) / 255.0).astype(np.float32)


def make_dataset(
    scene: Scene,
    K: Intrinsics,
    n_train: int = 20,
    n_test: int = 4,
    radius: float = 3.0,
    noise: float | str = "high",
    rng=0,
) -> Dataset:
    """Render a dataset at ground-truth poses and attach perturbed initial poses."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n = noise_scale_for(noise) if isinstance(noise, str) else float(noise)
    poses = make_rig(n_train + n_test, radius=radius, rng=rng)
    views = []
    for i, pose in enumerate(poses):
        img = quantize_image(render_ground_truth(scene, K, pose))
        views.append(
            View(
                image=img,
                K=K,
                pose_init=perturb_pose(pose, n, rng),
                pose_gt=pose,
                split="train" if i < n_train else "test",
            )
        )
    return Dataset(views=views, scene=scene, noise_scale=n)


def surface_samples(scene: Scene, n: int, rng=0, extent: float = 1.0) -> np.ndarray:
    """Uniform-ish samples on the zero level set via rejection + projection."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out: list[np.ndarray] = []
    total = 0
    for _ in range(200):
        p = rng.uniform(-extent, extent, size=(max(4 * n, 1024), 3))
        s = scene.sdf(p)
        p = p[np.abs(s) < 0.25]
        for _ in range(8):
            if p.size == 0:
                break
            p = p - scene.sdf(p)[:, None] * scene.normal(p)
        if p.size:
            keep = np.abs(scene.sdf(p)) < 1e-6
            p = p[keep]
            out.append(p)
            total += len(p)
        if total >= n:
            break
    if total < n:
        raise DatasetError("could not sample enough surface points")
    return np.concatenate(out)[:n]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir: str | Path, noise_preset: str | None = None) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    gt_frames = []
    for i, v in enumerate(ds.views):
        rel = f"images/{i:04d}"
        iio.imwrite(out / f"{rel}.png", (v.image * 255.0 + 0.5).astype(np.uint8))
        frames.append(
            {
                "file_path": rel,
                "transform_matrix": v.pose_init.matrix().tolist(),
                "split": v.split,
            }
        )
        if v.pose_gt is not None:
            gt_frames.append({"file_path": rel, "transform_matrix": v.pose_gt.matrix().tolist()})
    K = ds.views[0].K
    angle_x = 2.0 * math.atan(0.5 * K.width / K.fx)
    (out / "transforms.json").write_text(
        json.dumps({"camera_angle_x": angle_x, "frames": frames}, indent=1)
    )
    if gt_frames:
        (out / "ground_truth_poses.json").write_text(
            json.dumps({"frames": gt_frames}, indent=1)
        )
    if ds.scene is not None:
        (out / "scene.json").write_text(
            json.dumps(
                {
                    "name": ds.scene.name,
                    "seed": ds.scene.seed,
                    "noise_scale": ds.noise_scale,
                    "noise_preset": noise_preset,
                }
            )
        )


def _parse_matrix(entry: dict, where: str) -> np.ndarray:
    m = np.asarray(entry.get("transform_matrix"), dtype=np.float64)
    if m.shape != (4, 4):
        raise DatasetError(f"{where}: transform_matrix must be 4x4, got {m.shape}")
    return m


def _read_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    raw = iio.imread(path)
    img = raw.astype(np.float32) / 255.0
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    if img.shape[-1] == 4:
        a = img[..., 3:4]
        img = img[..., :3] * a + (1.0 - a)
    return img[..., :3]


def _frames_from_file(path: Path):
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"cannot parse {path}: {e}") from e
    if "camera_angle_x" not in data or "frames" not in data:
        raise DatasetError(f"{path}: expected keys camera_angle_x and frames")
    return float(data["camera_angle_x"]), data["frames"]


def _resolve_image(base: Path, file_path: str) -> Path:
    p = base / file_path
    if p.suffix.lower() in (".png", ".jpg", ".jpeg"):
        return p
    return p.with_suffix(".png")


def load_nerf_synthetic(dir_path: str | Path, splits: tuple[str, ...] = ("train", "test")) -> Dataset:
    """Ingest a NeRF-Synthetic-format directory; file poses become ground truth."""
    base = Path(dir_path)
    views = []
    found = False
    for split in splits:
        tf = base / f"transforms_{split}.json"
        if not tf.exists():
            continue
        found = True
        angle_x, frames = _frames_from_file(tf)
        for idx, fr in enumerate(frames):
            m = _parse_matrix(fr, f"{tf.name} frame {idx}")
            img = _read_image(_resolve_image(base, fr["file_path"]))
            h, w = img.shape[:2]
            fx = 0.5 * w / math.tan(0.5 * angle_x)
            K = Intrinsics(w, h, fx, fx, 0.5 * w, 0.5 * h)
            pose = RigidPose.from_matrix(m)
            views.append(View(image=img, K=K, pose_init=pose, pose_gt=pose, split=split))
    if not found:
        raise DatasetError(f"no transforms_*.json found under {base}")
    return Dataset(views=views)


def load_dataset(dir_path: str | Path) -> Dataset:
    """Load a dataset directory written by :func:`save_dataset`, or NeRF-Synthetic."""
    base = Path(dir_path)
    tf = base / "transforms.json"
    if not tf.exists():
        return load_nerf_synthetic(base)
    angle_x, frames = _frames_from_file(tf)
    gt_by_path = {}
    gt_file = base / "ground_truth_poses.json"
    if gt_file.exists():
        for idx, fr in enumerate(json.loads(gt_file.read_text())["frames"]):
            gt_by_path[fr["file_path"]] = _parse_matrix(fr, f"{gt_file.name} frame {idx}")
    views = []
    for idx, fr in enumerate(frames):
        m = _parse_matrix(fr, f"transforms.json frame {idx}")
        img = _read_image(_resolve_image(base, fr["file_path"]))
        h, w = img.shape[:2]
        fx = 0.5 * w / math.tan(0.5 * angle_x)
        K = Intrinsics(w, h, fx, fx, 0.5 * w, 0.5 * h)
        gt = gt_by_path.get(fr["file_path"])
        views.append(
            View(
                image=img,
                K=K,
                pose_init=RigidPose.from_matrix(m),
                pose_gt=None if gt is None else RigidPose.from_matrix(gt),
                split=fr.get("split", "train"),
            )
        )
    scene = None
    noise_scale = 0.0
    sc_file = base / "scene.json"
    if sc_file.exists():
        meta = json.loads(sc_file.read_text())
        scene = build_scene(meta["name"], meta["seed"])
        noise_scale = float(meta.get("noise_scale", 0.0))
    return Dataset(views=views, scene=scene, noise_scale=noise_scale)
