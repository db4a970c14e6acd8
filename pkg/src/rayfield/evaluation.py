"""Evaluation: image metrics, mesh extraction + distances, pose refinement.

View-synthesis metrics follow the common protocol for bundle-adjusting
fields: because the optimized scene lives in a gauge-drifted frame, a test
pose is first mapped through the similarity transform recovered from the
training poses and then refined photometrically against the frozen field
before PSNR/SSIM are measured.

Mesh metrics are computed in box-normalized units (coordinates divided by
the largest bounding-box extent) so the inlier threshold is resolution- and
scale-independent.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy.signal import convolve2d
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _sk_marching_cubes

from .geometry import (
    Intrinsics,
    PoseParam,
    RigidPose,
    SimilarityTransform,
    rays_through_pixels,
)
from .nets import FieldModel
from .pipeline import TrainState
from .render import render_rays
from .scenes import Scene, surface_samples


class MetricError(ValueError):
    pass


class ImageTooSmallError(MetricError):
    pass


class EmptySurfaceError(MetricError):
    pass


# ---------------------------------------------------------------------------
# Image metrics
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def ssim_metric(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), channel-averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < 11:
        raise ImageTooSmallError("SSIM needs images at least 11 pixels per side")
    k = _gaussian_kernel()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx = convolve2d(x, k, mode="valid")
        my = convolve2d(y, k, mode="valid")
        mxx = convolve2d(x * x, k, mode="valid")
        myy = convolve2d(y * y, k, mode="valid")
        mxy = convolve2d(x * y, k, mode="valid")
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + _SSIM_C1) * (2 * cxy + _SSIM_C2)) / (
            (mx * mx + my * my + _SSIM_C1) * (vx + vy + _SSIM_C2)
        )
        vals.append(s.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Mesh extraction and distances
# ---------------------------------------------------------------------------


def field_sdf_numpy(model: FieldModel, iteration: int, chunk: int = 65536):
    """Chunked numpy-in/numpy-out SDF evaluator over the trained field."""

    def fn(points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points), dtype=np.float64)
        with torch.no_grad():
            for i in range(0, len(points), chunk):
                p = torch.from_numpy(points[i : i + chunk]).to(model.dtype_)
                feats = model.point_features(p, iteration)
                sdf, _ = model.geometry(feats, p)
                out[i : i + chunk] = sdf.double().numpy()
        return out

    return fn


def extract_mesh(
    sdf_fn,
    bounding_box=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    resolution: int = 96,
) -> tuple[np.ndarray, np.ndarray]:
    """Marching cubes over the SDF sampled on a resolution^3 lattice.

    ``sdf_fn`` maps [N,3] numpy points to [N] SDF values.  Returns
    ``(vertices [V,3], faces [F,3])`` in world coordinates; raises
    :class:`EmptySurfaceError` when the lattice contains no sign change.
    """
    if resolution < 16:
        raise MetricError("mesh resolution must be >= 16")
    lo = np.asarray(bounding_box[0], dtype=np.float64)
    hi = np.asarray(bounding_box[1], dtype=np.float64)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack((xx, yy, zz), axis=-1).reshape(-1, 3)
    vol = sdf_fn(pts).reshape(resolution, resolution, resolution)
    if vol.min() >= 0.0 or vol.max() <= 0.0:
        raise EmptySurfaceError("SDF has no zero crossing inside the bounding box")
    spacing = tuple((hi - lo) / (resolution - 1))
    verts, faces, _, _ = _sk_marching_cubes(vol, level=0.0, spacing=spacing)
    return verts + lo, faces.astype(np.int64)


def sample_mesh_surface(verts: np.ndarray, faces: np.ndarray, n: int, rng=0) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh surface."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    tri = verts[faces]  # [F,3,3]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=-1)
    if areas.sum() <= 0:
        raise MetricError("mesh has zero surface area")
    idx = rng.choice(len(faces), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[idx]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def chamfer_and_hausdorff(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """Chamfer distance (mean of directed means) and symmetric Hausdorff."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(pred) == 0 or len(ref) == 0:
        raise MetricError("point sets must be non-empty")
    d_pr = cKDTree(ref).query(pred)[0]
    d_rp = cKDTree(pred).query(ref)[0]
    cd = 0.5 * (float(d_pr.mean()) + float(d_rp.mean()))
    hd = max(float(d_pr.max()), float(d_rp.max()))
    return cd, hd


def precision_recall_f(
    pred: np.ndarray, ref: np.ndarray, tau: float = 0.01
) -> tuple[float, float, float]:
    """Inlier percentages at threshold tau and their F-score."""
    if tau <= 0:
        raise MetricError("tau must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(pred) == 0 or len(ref) == 0:
        raise MetricError("point sets must be non-empty")
    d_pr = cKDTree(ref).query(pred)[0]
    d_rp = cKDTree(pred).query(ref)[0]
    p = 100.0 * float((d_pr <= tau).mean())
    r = 100.0 * float((d_rp <= tau).mean())
    f = 0.0 if p + r == 0 else 2.0 * p * r / (p + r)
    return p, r, f


def icp_align(
    src: np.ndarray, dst: np.ndarray, max_iterations: int = 50, tol: float = 1e-6
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Point-to-point ICP; returns (R, t, src_aligned) minimizing NN distances."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    tree = cKDTree(dst)
    R = np.eye(3)
    t = np.zeros(3)
    cur = src.copy()
    prev = np.inf
    for _ in range(max_iterations):
        d, idx = tree.query(cur)
        err = float((d**2).mean())
        if prev - err < tol:
            break
        prev = err
        target = dst[idx]
        mu_s, mu_t = cur.mean(0), target.mean(0)
        H = (cur - mu_s).T @ (target - mu_t)
        U, _, Vt = np.linalg.svd(H)
        S = np.eye(3)
        if np.linalg.det(Vt.T @ U.T) < 0:
            S[2, 2] = -1
        dR = Vt.T @ S @ U.T
        dt = mu_t - dR @ mu_s
        cur = cur @ dR.T + dt
        R = dR @ R
        t = dR @ t + dt
    return R, t, cur


def mesh_metrics(
    verts: np.ndarray,
    faces: np.ndarray,
    scene: Scene,
    sim: SimilarityTransform | None = None,
    n_pred: int = 30000,
    n_ref: int = 20000,
    tau: float = 0.01,
    use_icp: bool = False,
    box_extent: float = 2.0,
    rng=0,
) -> dict:
    """Distance metrics of an extracted mesh against the analytic surface.

    Vertices are first mapped by ``sim`` (the gauge recovered from training
    poses) when given, optionally ICP-refined, then all points are divided by
    ``box_extent`` so distances are in box-normalized units.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if sim is not None:
        verts = sim.apply_points(verts)
    pred = sample_mesh_surface(verts, faces, n_pred, rng)
    ref = surface_samples(scene, n_ref, rng)
    if use_icp:
        _, _, pred = icp_align(pred, ref)
    pred = pred / box_extent
    refn = ref / box_extent
    cd, hd = chamfer_and_hausdorff(pred, refn)
    p, r, f = precision_recall_f(pred, refn, tau)
    return {
        "chamfer": cd,
        "hausdorff": hd,
        "precision": p,
        "recall": r,
        "fscore": f,
    }


# ---------------------------------------------------------------------------
# Rendering and test-time pose refinement
# ---------------------------------------------------------------------------


def render_image(
    model: FieldModel,
    K: Intrinsics,
    pose: RigidPose,
    near: float,
    far: float,
    n_samples: int = 24,
    iteration: int | None = None,
    background=(1.0, 1.0, 1.0),
    chunk: int = 4096,
) -> np.ndarray:
    """Deterministic full-frame render (midpoint sampling, no gradients)."""
    it = iteration if iteration is not None else 10**9
    vv, uu = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
    uv = torch.from_numpy(
        np.stack((uu, vv), axis=-1).reshape(-1, 2).astype(np.float64)
    )
    R = torch.from_numpy(pose.R)
    t = torch.from_numpy(pose.t)
    edges = torch.linspace(near, far, n_samples + 1, dtype=torch.float64)
    mids = 0.5 * (edges[:-1] + edges[1:])
    out = np.empty((K.height * K.width, 3), dtype=np.float64)
    for i in range(0, len(uv), chunk):
        o, d = rays_through_pixels(K, R, t, uv[i : i + chunk])
        tv = mids.unsqueeze(0).expand(len(o), n_samples)
        res = render_rays(model, o, d, tv, it, background=background, create_graph=False)
        out[i : i + chunk] = res.color.detach().double().numpy()
    return out.reshape(K.height, K.width, 3)


def test_time_refine(
    state: TrainState,
    image: np.ndarray,
    K: Intrinsics,
    init_pose: RigidPose,
    steps: int = 150,
    lr: float = 2e-3,
    rays_per_step: int = 192,
    near: float | None = None,
    far: float | None = None,
    n_samples: int = 24,
    background=(1.0, 1.0, 1.0),
    seed: int = 0,
    return_render: bool = False,
):
    """Photometric-only refinement of one view's pose against the frozen field.

    Only the pose parameters move; the field and networks stay fixed.
    Returns the refined pose and the full-frame PSNR against ``image``
    (plus the rendered frame when ``return_render`` is set).
    """
    model = state.model
    if near is None or far is None:
        raise MetricError("test_time_refine needs explicit near/far")
    it = state.iteration
    pose_param = PoseParam.from_pose(init_pose)
    req = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        if steps > 0:
            opt = torch.optim.Adam(pose_param.parameters(), lr=lr)
            gen = torch.Generator().manual_seed(seed)
            target = torch.from_numpy(np.asarray(image, dtype=np.float64))
            edges = torch.linspace(near, far, n_samples + 1, dtype=torch.float64)
            lo, hi = edges[:-1], edges[1:]
            for step in range(steps):
                px = torch.stack(
                    (
                        torch.randint(0, K.width, (rays_per_step,), generator=gen),
                        torch.randint(0, K.height, (rays_per_step,), generator=gen),
                    ),
                    dim=-1,
                ).to(torch.float64)
                R, t = pose_param.matrices()
                o, d = rays_through_pixels(K, R, t, px)
                u = torch.rand((rays_per_step, n_samples), generator=gen, dtype=torch.float64)
                tv = lo + u * (hi - lo)
                res = render_rays(
                    model, o, d, tv, it, background=background, create_graph=True
                )
                tgt = target[px[:, 1].long(), px[:, 0].long()].to(res.color.dtype)
                loss = ((res.color - tgt) ** 2).mean()
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
    finally:
        for p, r in zip(model.parameters(), req):
            p.requires_grad_(r)
    refined = pose_param.to_rigid()
    rendered = render_image(
        model, K, refined, near, far, n_samples=n_samples, iteration=it, background=background
    )
    value = psnr(rendered, np.asarray(image, dtype=np.float64))
    if return_render:
        return refined, value, rendered
    return refined, value
