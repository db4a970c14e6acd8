"""End-to-end joint optimization of the field and all camera poses.

Every iteration samples a batch of matched key-ray pairs, expands each into a
bundle (key ray plus the auxiliary patch rays around its keypoint), renders
the bundles plus an equal number of uniformly random photometric rays, and
descends the weighted loss with one AdamW step over four parameter groups:
hash tables + networks, the density slope, and the per-view pose parameters.

Ablation switches reproduce the reduced variants: without enrichment the key
feature equals its own encoding, without coherency the blend weight is forced
to zero, and the geometric losses can be dropped individually.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .correspond import Correspondence, patch_scan_offsets
from .fieldvol import FeatureVolume, HashGridConfig, ProgressiveMask
from .geometry import PoseParam, pixel_to_camera_dirs, procrustes_align
from .losses import LossWeights, NonFiniteLossError, photometric_loss, ssim_patch_loss, total_loss
from .nets import FieldConfig, FieldModel, sh_encode
from .raymatch import enrich_key_feature, fuse_matched_colors, matchability
from .render import RayOutput, RaySamples, alphas_from_sdf, integrate
from .scenes import Dataset

WHITE = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    # schedule
    iterations: int = 5000
    warmup_iterations: int = 500
    # batching
    rays_pairs_per_batch: int = 4
    patch_size: int = 5
    photo_rays_per_batch: int | None = None  # None: same count as bundle rays
    # epipolar supervision is projection-only (no rendering) and depth-
    # decoupled, so it can afford a much larger correspondence subsample
    # than the rendered bundles; bundle pairs are always included.
    epipolar_pairs_per_batch: int = 512
    # ray sampling
    n_samples: int = 24
    near: float | None = None
    far: float | None = None
    stratified: bool = True
    background: tuple[float, float, float] = WHITE
    # optimizer
    lr_main: float = 0.01
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-15
    weight_decay: float = 1e-6
    lr_variance: float = 1e-3
    pose_lr: float = 1e-2
    # cosine-decay the pose group over the second half of training so the
    # poses settle once the geometric terms have pulled them into the basin
    pose_lr_decay: bool = True
    pose_lr_final_factor: float = 0.05
    # the warm-up protects the field and density parameters; the pose group
    # ramps immediately unless this is set
    warmup_poses: bool = False
    # switches
    use_kre: bool = True
    use_mrc: bool = True
    use_le: bool = True
    use_la: bool = True
    optimize_poses: bool = True
    # losses
    weights: LossWeights = LossWeights()
    # model
    grid: HashGridConfig = HashGridConfig()
    mask: ProgressiveMask = ProgressiveMask()
    field: FieldConfig = FieldConfig()
    dtype: str = "float32"
    # bookkeeping
    seed: int = 0
    deterministic: bool = True
    log_every: int = 100

    def __post_init__(self):
        if not self.iterations >= 0:
            raise ValueError("iterations must be >= 0")
        if not 0 <= self.warmup_iterations:
            raise ValueError("warmup_iterations must be >= 0")
        if self.iterations and self.warmup_iterations >= self.iterations:
            raise ValueError("iterations must exceed warmup_iterations")
        if min(self.lr_main, self.lr_variance, self.pose_lr) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 3")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[f.name] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    for key, cls in (
        ("weights", LossWeights),
        ("grid", HashGridConfig),
        ("mask", ProgressiveMask),
        ("field", FieldConfig),
    ):
        if key in data and isinstance(data[key], dict):
            data[key] = _build(cls, data[key])
    return _build(TrainConfig, data)


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Linear warm-up from 1% of the base rate, constant afterwards."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if cfg.warmup_iterations == 0:
        return cfg.lr_main
    frac = min(1.0, iteration / cfg.warmup_iterations)
    return cfg.lr_main * (0.01 + 0.99 * frac)


def warmup_factor(cfg: TrainConfig, iteration: int) -> float:
    if cfg.warmup_iterations == 0:
        return 1.0
    return 0.01 + 0.99 * min(1.0, iteration / cfg.warmup_iterations)


def pose_lr_factor(cfg: TrainConfig, iteration: int) -> float:
    """Optional warm-up times the late cosine decay for the pose group."""
    factor = warmup_factor(cfg, iteration) if cfg.warmup_poses else 1.0
    if cfg.pose_lr_decay and cfg.iterations > 0:
        start = 0.5 * cfg.iterations
        if iteration > start:
            u = min(1.0, (iteration - start) / (cfg.iterations - start))
            lo = cfg.pose_lr_final_factor
            factor *= lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * u))
    return factor


class TrainState(torch.nn.Module):
    """Field model plus one optimizable pose per training view."""

    def __init__(self, model: FieldModel, poses: list[PoseParam]):
        super().__init__()
        self.model = model
        self.poses = torch.nn.ModuleList(poses)
        self.iteration = 0


def build_state(dataset: Dataset, cfg: TrainConfig) -> TrainState:
    gen = torch.Generator().manual_seed(cfg.seed)
    volume = FeatureVolume(cfg.grid, dtype=cfg.torch_dtype, generator=gen)
    torch.manual_seed(cfg.seed)
    model = FieldModel(volume, cfg.mask, cfg.field, dtype=cfg.torch_dtype)
    poses = [PoseParam.from_pose(v.pose_init) for v in dataset.train_views()]
    return TrainState(model, poses)


def auto_near_far(dataset: Dataset, margin: float = 1.3) -> tuple[float, float]:
    """Sampling interval from camera-center radii, padded by the scene margin."""
    radii = [float(np.linalg.norm(v.pose_init.t)) for v in dataset.train_views()]
    near = max(0.05, 0.9 * (min(radii) - margin))
    far = max(radii) + margin
    return near, far


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def _batch_indices(
    n_pool: int, batch_size: int, seed: int, iteration: int, salt: int = 101
) -> np.ndarray:
    rng = np.random.default_rng((seed, salt, iteration))
    if n_pool >= batch_size:
        return rng.choice(n_pool, size=batch_size, replace=False)
    return rng.choice(n_pool, size=batch_size, replace=True)


def assemble_batch(
    matches: list[Correspondence], cfg: TrainConfig, iteration: int
) -> list[Correspondence]:
    """Sample the iteration's correspondence batch (deterministic per seed+iteration)."""
    if not matches:
        raise ValueError("correspondence pool is empty")
    idx = _batch_indices(len(matches), cfg.rays_pairs_per_batch, cfg.seed, iteration)
    return [matches[int(i)] for i in idx]


# ---------------------------------------------------------------------------
# Training context (static per-run tensors)
# ---------------------------------------------------------------------------


class _TrainContext:
    def __init__(self, dataset: Dataset, matches: list[Correspondence], cfg: TrainConfig):
        views = dataset.train_views()
        if not views:
            raise ValueError("dataset has no training views")
        self.K = views[0].K
        dt = cfg.torch_dtype
        self.images = torch.from_numpy(np.stack([v.image for v in views])).to(dt)
        self.n_views = len(views)
        if cfg.near is None or cfg.far is None:
            near, far = auto_near_far(dataset)
        else:
            near, far = cfg.near, cfg.far
        self.near, self.far = float(near), float(far)

        r = cfg.patch_size // 2
        kept = []
        self.n_dropped = 0
        for c in matches:
            ok = True
            for kp in (c.kp_a, c.kp_b):
                cu, cv = round(kp.pixel[0]), round(kp.pixel[1])
                if not (
                    r <= cu < self.K.width - r and r <= cv < self.K.height - r
                ):
                    ok = False
                if not (kp.view_id < self.n_views):
                    raise ValueError(
                        f"correspondence references view {kp.view_id} outside the "
                        f"{self.n_views} training views"
                    )
            if ok:
                kept.append(c)
            else:
                self.n_dropped += 1
        if not kept:
            raise ValueError("no correspondence leaves a complete auxiliary patch in bounds")
        self.matches = kept
        self.kp_px = np.array(
            [[c.kp_a.pixel, c.kp_b.pixel] for c in kept], dtype=np.float64
        )  # [M, 2, 2]
        self.kp_views = np.array(
            [[c.kp_a.view_id, c.kp_b.view_id] for c in kept], dtype=np.int64
        )  # [M, 2]
        offs = patch_scan_offsets(cfg.patch_size)
        self.patch_offsets = np.array(offs, dtype=np.float64)  # [A, 2]
        self.center_slot = offs.index((0, 0))
        self.n_bundle_rays = 2 * len(offs) * cfg.rays_pairs_per_batch
        self.n_photo = (
            cfg.photo_rays_per_batch
            if cfg.photo_rays_per_batch is not None
            else self.n_bundle_rays
        )


def _stack_poses(poses) -> tuple[Tensor, Tensor]:
    Rs, ts = [], []
    for p in poses:
        R, t = p.matrices()
        Rs.append(R)
        ts.append(t)
    return torch.stack(Rs), torch.stack(ts)


def _bilinear(images: Tensor, vids: Tensor, uv: Tensor) -> Tensor:
    """Sample [V,H,W,3] images at pixel-index coordinates uv [N,2] per view id."""
    H, W = images.shape[1], images.shape[2]
    x = uv[:, 0].clamp(0.0, W - 1.0)
    y = uv[:, 1].clamp(0.0, H - 1.0)
    x0 = x.floor().long().clamp(0, W - 2) if W > 1 else x.floor().long().clamp(0, 0)
    y0 = y.floor().long().clamp(0, H - 2) if H > 1 else y.floor().long().clamp(0, 0)
    fx = (x - x0).to(images.dtype).unsqueeze(-1)
    fy = (y - y0).to(images.dtype).unsqueeze(-1)
    x1 = (x0 + 1).clamp(0, W - 1)
    y1 = (y0 + 1).clamp(0, H - 1)
    c00 = images[vids, y0, x0]
    c01 = images[vids, y0, x1]
    c10 = images[vids, y1, x0]
    c11 = images[vids, y1, x1]
    return (
        c00 * (1 - fx) * (1 - fy)
        + c01 * fx * (1 - fy)
        + c10 * (1 - fx) * fy
        + c11 * fx * fy
    )


def _project_batched(K, Rs: Tensor, ts: Tensor, pts: Tensor) -> tuple[Tensor, Tensor]:
    """Project points [N,3] through per-row camera-to-world poses [N,3,3]/[N,3]."""
    p_cam = torch.einsum("ni,nij->nj", pts - ts, Rs)
    depth = -p_cam[..., 2]
    safe = torch.where(depth.abs() < 1e-12, torch.full_like(depth, 1e-12), depth)
    u = K.cx + K.fx * p_cam[..., 0] / safe - 0.5
    v = K.cy - K.fy * p_cam[..., 1] / safe - 0.5
    return torch.stack((u, v), dim=-1), depth


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------


def _forward_losses(
    state: TrainState,
    ctx: _TrainContext,
    batch_idx: np.ndarray,
    cfg: TrainConfig,
    iteration: int,
) -> tuple[Tensor, dict]:
    model = state.model
    dt = model.dtype_
    K = ctx.K
    B = len(batch_idx)
    A = len(ctx.patch_offsets)
    S = cfg.n_samples
    ci = ctx.center_slot
    gen = torch.Generator().manual_seed(
        (cfg.seed * 1_000_003 + iteration * 9176 + 7) % (2**63 - 1)
    )

    # --- bundle pixel table -------------------------------------------------
    kp = ctx.kp_px[batch_idx]  # [B,2,2]
    anchors = np.rint(kp)
    slots = anchors[:, :, None, :] + ctx.patch_offsets[None, None, :, :]  # [B,2,A,2]
    slots[:, :, ci, :] = kp
    vids = torch.from_numpy(ctx.kp_views[batch_idx])  # [B,2]

    # --- photometric rays ---------------------------------------------------
    rng = np.random.default_rng((cfg.seed, 202, iteration))
    photo_vids = torch.from_numpy(rng.integers(0, ctx.n_views, size=ctx.n_photo))
    photo_px = np.stack(
        (
            rng.integers(0, K.width, size=ctx.n_photo),
            rng.integers(0, K.height, size=ctx.n_photo),
        ),
        axis=-1,
    ).astype(np.float64)

    # --- rays through current poses ------------------------------------------
    Rs, ts = _stack_poses(state.poses)  # float64 [V,3,3], [V,3]
    all_uv = torch.from_numpy(
        np.concatenate((slots.reshape(-1, 2), photo_px), axis=0)
    )
    all_vids = torch.cat((vids.unsqueeze(-1).expand(B, 2, A).reshape(-1), photo_vids))
    d_cam = pixel_to_camera_dirs(K, all_uv)
    d_world = torch.einsum("nij,nj->ni", Rs[all_vids], d_cam)
    o_world = ts[all_vids]

    # --- sample points (t shared across each bundle's rays) -----------------
    edges = torch.linspace(ctx.near, ctx.far, S + 1, dtype=torch.float64)
    lo, hi = edges[:-1], edges[1:]
    if cfg.stratified:
        u_b = torch.rand((B, 2, 1, S), generator=gen, dtype=torch.float64)
        u_p = torch.rand((ctx.n_photo, S), generator=gen, dtype=torch.float64)
    else:
        u_b = torch.full((B, 2, 1, S), 0.5, dtype=torch.float64)
        u_p = torch.full((ctx.n_photo, S), 0.5, dtype=torch.float64)
    t_bund = (lo + u_b * (hi - lo)).expand(B, 2, A, S)
    t_all = torch.cat((t_bund.reshape(-1, S), lo + u_p * (hi - lo)), dim=0)

    points = o_world.unsqueeze(-2) + t_all.unsqueeze(-1) * d_world.unsqueeze(-2)
    flat = points.reshape(-1, 3).to(dt)
    if not flat.requires_grad:
        flat = flat.detach().requires_grad_(True)

    # --- field forward -------------------------------------------------------
    n_bund_pts = B * 2 * A * S
    feats = model.point_features(flat, iteration)
    if cfg.use_kre:
        fb = feats[:n_bund_pts].reshape(B, 2, A, S, -1)
        f_key = fb[:, :, ci]
        f_aux = torch.cat((fb[:, :, :ci], fb[:, :, ci + 1 :]), dim=2)
        if f_aux.shape[2]:
            enriched = enrich_key_feature(f_key, f_aux.movedim(2, -2))
            fb = torch.cat(
                (fb[:, :, :ci], enriched.unsqueeze(2), fb[:, :, ci + 1 :]), dim=2
            )
        feats = torch.cat((fb.reshape(n_bund_pts, -1), feats[n_bund_pts:]), dim=0)
    sdf, f2 = model.geometry(feats, flat)
    grad = torch.autograd.grad(sdf.sum(), flat, create_graph=True)[0]
    gnorm = torch.linalg.vector_norm(grad, dim=-1, keepdim=True)
    normals = grad / gnorm.clamp_min(1e-9)
    d_enc = sh_encode(d_world.to(dt), model.field_cfg.sh_degree)
    rgb = model.texture(
        f2.reshape(-1, S, f2.shape[-1]),
        d_enc.unsqueeze(1).expand(-1, S, -1),
        normals.reshape(-1, S, 3),
    )

    samples = RaySamples(
        t_vals=t_all.to(dt),
        points=points,
        sdf=sdf.reshape(-1, S),
        alpha=alphas_from_sdf(sdf.reshape(-1, S), model.density.s),
        color=rgb,
        feature=f2.reshape(-1, S, f2.shape[-1]),
    )
    out: RayOutput = integrate(samples, cfg.background)

    n_bund = B * 2 * A
    color_b = out.color[:n_bund].reshape(B, 2, A, 3)
    feat_b = out.feature[:n_bund].reshape(B, 2, A, -1)
    depth_b = out.depth[:n_bund].reshape(B, 2, A)
    color_p = out.color[n_bund:]

    # --- matched-ray coherency ------------------------------------------------
    key_feat_a = feat_b[:, 0, ci]
    key_feat_b = feat_b[:, 1, ci]
    if cfg.use_mrc:
        w = matchability(key_feat_a, key_feat_b)
    else:
        w = torch.zeros(B, dtype=dt)
    fused_a, fused_b = fuse_matched_colors(color_b[:, 0, ci], color_b[:, 1, ci], w)
    color_b = torch.cat(
        (
            color_b[:, :, :ci],
            torch.stack((fused_a, fused_b), dim=1).unsqueeze(2),
            color_b[:, :, ci + 1 :],
        ),
        dim=2,
    )

    # --- photometric + ssim targets -------------------------------------------
    targets = _bilinear(ctx.images, all_vids, all_uv.to(dt))
    targets_b = targets[:n_bund].reshape(B, 2, A, 3)
    l_p = photometric_loss(
        torch.cat((color_b.reshape(-1, 3), color_p)), targets
    )
    kk = cfg.patch_size
    l_s = ssim_patch_loss(
        color_b.reshape(B * 2, kk, kk, 3), targets_b.reshape(B * 2, kk, kk, 3)
    )

    # --- geometric losses ------------------------------------------------------
    zero = torch.zeros((), dtype=torch.float64)
    l_e, l_a = zero, zero
    n_skipped = 0
    if cfg.use_le or cfg.use_la:
        key_sel = (
            (torch.arange(B) * 2 * A).unsqueeze(1) + torch.tensor([0, A]) + ci
        ).reshape(-1)  # flat ray index of each pair's two key rays
        o_key = o_world[key_sel].reshape(B, 2, 3)
        d_key = d_world[key_sel].reshape(B, 2, 3)
        depth_key = depth_b[:, :, ci].to(torch.float64).clamp(ctx.near, ctx.far)
        p_key = o_key + depth_key.unsqueeze(-1) * d_key  # [B,2,3]

        R_pair = Rs[vids]  # [B,2,3,3]
        t_pair = ts[vids]
        kp_t = torch.from_numpy(kp)  # [B,2,2]

        if cfg.use_le:
            # Bundle pairs carry their rendered depths; the extra epipolar-only
            # pairs use the interval midpoint, which the depth decoupling makes
            # equivalent, at zero rendering cost.
            kp_cat, p_cat, R_cat, t_cat = kp_t, p_key, R_pair, t_pair
            n_extra = cfg.epipolar_pairs_per_batch - B
            if n_extra > 0:
                eidx = _batch_indices(
                    len(ctx.matches), n_extra, cfg.seed, iteration, salt=303
                )
                kp_e = torch.from_numpy(ctx.kp_px[eidx])  # [E,2,2]
                vids_e = torch.from_numpy(ctx.kp_views[eidx])
                R_e = Rs[vids_e]  # [E,2,3,3]
                t_e = ts[vids_e]
                d_we = torch.einsum(
                    "peij,pej->pei", R_e, pixel_to_camera_dirs(K, kp_e)
                )
                p_e = t_e + 0.5 * (ctx.near + ctx.far) * d_we
                kp_cat = torch.cat((kp_t, kp_e))
                p_cat = torch.cat((p_key, p_e))
                R_cat = torch.cat((R_pair, R_e))
                t_cat = torch.cat((t_pair, t_e))
            dists = []
            for src, dst in ((0, 1), (1, 0)):
                epi, _ = _project_batched(
                    K, R_cat[:, dst], t_cat[:, dst], t_cat[:, src]
                )
                uv, depth = _project_batched(
                    K, R_cat[:, dst], t_cat[:, dst], p_cat[:, src]
                )
                line = kp_cat[:, dst] - epi
                ln = torch.linalg.vector_norm(line, dim=-1)
                ok = (depth > 1e-9) & (ln > 1e-6)
                n_skipped += int((~ok).sum())
                if ok.any():
                    u_dir = line[ok] / ln[ok].unsqueeze(-1)
                    rel = uv[ok] - epi[ok]
                    dists.append(
                        (u_dir[:, 0] * rel[:, 1] - u_dir[:, 1] * rel[:, 0]).abs()
                    )
            if dists:
                l_e = torch.cat(dists).mean()
        if cfg.use_la:
            l_a = torch.linalg.vector_norm(p_key[:, 0] - p_key[:, 1], dim=-1).mean()

    l_eik = zero
    if cfg.weights.eikonal > 0:
        l_eik = ((gnorm.squeeze(-1) - 1.0) ** 2).mean()

    eff = dataclasses.replace(
        cfg.weights,
        epipolar=cfg.weights.epipolar if cfg.use_le else 0.0,
        alignment=cfg.weights.alignment if cfg.use_la else 0.0,
    )
    total = total_loss(l_p, l_s, l_e, l_a, eff, iteration, l_eik)
    comps = {
        "loss": float(total.detach()),
        "loss_photometric": float(l_p.detach()),
        "loss_ssim": float(l_s.detach()),
        "loss_epipolar": float(l_e.detach()),
        "loss_alignment": float(l_a.detach()),
        "mean_matchability": float(w.detach().mean()) if cfg.use_mrc else 0.0,
        "epipolar_skipped": n_skipped,
    }
    internals = {
        "l_p": l_p,
        "l_s": l_s,
        "l_e": l_e,
        "l_a": l_a,
        "fused_key_colors": torch.stack((fused_a, fused_b), dim=1),
        "matchability": w,
    }
    return total, comps, internals


def make_optimizer(state: TrainState, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = [
        {
            "params": list(state.model.volume.parameters())
            + list(state.model.geometry.parameters())
            + list(state.model.texture.parameters()),
            "lr": cfg.lr_main,
            "weight_decay": cfg.weight_decay,
            "base_lr": cfg.lr_main,
            "role": "main",
        },
        {
            "params": list(state.model.density.parameters()),
            "lr": cfg.lr_variance,
            "weight_decay": 0.0,
            "base_lr": cfg.lr_variance,
            "role": "variance",
        },
    ]
    if cfg.optimize_poses:
        groups.append(
            {
                "params": [p for pose in state.poses for p in pose.parameters()],
                "lr": cfg.pose_lr,
                "weight_decay": 0.0,
                "base_lr": cfg.pose_lr,
                "role": "poses",
            }
        )
    return torch.optim.AdamW(groups, betas=cfg.betas, eps=cfg.eps)


def train_step(
    state: TrainState,
    optimizer: torch.optim.AdamW,
    ctx: _TrainContext,
    batch_idx: np.ndarray,
    cfg: TrainConfig,
) -> dict:
    """One forward/backward/update; returns the per-component loss record."""
    it = state.iteration
    total, comps, _ = _forward_losses(state, ctx, batch_idx, cfg, it)
    if not torch.isfinite(total.detach()):
        raise NonFiniteLossError(f"total loss is not finite at iteration {it}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    factor = warmup_factor(cfg, it)
    for group in optimizer.param_groups:
        f = pose_lr_factor(cfg, it) if group.get("role") == "poses" else factor
        group["lr"] = group["base_lr"] * f
    optimizer.step()
    # Params never touched by this step keep their old (finite) values, so
    # one sum per updated tensor suffices to catch NaN/Inf every iteration.
    for name, p in state.named_parameters():
        if p.grad is not None and not torch.isfinite(p.data.sum()):
            raise NonFiniteLossError(f"parameter '{name}' became non-finite at iteration {it}")
    comps["lr"] = learning_rate(cfg, it)
    comps["active_levels"] = state.model.num_active_levels(it)
    state.iteration = it + 1
    return comps


def pose_errors(state: TrainState, dataset: Dataset) -> tuple[float, float] | None:
    """Procrustes-aligned mean rotation/translation error of the train poses."""
    gt = [v.pose_gt for v in dataset.train_views()]
    if any(p is None for p in gt) or len(gt) < 3:
        return None
    opt = [p.to_rigid() for p in state.poses]
    try:
        _, rot_err, trans_err = procrustes_align(opt, gt)
    except Exception:
        return None
    return rot_err, trans_err


def train(
    state: TrainState,
    dataset: Dataset,
    matches: list[Correspondence],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> list[dict]:
    """Run the configured number of iterations; returns the metrics records."""
    if cfg.deterministic:
        torch.set_num_threads(1)
    records: list[dict] = []
    if cfg.iterations == 0:
        return records
    ctx = _TrainContext(dataset, matches, cfg)
    optimizer = make_optimizer(state, cfg)
    log_file = open(log_path, "a") if log_path is not None else None
    try:
        for _ in range(cfg.iterations):
            it = state.iteration
            batch_idx = _batch_indices(
                len(ctx.matches), cfg.rays_pairs_per_batch, cfg.seed, it
            )
            comps = train_step(state, optimizer, ctx, batch_idx, cfg)
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                rec = {"iteration": it, **comps}
                errs = pose_errors(state, dataset)
                if errs is not None:
                    rec["rotation_error_deg"], rec["translation_error"] = errs
                records.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return records
