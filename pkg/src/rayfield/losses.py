"""Training losses: photometric MSE, patch SSIM, and the two geometric terms.

The epipolar term measures, in pixels of the second image, how far the
projection of a back-projected key point falls from the epipolar line through
the epipole and the matched keypoint.  Because that projection slides along
the epipolar line as the depth estimate changes, the term constrains only the
relative camera poses and is decoupled from depth.  The point-alignment term
then pulls the two back-projected points of a matched pair together in 3D,
converging the depths once poses are trustworthy, which is why it is gated on
until a configurable iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .geometry import Intrinsics, project_points


class LossError(ValueError):
    pass


class DegenerateLineError(LossError):
    pass


class AllPointsBehindCameraError(LossError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    photometric: float = 1.0
    ssim: float = 0.1
    epipolar: float = 0.5
    alignment: float = 0.01
    eikonal: float = 0.0
    la_start_iteration: int = 3500

    def __post_init__(self):
        if min(self.photometric, self.ssim, self.epipolar, self.alignment, self.eikonal) < 0:
            raise LossError("loss weights must be non-negative")
        if self.la_start_iteration < 0:
            raise LossError("la_start_iteration must be >= 0")


def photometric_loss(rendered: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all pixels and channels."""
    if rendered.shape != target.shape:
        raise LossError(f"shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return ((rendered - target.to(rendered.dtype)) ** 2).mean()


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def ssim_patch_loss(rendered: Tensor, target: Tensor) -> Tensor:
    """``1 - SSIM`` with single-window statistics over small patches.

    Accepts ``[k, k, 3]`` patches or batches ``[..., k, k, 3]``; statistics
    are taken over the k x k window per channel and the SSIM is averaged over
    channels (and any batch dimensions).
    """
    if rendered.shape != target.shape:
        raise LossError(f"shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    if rendered.dim() < 3 or rendered.shape[-2] < 3 or rendered.shape[-3] < 3:
        raise LossError("SSIM patches must be at least 3x3")
    x = rendered.flatten(-3, -2)  # [..., k*k, 3]
    y = target.to(rendered.dtype).flatten(-3, -2)
    mx = x.mean(dim=-2)
    my = y.mean(dim=-2)
    vx = ((x - mx.unsqueeze(-2)) ** 2).mean(dim=-2)
    vy = ((y - my.unsqueeze(-2)) ** 2).mean(dim=-2)
    cxy = ((x - mx.unsqueeze(-2)) * (y - my.unsqueeze(-2))).mean(dim=-2)
    ssim = ((2 * mx * my + _SSIM_C1) * (2 * cxy + _SSIM_C2)) / (
        (mx**2 + my**2 + _SSIM_C1) * (vx + vy + _SSIM_C2)
    )
    return 1.0 - ssim.mean()


def backproject(origin: Tensor, direction: Tensor, depth: Tensor) -> Tensor:
    """``origin + depth * direction`` with a positive-depth precondition."""
    depth = torch.as_tensor(depth)
    if (depth.detach() <= 0).any():
        raise LossError("backprojection depth must be positive")
    return origin + depth.unsqueeze(-1) * direction


@dataclass
class EpipolarContext:
    """Fixed per-view-pair quantities for the epipolar term (a -> b direction).

    ``epipole`` is the pixel-coordinate projection of camera a's center into
    image b; it is recomputed from the differentiable poses every iteration.
    """

    K_b: Intrinsics
    R_b: Tensor
    t_b: Tensor
    epipole: Tensor
    epipole_depth: Tensor


def epipolar_context(K_b: Intrinsics, R_b: Tensor, t_b: Tensor, center_a: Tensor) -> EpipolarContext:
    uv, depth = project_points(K_b, R_b, t_b, center_a.reshape(1, 3))
    return EpipolarContext(K_b=K_b, R_b=R_b, t_b=t_b, epipole=uv[0], epipole_depth=depth[0])


def epipolar_loss(
    ctx: EpipolarContext, points: Tensor, kp_b: Tensor
) -> tuple[Tensor, int]:
    """Mean pixel distance from ``Proj_b(points)`` to the line (epipole, kp_b).

    ``points`` [N,3] are back-projected key points of view a; ``kp_b`` [N,2]
    are the matched keypoint pixels in view b.  Points behind camera b are
    skipped and counted; raises if every point is behind, or if a keypoint
    coincides with the epipole (degenerate line).
    """
    if points.numel() == 0:
        raise LossError("epipolar loss needs at least one match")
    kp_b = torch.as_tensor(kp_b, dtype=points.dtype)
    line_dir = kp_b - ctx.epipole
    if (torch.linalg.vector_norm(line_dir.detach(), dim=-1) < 1e-6).any():
        raise DegenerateLineError("matched keypoint coincides with the epipole")
    uv, depth = project_points(ctx.K_b, ctx.R_b, ctx.t_b, points)
    front = depth > 1e-9
    n_skipped = int((~front).sum())
    if not front.any():
        raise AllPointsBehindCameraError("all matched points lie behind the second camera")
    u = line_dir / torch.linalg.vector_norm(line_dir, dim=-1, keepdim=True)
    rel = uv - ctx.epipole
    dist = (u[..., 0] * rel[..., 1] - u[..., 1] * rel[..., 0]).abs()
    return dist[front].mean(), n_skipped


def point_alignment_loss(points_a: Tensor, points_b: Tensor) -> Tensor:
    """Mean Euclidean distance between paired back-projected points."""
    if points_a.shape != points_b.shape:
        raise LossError("point lists must have matching shapes")
    if points_a.numel() == 0:
        raise LossError("point-alignment loss needs at least one pair")
    return torch.linalg.vector_norm(points_a - points_b, dim=-1).mean()


def total_loss(
    l_photometric: Tensor,
    l_ssim: Tensor,
    l_epipolar: Tensor,
    l_alignment: Tensor,
    weights: LossWeights,
    iteration: int,
    l_eikonal: Tensor | float = 0.0,
) -> Tensor:
    """Weighted sum; the alignment term is gated off before its start iteration."""
    parts = {
        "photometric": l_photometric,
        "ssim": l_ssim,
        "epipolar": l_epipolar,
        "alignment": l_alignment,
        "eikonal": l_eikonal,
    }
    for name, val in parts.items():
        v = val.detach() if torch.is_tensor(val) else torch.tensor(float(val))
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(f"loss component '{name}' is not finite")
    gate = 0.0 if iteration < weights.la_start_iteration else 1.0
    return (
        weights.photometric * l_photometric
        + weights.ssim * l_ssim
        + weights.epipolar * l_epipolar
        + gate * weights.alignment * l_alignment
        + weights.eikonal * l_eikonal
    )
