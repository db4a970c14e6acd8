"""Point sampling along rays and differentiable volume integration.

Integration follows the discrete transmittance model: per-sample weights
``w_i = T_i * alpha_i`` with ``T_i`` the product of ``(1 - alpha_j)`` over
earlier samples.  Color, the accumulated ray feature, depth, and opacity are
all weight sums over the samples, so gradients flow to every per-sample
quantity and through them to the field and the camera poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .nets import FieldModel, sdf_to_alpha, sh_encode

WHITE = (1.0, 1.0, 1.0)
BLACK = (0.0, 0.0, 0.0)

_DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class SamplingConfig:
    n_samples: int = 64
    n_importance: int = 0
    near: float = 0.5
    far: float = 5.5
    stratified: bool = True

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")


def sample_ray(
    cfg: SamplingConfig,
    n_rays: int = 1,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Sorted t-values in [near, far] for ``n_rays`` rays, shape [n_rays, S].

    Uniform bin midpoints when not stratified; one uniform jitter per bin when
    stratified (deterministic given the generator state).
    """
    s = cfg.n_samples
    edges = torch.linspace(cfg.near, cfg.far, s + 1, dtype=dtype)
    lo, hi = edges[:-1], edges[1:]
    if cfg.stratified:
        u = torch.rand((n_rays, s), generator=generator, dtype=dtype)
    else:
        u = torch.full((n_rays, s), 0.5, dtype=dtype)
    return lo + u * (hi - lo)


@dataclass
class RaySamples:
    """Per-sample quantities along a batch of rays, all shaped [N, S, ...]."""

    t_vals: Tensor
    points: Tensor
    sdf: Tensor
    alpha: Tensor
    color: Tensor
    feature: Tensor

    def __post_init__(self):
        if not (self.t_vals[..., 1:] > self.t_vals[..., :-1]).all():
            raise ValueError("t-values must be strictly increasing along each ray")
        a = self.alpha.detach()
        if a.min() < -1e-6 or a.max() > 1.0 + 1e-6:
            raise ValueError("alphas must lie in [0, 1]")

    @property
    def deltas(self) -> Tensor:
        return self.t_vals[..., 1:] - self.t_vals[..., :-1]


@dataclass
class RayOutput:
    """Accumulated per-ray render quantities."""

    color: Tensor  # [N, 3]
    feature: Tensor  # [N, F]
    depth: Tensor  # [N]
    opacity: Tensor  # [N]
    weights: Tensor  # [N, S]


def composite_weights(alpha: Tensor) -> Tensor:
    """``w_i = alpha_i * prod_{j<i}(1 - alpha_j)`` along the last dim.

    The product inputs are floored at 1e-12: saturated alphas would place
    exact zeros in the cumulative product, which both stalls on a pathological
    autograd path and carries no gradient anyway (alpha is already clamped).
    """
    trans = torch.cumprod(
        torch.cat(
            (torch.ones_like(alpha[..., :1]), (1.0 - alpha[..., :-1]).clamp_min(1e-12)),
            dim=-1,
        ),
        dim=-1,
    )
    return alpha * trans


def integrate(samples: RaySamples, background: tuple[float, float, float] = WHITE) -> RayOutput:
    """Composite per-sample color/feature/depth into per-ray outputs.

    The residual transmittance is filled with the background color; depth is
    the opacity-normalized expected t-value (zero for fully transparent rays).
    """
    w = composite_weights(samples.alpha)
    opacity = w.sum(dim=-1)
    bg = torch.as_tensor(background, dtype=samples.color.dtype)
    color = (w.unsqueeze(-1) * samples.color).sum(dim=-2) + (
        1.0 - opacity
    ).unsqueeze(-1) * bg
    feature = (w.unsqueeze(-1) * samples.feature).sum(dim=-2)
    depth = (w * samples.t_vals).sum(dim=-1) / opacity.clamp_min(_DEPTH_EPS)
    return RayOutput(color=color, feature=feature, depth=depth, opacity=opacity, weights=w)


def alphas_from_sdf(sdf: Tensor, s) -> Tensor:
    """Per-sample alphas from consecutive SDF pairs; the final sample gets 0."""
    a = sdf_to_alpha(sdf[..., :-1], sdf[..., 1:], s)
    return torch.cat((a, torch.zeros_like(a[..., :1])), dim=-1)


def render_rays(
    model: FieldModel,
    origins: Tensor,
    dirs: Tensor,
    t_vals: Tensor,
    iteration: int,
    background: tuple[float, float, float] = WHITE,
    create_graph: bool = False,
) -> RayOutput:
    """Render a batch of plain rays (no enrichment) through the field.

    ``origins``/``dirs`` are [N, 3]; ``t_vals`` is [N, S].  Normals feed the
    texture network, so gradients w.r.t. sample positions are always built;
    pass ``create_graph=True`` when the result itself must be differentiated.
    """
    dt = model.dtype_
    o = origins.to(dt)
    d = dirs.to(dt)
    points = o.unsqueeze(-2) + t_vals.unsqueeze(-1).to(dt) * d.unsqueeze(-2)
    flat = points.reshape(-1, 3)
    if not flat.requires_grad:
        flat = flat.detach().requires_grad_(True)
    with torch.enable_grad():
        feats = model.point_features(flat, iteration)
        sdf, f2 = model.geometry(feats, flat)
        grad = torch.autograd.grad(sdf.sum(), flat, create_graph=create_graph)[0]
    norm = torch.linalg.vector_norm(grad, dim=-1, keepdim=True)
    normals = grad / norm.clamp_min(1e-9)
    if not create_graph:
        # pure evaluation: drop the graph so compositing below stays cheap
        sdf, f2, normals = sdf.detach(), f2.detach(), normals.detach()
    d_enc = sh_encode(d, model.field_cfg.sh_degree)
    d_enc = d_enc.unsqueeze(-2).expand(*points.shape[:-1], d_enc.shape[-1])
    rgb = model.texture(
        f2.reshape(*points.shape[:-1], -1),
        d_enc,
        normals.reshape(*points.shape[:-1], 3),
    )
    sdf = sdf.reshape(points.shape[:-1])
    alpha = alphas_from_sdf(sdf, model.density.s)
    samples = RaySamples(
        t_vals=t_vals.to(dt),
        points=points,
        sdf=sdf,
        alpha=alpha,
        color=rgb,
        feature=f2.reshape(*points.shape[:-1], -1),
    )
    return integrate(samples, background)
