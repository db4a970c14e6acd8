"""Geometry and texture networks over the feature volume.

The geometry MLP maps a (possibly enriched) point feature to an SDF value and
an intermediate feature; the texture MLP maps that feature plus an encoded
view direction and the surface normal to RGB.  An analytic sphere bias on the
SDF channel makes the initial field a sphere so early renders are stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .fieldvol import FeatureVolume, ProgressiveMask, active_levels


class ShapeMismatchError(ValueError):
    pass


class NonUnitDirectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------

_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199


def sh_encode(dirs: Tensor, degree: int = 4) -> Tensor:
    """Real spherical-harmonic basis values for unit directions [..., 3].

    Output has ``(degree + 1) ** 2`` channels ordered by band ``l`` and then
    ``m = -l..l``.  Includes the Condon-Shortley phase, matching the common
    associated-Legendre definition of the real basis.
    """
    if not 0 <= degree <= 4:
        raise ValueError("degree must be in 0..4")
    norm = torch.linalg.vector_norm(dirs, dim=-1)
    if (norm - 1.0).abs().max() > 1e-6:
        raise NonUnitDirectionError("directions must be unit length")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, _SH_C0)]
    if degree >= 1:
        out += [-_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            1.0925484305920792 * xy,
            -1.0925484305920792 * yz,
            0.31539156525252005 * (3.0 * zz - 1.0),
            -1.0925484305920792 * xz,
            0.5462742152960396 * (xx - yy),
        ]
    if degree >= 3:
        out += [
            -0.5900435899266435 * y * (3.0 * xx - yy),
            2.890611442640554 * xy * z,
            -0.4570457994644658 * y * (5.0 * zz - 1.0),
            0.3731763325901154 * z * (5.0 * zz - 3.0),
            -0.4570457994644658 * x * (5.0 * zz - 1.0),
            1.445305721320277 * z * (xx - yy),
            -0.5900435899266435 * x * (xx - 3.0 * yy),
        ]
    if degree >= 4:
        out += [
            2.5033429417967046 * xy * (xx - yy),
            -1.7701307697799304 * yz * (3.0 * xx - yy),
            0.9461746957575601 * xy * (7.0 * zz - 1.0),
            -0.6690465435572892 * yz * (7.0 * zz - 3.0),
            0.10578554691520431 * (35.0 * zz * zz - 30.0 * zz + 3.0),
            -0.6690465435572892 * xz * (7.0 * zz - 3.0),
            0.47308734787878004 * (xx - yy) * (7.0 * zz - 1.0),
            -1.7701307697799304 * xz * (xx - 3.0 * yy),
            0.6258357354491761 * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy)),
        ]
    return torch.stack(out, dim=-1)


def sh_dim(degree: int) -> int:
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class GeometryNet(torch.nn.Module):
    """Three-layer MLP producing [sdf | intermediate feature] from a point feature.

    The SDF channel carries an additive analytic bias ``|p - c| - r`` so the
    zero-initialized output row yields a sphere at start; the MLP learns the
    residual.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: int = 64,
        feat_dim: int = 15,
        bias_center: tuple[float, float, float] = (0.0, 0.0, 0.0),
        bias_radius: float = 0.5,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.feat_dim = feat_dim
        self.fc1 = torch.nn.Linear(in_dim, hidden, dtype=dtype)
        self.fc2 = torch.nn.Linear(hidden, hidden, dtype=dtype)
        self.fc3 = torch.nn.Linear(hidden, 1 + feat_dim, dtype=dtype)
        with torch.no_grad():
            self.fc3.weight[0].zero_()
            self.fc3.bias[0].zero_()
        self.register_buffer("bias_center", torch.tensor(bias_center, dtype=dtype))
        self.bias_radius = bias_radius

    def forward(self, feat: Tensor, points: Tensor) -> tuple[Tensor, Tensor]:
        if feat.shape[-1] != self.in_dim:
            raise ShapeMismatchError(
                f"geometry net expects feature width {self.in_dim}, got {feat.shape[-1]}"
            )
        h = torch.relu(self.fc1(feat))
        h = torch.relu(self.fc2(h))
        out = self.fc3(h)
        bias = (
            torch.linalg.vector_norm(points - self.bias_center.to(points.dtype), dim=-1)
            - self.bias_radius
        )
        sdf = out[..., 0] + bias
        return sdf, out[..., 1:]


def geometry_forward(net: GeometryNet, feat: Tensor, points: Tensor) -> tuple[Tensor, Tensor]:
    """SDF value and intermediate feature at ``points`` with features ``feat``."""
    return net(feat, points)


class TextureNet(torch.nn.Module):
    """Four-layer MLP mapping (feature, encoded direction, normal) to RGB in [0,1]."""

    def __init__(
        self,
        feat_dim: int = 15,
        sh_degree: int = 4,
        hidden: int = 64,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.feat_dim = feat_dim
        self.sh_degree = sh_degree
        in_dim = feat_dim + sh_dim(sh_degree) + 3
        self.in_dim = in_dim
        self.fc1 = torch.nn.Linear(in_dim, hidden, dtype=dtype)
        self.fc2 = torch.nn.Linear(hidden, hidden, dtype=dtype)
        self.fc3 = torch.nn.Linear(hidden, hidden, dtype=dtype)
        self.fc4 = torch.nn.Linear(hidden, 3, dtype=dtype)

    def forward(self, feat: Tensor, d_enc: Tensor, normal: Tensor) -> Tensor:
        x = torch.cat((feat, d_enc, normal), dim=-1)
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatchError(
                f"texture net expects total input width {self.in_dim}, got {x.shape[-1]}"
            )
        h = torch.relu(self.fc1(x))
        h = torch.relu(self.fc2(h))
        h = torch.relu(self.fc3(h))
        return torch.sigmoid(self.fc4(h))


def texture_forward(net: TextureNet, feat: Tensor, d_enc: Tensor, normal: Tensor) -> Tensor:
    return net(feat, d_enc, normal)


class DensityParams(torch.nn.Module):
    """Learnable slope of the logistic CDF used for SDF-to-opacity conversion.

    Parameterized as ``s = exp(10 * v)`` with ``v`` initialized to 0.3, which
    keeps ``s`` strictly positive.
    """

    def __init__(self, init_val: float = 0.3, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.v = torch.nn.Parameter(torch.tensor(init_val, dtype=dtype))

    @property
    def s(self) -> Tensor:
        return torch.exp(10.0 * self.v)


def sdf_to_alpha(sdf_i: Tensor, sdf_next: Tensor, s: Tensor | float) -> Tensor:
    """Per-segment opacity from consecutive SDF values.

    ``alpha = max((sig(s * sdf_i) - sig(s * sdf_next)) / sig(s * sdf_i), 0)``,
    clamped to [0, 1].  The denominator is floored at 1e-12 to avoid 0/0 when
    both CDF values underflow deep inside the surface.
    """
    s = torch.as_tensor(s, dtype=sdf_i.dtype if torch.is_tensor(sdf_i) else None)
    sdf_i = torch.as_tensor(sdf_i)
    sdf_next = torch.as_tensor(sdf_next)
    cdf_i = torch.sigmoid(s * sdf_i)
    cdf_n = torch.sigmoid(s * sdf_next)
    return ((cdf_i - cdf_n) / cdf_i.clamp_min(1e-12)).clamp(0.0, 1.0)


def sdf_normal(
    sdf_fn, points: Tensor, create_graph: bool = False
) -> tuple[Tensor, Tensor]:
    """Unit surface normals ``grad(sdf)/|grad(sdf)|`` via autograd.

    ``sdf_fn`` maps [N, 3] points to [N] SDF values.  Where the gradient
    norm falls below 1e-9 the fallback direction (0, 0, 1) is returned and
    the corresponding flag is set.  Returns ``(normals [N,3], flags [N])``.
    """
    if not points.requires_grad:
        points = points.detach().requires_grad_(True)
    with torch.enable_grad():
        sdf = sdf_fn(points)
        grad = torch.autograd.grad(sdf.sum(), points, create_graph=create_graph)[0]
    norm = torch.linalg.vector_norm(grad, dim=-1, keepdim=True)
    flags = norm.squeeze(-1) < 1e-9
    fallback = torch.zeros_like(grad)
    fallback[..., 2] = 1.0
    normals = torch.where(flags.unsqueeze(-1), fallback, grad / norm.clamp_min(1e-9))
    return normals, flags


# ---------------------------------------------------------------------------
# Composite field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldConfig:
    hidden: int = 64
    feat_dim: int = 15
    sh_degree: int = 4
    variance_init: float = 0.3
    bias_radius: float = 0.5


class FieldModel(torch.nn.Module):
    """Feature volume + geometry/texture networks + density slope, as one unit."""

    def __init__(
        self,
        volume: FeatureVolume,
        mask: ProgressiveMask = ProgressiveMask(),
        field_cfg: FieldConfig = FieldConfig(),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.volume = volume
        self.mask = mask
        self.field_cfg = field_cfg
        lo, hi = volume.config.bounding_box
        center = tuple((l + h) / 2.0 for l, h in zip(lo, hi))
        self.geometry = GeometryNet(
            volume.feature_dim,
            hidden=field_cfg.hidden,
            feat_dim=field_cfg.feat_dim,
            bias_center=center,
            bias_radius=field_cfg.bias_radius,
            dtype=dtype,
        )
        self.texture = TextureNet(
            feat_dim=field_cfg.feat_dim,
            sh_degree=field_cfg.sh_degree,
            hidden=field_cfg.hidden,
            dtype=dtype,
        )
        self.density = DensityParams(field_cfg.variance_init, dtype=dtype)
        self.dtype_ = dtype

    def num_active_levels(self, iteration: int) -> int:
        return active_levels(self.mask, iteration, self.volume.config.num_levels)

    def point_features(self, points: Tensor, iteration: int) -> Tensor:
        return self.volume.encode(points, self.num_active_levels(iteration))

    def sdf_fn(self, iteration: int | None = None):
        """Point-to-SDF callable through the full (mask + volume + MLP) stack."""
        n = None if iteration is None else self.num_active_levels(iteration)

        def fn(points: Tensor) -> Tensor:
            feats = self.volume.encode(points, n)
            sdf, _ = self.geometry(feats, points)
            return sdf

        return fn
