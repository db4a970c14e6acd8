"""Learnable 3D feature volume: multi-resolution hash grid with a progressive mask.

Each level stores a flat table of feature vectors addressed by a spatial hash
of integer grid vertices; a query point is encoded by trilinear interpolation
of the 8 surrounding vertex features, concatenated across levels.  Hash
collisions are tolerated by design.  The progressive mask zeroes the slices
of levels that have not yet been activated, so early training only sees the
coarse geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

# Large primes for the XOR spatial hash.  Only self-consistency matters: the
# same (volume, point) pair always hits the same table entries.
_HASH_PRIMES = (73856093, 19349663, 83492791)


@dataclass(frozen=True)
class HashGridConfig:
    num_levels: int = 16
    features_per_level: int = 2
    base_resolution: int = 32
    per_level_scale: float | None = None
    finest_resolution: int = 2048
    table_size_log2: int = 15
    bounding_box: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-1.0, -1.0, -1.0),
        (1.0, 1.0, 1.0),
    )

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if self.per_level_scale is not None and self.per_level_scale <= 1.0:
            raise ValueError("per_level_scale must be > 1")
        lo, hi = self.bounding_box
        if not all(h > l for l, h in zip(lo, hi)):
            raise ValueError("bounding box must have positive extent")

    @property
    def growth(self) -> float:
        """Per-level resolution growth factor."""
        if self.per_level_scale is not None:
            return self.per_level_scale
        if self.num_levels == 1:
            return 2.0
        return math.exp(
            (math.log(self.finest_resolution) - math.log(self.base_resolution))
            / (self.num_levels - 1)
        )

    @property
    def resolutions(self) -> list[int]:
        """Cells per axis at each level."""
        g = self.growth
        return [int(round(self.base_resolution * g**i)) for i in range(self.num_levels)]

    @property
    def feature_dim(self) -> int:
        return self.num_levels * self.features_per_level


@dataclass(frozen=True)
class ProgressiveMask:
    """Coarse-to-fine gate: `start_level` levels active at iteration 0."""

    start_level: int = 4
    step_iterations: int = 1000

    def __post_init__(self):
        if self.start_level < 1:
            raise ValueError("start_level must be >= 1")
        if self.step_iterations < 1:
            raise ValueError("step_iterations must be >= 1")


def active_levels(mask: ProgressiveMask, iteration: int, num_levels: int) -> int:
    """Number of active levels at a training iteration (clamped to num_levels)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return min(num_levels, mask.start_level + iteration // mask.step_iterations)


class FeatureVolume(torch.nn.Module):
    """Hash-encoded feature field over an axis-aligned bounding box."""

    def __init__(
        self,
        config: HashGridConfig = HashGridConfig(),
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.config = config
        table_size = 2**config.table_size_log2
        tables = []
        for _ in range(config.num_levels):
            w = torch.empty(table_size, config.features_per_level, dtype=dtype)
            if generator is None:
                w.uniform_(-1e-4, 1e-4)
            else:
                w.copy_(
                    (torch.rand(w.shape, generator=generator, dtype=torch.float64) * 2 - 1)
                    * 1e-4
                )
            tables.append(torch.nn.Parameter(w))
        self.tables = torch.nn.ParameterList(tables)
        lo, hi = config.bounding_box
        self.register_buffer("box_lo", torch.tensor(lo, dtype=dtype))
        self.register_buffer("box_hi", torch.tensor(hi, dtype=dtype))
        self.register_buffer(
            "_corner_offsets",
            torch.tensor(
                [[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.long
            ),
        )
        self.register_buffer("_resolutions", torch.tensor(config.resolutions, dtype=torch.long))
        self.register_buffer(
            "_level_offsets",
            torch.arange(config.num_levels, dtype=torch.long) * table_size,
        )

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def encode(self, points: Tensor, num_active: int | None = None) -> Tensor:
        """Concatenated per-level features for world points [N, 3].

        Points outside the bounding box are clamped to its surface.  Levels
        beyond ``num_active`` contribute zero slices and receive no gradient.
        All active levels are interpolated in one batched gather.
        """
        cfg = self.config
        if num_active is None:
            num_active = cfg.num_levels
        num_active = max(0, min(cfg.num_levels, num_active))
        n = num_active
        F = cfg.features_per_level
        if n == 0:
            return torch.zeros(
                *points.shape[:-1], cfg.num_levels * F, dtype=points.dtype
            )
        lo = self.box_lo.to(points.dtype)
        hi = self.box_hi.to(points.dtype)
        q = ((points - lo) / (hi - lo)).clamp(0.0, 1.0)
        res = self._resolutions[:n].to(points.dtype)  # [n]
        pos = q.unsqueeze(-2) * res.view(n, 1)  # [N, n, 3]
        cell = pos.floor().long().clamp_min(0)
        cell = torch.minimum(cell, (self._resolutions[:n] - 1).view(n, 1))
        frac = pos - cell.to(points.dtype)
        corners = cell.unsqueeze(-2) + self._corner_offsets  # [N, n, 8, 3]
        mask = (2**cfg.table_size_log2) - 1
        h = (
            corners[..., 0] * _HASH_PRIMES[0]
            ^ corners[..., 1] * _HASH_PRIMES[1]
            ^ corners[..., 2] * _HASH_PRIMES[2]
        ) & mask
        idx = h + self._level_offsets[:n].view(n, 1)  # [N, n, 8]
        table = torch.cat(list(self.tables[:n]), dim=0)  # [n*T, F]
        feats = table[idx.reshape(-1)].reshape(*idx.shape, F)  # [N, n, 8, F]
        off = self._corner_offsets.to(points.dtype)  # [8, 3]
        # per-axis linear weights multiplied out explicitly (prod() takes a
        # slow autograd path whenever a factor is exactly zero)
        wxyz = off * frac.unsqueeze(-2) + (1 - off) * (1 - frac.unsqueeze(-2))
        w = wxyz[..., 0] * wxyz[..., 1] * wxyz[..., 2]  # [N, n, 8]
        out = (feats * w.unsqueeze(-1)).sum(dim=-2).flatten(-2)  # [N, n*F]
        n_zero = cfg.num_levels - n
        if n_zero:
            out = torch.cat(
                (
                    out,
                    torch.zeros(
                        *points.shape[:-1], n_zero * F, dtype=points.dtype
                    ),
                ),
                dim=-1,
            )
        return out

    def forward(self, points: Tensor, num_active: int | None = None) -> Tensor:
        return self.encode(points, num_active)


def encode_point(volume: FeatureVolume, p: Tensor) -> Tensor:
    """Full (unmasked) feature of a single point or batch of points."""
    single = p.dim() == 1
    feats = volume.encode(p.reshape(-1, 3))
    return feats[0] if single else feats


def masked_feature(
    volume: FeatureVolume, mask: ProgressiveMask, p: Tensor, iteration: int
) -> Tensor:
    """Feature with inactive fine levels zeroed out at the given iteration."""
    n = active_levels(mask, iteration, volume.config.num_levels)
    single = p.dim() == 1
    feats = volume.encode(p.reshape(-1, 3), num_active=n)
    return feats[0] if single else feats
