"""Key-ray feature enrichment and matched-ray color coherency.

Enrichment fuses the feature of a key-ray sample with same-depth samples of
its auxiliary rays through a softmax attention over raw inner products.
Coherency compares the transmittance-accumulated features of two matched key
rays via a clamped cosine, and uses that matchability to blend their rendered
colors; a mismatched pair drives the weight toward zero, which degenerates
the blend back to independent per-ray colors.
"""

from __future__ import annotations

import torch
from torch import Tensor

_COS_EPS = 1e-8


class EmptyNeighborhoodError(ValueError):
    pass


def enrich_key_feature(f_key: Tensor, f_aux: Tensor) -> Tensor:
    """Softmax-attention fusion of a key sample feature with its neighbors.

    ``f_key`` is [..., F]; ``f_aux`` is [..., N, F] with the neighbor axis
    second from last.  Returns ``sum_i softmax_i(<f_key, f_aux_i>) f_aux_i``,
    a convex combination of the neighbor features.  Auxiliary features
    themselves pass through the pipeline unmodified.
    """
    if f_aux.shape[-2] == 0:
        raise EmptyNeighborhoodError("enrichment needs at least one auxiliary feature")
    if f_key.shape[-1] != f_aux.shape[-1]:
        raise ValueError("key and auxiliary feature widths must match")
    logits = (f_aux * f_key.unsqueeze(-2)).sum(-1)
    attn = torch.softmax(logits, dim=-1)
    return (attn.unsqueeze(-1) * f_aux).sum(-2)


def matchability(f_ray_a: Tensor, f_ray_b: Tensor) -> Tensor:
    """Clamped cosine similarity of two accumulated ray features, in [0, 1].

    The norm product is floored at epsilon, which maps zero-length features
    to w = 0 without perturbing the cosine of healthy inputs (so the value is
    exactly scale invariant); the clamp removes negative cosines, which would
    turn the color blend into an extrapolation outside [0, 1].
    """
    dot = (f_ray_a * f_ray_b).sum(-1)
    na = torch.linalg.vector_norm(f_ray_a, dim=-1)
    nb = torch.linalg.vector_norm(f_ray_b, dim=-1)
    return (dot / (na * nb).clamp_min(_COS_EPS)).clamp(0.0, 1.0)


def fuse_matched_colors(c_a: Tensor, c_b: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    """Symmetric matchability-weighted blend of two rendered ray colors.

    ``c_a_fused = w * c_b + (1 - w) * c_a`` and vice versa.  Gradients flow
    to both colors and to ``w``; with w = 0 each ray keeps its own color.
    """
    w = w.unsqueeze(-1) if w.dim() == c_a.dim() - 1 else w
    return w * c_b + (1.0 - w) * c_a, w * c_a + (1.0 - w) * c_b
