"""Keypoint correspondences: the analytic oracle matcher, mismatch injection,
auxiliary patches, and the external match-file format.

The oracle matcher replaces a learned detector/matcher for synthetic scenes:
it samples surface points of the analytic SDF that are visible from both
views (sphere-traced occlusion test) and emits their exact projections as a
matched keypoint pair.  Real detector output can be ingested through
:func:`load_external_matches` using the line format documented there.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, RigidPose
from .scenes import Scene, sphere_trace


class MatchError(ValueError):
    pass


class NoOverlapError(MatchError):
    pass


@dataclass(frozen=True)
class Keypoint:
    view_id: int
    pixel: tuple[float, float]
    score: float = 1.0


@dataclass(frozen=True)
class Correspondence:
    """Two keypoints from different views believed to see the same 3D point.

    ``is_injected_mismatch`` and ``point`` are oracle-side debugging fields;
    they never reach the optimizer and are not part of the file format.
    """

    kp_a: Keypoint
    kp_b: Keypoint
    confidence: float = 1.0
    is_injected_mismatch: bool = False
    point: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kp_a.view_id == self.kp_b.view_id:
            raise MatchError("a correspondence must link two different views")


@dataclass(frozen=True)
class AuxPatch:
    """Integer pixel offsets of the k x k neighborhood around a keypoint."""

    center: Keypoint
    offsets: tuple[tuple[int, int], ...]


def aux_patch(kp: Keypoint, k: int, width: int, height: int) -> AuxPatch:
    """The (k^2 - 1) in-bounds integer neighbors of ``round(kp.pixel)``."""
    if k < 3 or k % 2 == 0:
        raise MatchError("patch size must be odd and >= 3")
    r = k // 2
    cu = int(round(kp.pixel[0]))
    cv = int(round(kp.pixel[1]))
    offsets = []
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            if du == 0 and dv == 0:
                continue
            if 0 <= cu + du < width and 0 <= cv + dv < height:
                offsets.append((du, dv))
    return AuxPatch(center=kp, offsets=tuple(offsets))


def patch_scan_offsets(k: int) -> list[tuple[int, int]]:
    """All k x k offsets in row-major order, center (0, 0) included."""
    r = k // 2
    return [(du, dv) for dv in range(-r, r + 1) for du in range(-r, r + 1)]


# ---------------------------------------------------------------------------
# Oracle matcher
# ---------------------------------------------------------------------------


def _project(K: Intrinsics, pose: RigidPose, pts: np.ndarray):
    """Project world points; returns pixel coords [N,2] and positive-depth mask."""
    p_cam = (pts - pose.t) @ pose.R
    depth = -p_cam[..., 2]
    safe = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
    u = K.cx + K.fx * p_cam[..., 0] / safe - 0.5
    v = K.cy - K.fy * p_cam[..., 1] / safe - 0.5
    return np.stack((u, v), axis=-1), depth > 1e-9


def _visible(scene: Scene, pose: RigidPose, pts: np.ndarray, tol: float = 3e-3) -> np.ndarray:
    """Sphere-traced occlusion test: the first hit must be the point itself."""
    d = pts - pose.t
    dist = np.linalg.norm(d, axis=-1)
    d = d / dist[:, None]
    hit, t, _, _ = sphere_trace(scene, np.broadcast_to(pose.t, pts.shape), d)
    return hit & (np.abs(t - dist) < tol)


def oracle_detect_and_match(
    scene: Scene,
    K: Intrinsics,
    pose_a: RigidPose,
    pose_b: RigidPose,
    view_a: int,
    view_b: int,
    n_points: int,
    rng=0,
    border_margin: int = 3,
) -> list[Correspondence]:
    """Exact correspondences between two views of an analytic scene.

    Surface points visible from both cameras are projected into each image;
    points whose projection falls within ``border_margin`` pixels of a border
    are rejected so auxiliary patches stay complete.  Deterministic given the
    seed; raises :class:`NoOverlapError` if the trial budget (20x
    ``n_points``) finds nothing.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    budget = max(n_points * 20, 64)
    tried = 0
    found: list[Correspondence] = []
    while tried < budget and len(found) < n_points:
        batch = min(budget - tried, max(4 * n_points, 256))
        tried += batch
        p = rng.uniform(-1.0, 1.0, size=(batch, 3))
        s = scene.sdf(p)
        p = p[np.abs(s) < 0.25]
        for _ in range(8):
            if p.size == 0:
                break
            p = p - scene.sdf(p)[:, None] * scene.normal(p)
        if p.size == 0:
            continue
        p = p[np.abs(scene.sdf(p)) < 1e-6]
        if p.size == 0:
            continue
        uv_a, front_a = _project(K, pose_a, p)
        uv_b, front_b = _project(K, pose_b, p)
        m = border_margin + 0.5
        in_a = (
            front_a
            & (uv_a[:, 0] >= m)
            & (uv_a[:, 0] <= K.width - 1 - m)
            & (uv_a[:, 1] >= m)
            & (uv_a[:, 1] <= K.height - 1 - m)
        )
        in_b = (
            front_b
            & (uv_b[:, 0] >= m)
            & (uv_b[:, 0] <= K.width - 1 - m)
            & (uv_b[:, 1] >= m)
            & (uv_b[:, 1] <= K.height - 1 - m)
        )
        keep = in_a & in_b
        if not keep.any():
            continue
        p, uv_a, uv_b = p[keep], uv_a[keep], uv_b[keep]
        vis = _visible(scene, pose_a, p) & _visible(scene, pose_b, p)
        for pt, ua, ub in zip(p[vis], uv_a[vis], uv_b[vis]):
            found.append(
                Correspondence(
                    kp_a=Keypoint(view_a, (float(ua[0]), float(ua[1]))),
                    kp_b=Keypoint(view_b, (float(ub[0]), float(ub[1]))),
                    point=(float(pt[0]), float(pt[1]), float(pt[2])),
                )
            )
            if len(found) >= n_points:
                break
    if not found:
        raise NoOverlapError(
            f"views {view_a} and {view_b} share no visible surface points "
            f"after {budget} trials"
        )
    return found


def inject_mismatches(matches: list[Correspondence], rate: float, rng=0) -> list[Correspondence]:
    """Replace ``kp_b`` of a fraction of matches with another view-b keypoint.

    Exactly ``round(rate * len(matches))`` entries are corrupted and flagged.
    """
    if not 0.0 <= rate <= 1.0:
        raise MatchError("mismatch rate must lie in [0, 1]")
    if not matches:
        return []
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n_bad = int(round(rate * len(matches)))
    idx = rng.permutation(len(matches))[:n_bad]
    bad = set(int(i) for i in idx)
    by_view: dict[int, list[int]] = {}
    for j, c in enumerate(matches):
        by_view.setdefault(c.kp_b.view_id, []).append(j)
    out = []
    for i, c in enumerate(matches):
        if i not in bad:
            out.append(c)
            continue
        pool = [j for j in by_view[c.kp_b.view_id] if j != i]
        kp_b = matches[pool[int(rng.integers(len(pool)))]].kp_b if pool else c.kp_b
        out.append(
            Correspondence(
                kp_a=c.kp_a,
                kp_b=kp_b,
                confidence=c.confidence,
                is_injected_mismatch=True,
                point=None,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Match file format
# ---------------------------------------------------------------------------
#
# One record per line, whitespace separated:
#     view_a view_b u_a v_a u_b v_b confidence
# Lines starting with '#' are comments.


def save_matches(path: str | Path, matches: list[Correspondence]) -> None:
    lines = ["# view_a view_b u_a v_a u_b v_b confidence"]
    for c in matches:
        lines.append(
            f"{c.kp_a.view_id} {c.kp_b.view_id} "
            f"{c.kp_a.pixel[0]!r} {c.kp_a.pixel[1]!r} "
            f"{c.kp_b.pixel[0]!r} {c.kp_b.pixel[1]!r} {c.confidence!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_external_matches(path: str | Path, width: int, height: int) -> list[Correspondence]:
    """Parse a match file, validating pixel bounds against the image size."""
    out = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise MatchError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            va, vb = int(parts[0]), int(parts[1])
            ua, ca, ub, cb, conf = (float(x) for x in parts[2:7])
        except ValueError as e:
            raise MatchError(f"{path}:{lineno}: {e}") from e
        for name, (u, v) in (("a", (ua, ca)), ("b", (ub, cb))):
            if not (0.0 <= u < width and 0.0 <= v < height):
                raise MatchError(
                    f"{path}:{lineno}: keypoint {name} ({u}, {v}) outside "
                    f"{width}x{height} image"
                )
        out.append(
            Correspondence(
                kp_a=Keypoint(va, (ua, ca)),
                kp_b=Keypoint(vb, (ub, cb)),
                confidence=conf,
            )
        )
    return out
