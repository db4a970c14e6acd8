"""Camera models, rays, and optimizable pose parameterizations.

Conventions used throughout the package (and enforced by the test suite):

* World and camera frames are right-handed.
* The camera looks along its local ``-z`` axis; ``+x`` is image-right and
  ``+y`` is image-up, so increasing pixel row ``v`` maps to ``-y``.
* :class:`RigidPose` stores the camera-to-world transform: ``p_world =
  R @ p_cam + t``, so ``t`` is the camera center and the columns of ``R``
  are the camera basis vectors expressed in world coordinates.
* Pixel coordinate ``(u, v)`` addresses a pixel whose center sits at the
  continuous image point ``(u + 0.5, v + 0.5)``.  Sub-pixel keypoints use
  the same offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor


class GeometryError(ValueError):
    """Base class for geometric precondition violations."""


class DegenerateParameterizationError(GeometryError):
    """6D rotation parameters are (near-)parallel or (near-)zero."""


class OutOfImageError(GeometryError):
    """Requested pixel lies outside the image."""


class DegenerateConfigurationError(GeometryError):
    """Input configuration admits no unique solution (e.g. collinear centers)."""


_ORTHONORMAL_TOL = 1e-6
_PARALLEL_TOL = 1e-9


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError("image dimensions must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0.0 <= self.cx <= self.width and 0.0 <= self.cy <= self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def from_fov_x(cls, width: int, height: int, fov_x: float) -> "Intrinsics":
        """Build centered intrinsics from a horizontal field of view (radians)."""
        fx = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(width, height, fx, fx, 0.5 * width, 0.5 * height)


@dataclass
class RigidPose:
    """Camera-to-world rigid transform with an orthonormal rotation."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > _ORTHONORMAL_TOL:
            raise GeometryError(f"rotation is not orthonormal (max error {err:.2e})")
        det = np.linalg.det(self.R)
        if abs(det - 1.0) > _ORTHONORMAL_TOL:
            raise GeometryError(f"rotation determinant {det:.8f} != +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.t

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidPose":
        return RigidPose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return self ∘ other (apply ``other`` first)."""
        return RigidPose(self.R @ other.R, self.R @ other.t + self.t)


class PoseParam(torch.nn.Module):
    """Optimizable camera-to-world pose: two unnormalized basis vectors + translation.

    The rotation is recovered by Gram-Schmidt orthonormalization of
    ``(v_a, v_b, v_a x v_b)``; the result is scale invariant in both vectors
    and differentiable everywhere the vectors are non-parallel.
    """

    def __init__(self, v_a, v_b, t, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.v_a = torch.nn.Parameter(torch.as_tensor(v_a, dtype=dtype).reshape(3))
        self.v_b = torch.nn.Parameter(torch.as_tensor(v_b, dtype=dtype).reshape(3))
        self.t = torch.nn.Parameter(torch.as_tensor(t, dtype=dtype).reshape(3))

    @classmethod
    def from_pose(cls, pose: RigidPose, dtype: torch.dtype = torch.float64) -> "PoseParam":
        return cls(pose.R[:, 0].copy(), pose.R[:, 1].copy(), pose.t.copy(), dtype=dtype)

    def rotation(self) -> Tensor:
        """Materialize the 3x3 rotation (differentiable)."""
        return gram_schmidt_rotation(self.v_a, self.v_b)

    def matrices(self) -> tuple[Tensor, Tensor]:
        """Differentiable ``(R, t)`` pair."""
        return self.rotation(), self.t

    def to_rigid(self) -> RigidPose:
        with torch.no_grad():
            R = self.rotation()
        return RigidPose(R.detach().cpu().numpy(), self.t.detach().cpu().numpy())


@dataclass(frozen=True)
class Ray:
    """A single world-space camera ray through a (sub-)pixel."""

    origin: Tensor
    direction: Tensor
    pixel: tuple[float, float]
    view_id: int

    def __post_init__(self):
        norm = float(torch.linalg.vector_norm(self.direction.detach()))
        if abs(norm - 1.0) > 1e-9:
            raise GeometryError(f"ray direction must be unit length, got |d|={norm!r}")


@dataclass
class SimilarityTransform:
    """`x -> s * R @ x + t` with s > 0 and R a proper rotation."""

    scale: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise GeometryError("similarity scale must be positive")
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > _ORTHONORMAL_TOL or abs(np.linalg.det(self.R) - 1.0) > _ORTHONORMAL_TOL:
            raise GeometryError("similarity rotation is not a proper rotation")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return self.scale * pts @ self.R.T + self.t

    def apply_pose(self, pose: RigidPose) -> RigidPose:
        """Map a camera pose into the transformed frame (orientation rotates, center maps)."""
        return RigidPose(self.R @ pose.R, self.apply_points(pose.t[None])[0])

    def inverse(self) -> "SimilarityTransform":
        Rinv = self.R.T
        return SimilarityTransform(1.0 / self.scale, Rinv, -Rinv @ self.t / self.scale)


# ---------------------------------------------------------------------------
# 6D rotation parameterization
# ---------------------------------------------------------------------------


def gram_schmidt_rotation(v_a: Tensor, v_b: Tensor) -> Tensor:
    """Orthonormalize ``(v_a, v_b, v_a x v_b)`` into a proper rotation matrix.

    The normalized vectors become the *columns* of the returned matrix, i.e.
    the camera basis expressed in world coordinates.  Supports arbitrary
    leading batch dimensions and is differentiable in both inputs.
    """
    v_a = torch.as_tensor(v_a)
    v_b = torch.as_tensor(v_b, dtype=v_a.dtype)
    na = torch.linalg.vector_norm(v_a, dim=-1, keepdim=True)
    cross = torch.linalg.cross(v_a, v_b, dim=-1)
    ncross = torch.linalg.vector_norm(cross, dim=-1, keepdim=True)
    if (na <= _PARALLEL_TOL).any() or (ncross <= _PARALLEL_TOL).any():
        raise DegenerateParameterizationError(
            "6D rotation parameters are degenerate (zero or parallel vectors)"
        )
    e1 = v_a / na
    proj = (v_b * e1).sum(-1, keepdim=True) * e1
    b_orth = v_b - proj
    e2 = b_orth / torch.linalg.vector_norm(b_orth, dim=-1, keepdim=True)
    e3 = torch.linalg.cross(e1, e2, dim=-1)
    return torch.stack((e1, e2, e3), dim=-1)


def rotation_from_6d(p: PoseParam) -> RigidPose:
    """Materialize a :class:`PoseParam` as a validated :class:`RigidPose`."""
    return p.to_rigid()


# ---------------------------------------------------------------------------
# Rays and projection
# ---------------------------------------------------------------------------


def pixel_to_camera_dirs(K: Intrinsics, uv: Tensor) -> Tensor:
    """Unit camera-frame directions through the centers of pixels ``uv`` [N,2]."""
    u = uv[..., 0] + 0.5
    v = uv[..., 1] + 0.5
    d = torch.stack(
        ((u - K.cx) / K.fx, -(v - K.cy) / K.fy, -torch.ones_like(u)), dim=-1
    )
    return d / torch.linalg.vector_norm(d, dim=-1, keepdim=True)


def rays_through_pixels(K: Intrinsics, R: Tensor, t: Tensor, uv: Tensor) -> tuple[Tensor, Tensor]:
    """Batched world-space rays through pixel coordinates ``uv`` [..., 2].

    ``R``/``t`` is a camera-to-world pose as differentiable tensors; the
    returned origins broadcast against the pixel batch.
    """
    uv = torch.as_tensor(uv, dtype=R.dtype)
    d_cam = pixel_to_camera_dirs(K, uv)
    d_world = d_cam @ R.transpose(-1, -2)
    o_world = t.expand(d_world.shape)
    return o_world, d_world


def ray_through_pixel(K: Intrinsics, pose: RigidPose, u: float, v: float, view_id: int = -1) -> Ray:
    """World-space ray through the center of pixel ``(u, v)``."""
    if not (0.0 <= u < K.width and 0.0 <= v < K.height):
        raise OutOfImageError(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    R = torch.as_tensor(pose.R)
    t = torch.as_tensor(pose.t)
    o, d = rays_through_pixels(K, R, t, torch.tensor([[u, v]], dtype=torch.float64))
    return Ray(origin=o[0], direction=d[0], pixel=(u, v), view_id=view_id)


def project_points(K: Intrinsics, R: Tensor, t: Tensor, pts: Tensor) -> tuple[Tensor, Tensor]:
    """Project world points into pixel coordinates of a camera-to-world pose.

    Returns ``(uv [N,2], depth [N])`` where ``depth`` is the distance along
    the optical axis (positive in front of the camera).  Points at or behind
    the camera plane produce non-positive depth; callers must mask them.
    """
    p_cam = (pts - t) @ R
    depth = -p_cam[..., 2]
    safe = torch.where(depth.abs() < 1e-12, torch.full_like(depth, 1e-12), depth)
    u = K.cx + K.fx * p_cam[..., 0] / safe - 0.5
    v = K.cy - K.fy * p_cam[..., 1] / safe - 0.5
    return torch.stack((u, v), dim=-1), depth


# ---------------------------------------------------------------------------
# se(3) noise
# ---------------------------------------------------------------------------


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(omega)
    K = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def se3_exp(xi: np.ndarray) -> RigidPose:
    """Exponential map of a twist ``xi = (rho, omega)`` (translation first)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, omega = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    R = so3_exp(omega)
    K = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta < 1e-12:
        V = np.eye(3) + 0.5 * K + K @ K / 6.0
    else:
        V = (
            np.eye(3)
            + (1.0 - math.cos(theta)) / theta**2 * K
            + (theta - math.sin(theta)) / theta**3 * (K @ K)
        )
    return RigidPose(R, V @ rho)


def perturb_pose(pose: RigidPose, n: float, rng) -> RigidPose:
    """Left-multiply ``pose`` by a random rigid motion ``exp(xi)``.

    Each of the six twist components is drawn i.i.d. from ``N(0, n^2)``
    (``n`` is the per-component standard deviation).  ``n = 0`` returns the
    input unchanged.  ``rng`` is an integer seed or ``numpy.random.Generator``.
    """
    if n < 0:
        raise GeometryError("noise scale must be non-negative")
    if n == 0:
        return RigidPose(pose.R.copy(), pose.t.copy())
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    xi = rng.normal(0.0, n, size=6)
    return se3_exp(xi).compose(pose)


# ---------------------------------------------------------------------------
# Trajectory alignment
# ---------------------------------------------------------------------------


def rotation_geodesic_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cos = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def procrustes_align(
    optimized: list[RigidPose], reference: list[RigidPose]
) -> tuple[SimilarityTransform, float, float]:
    """Align optimized camera centers to reference centers (Umeyama, with scale).

    Returns the similarity transform minimizing squared center distances,
    the mean geodesic rotation error in degrees after applying the
    transform's rotation to every optimized orientation, and the mean
    residual center distance in world units.
    """
    if len(optimized) != len(reference):
        raise GeometryError("pose lists must have equal length")
    if len(optimized) < 3:
        raise GeometryError("need at least 3 poses for alignment")
    src = np.stack([p.center for p in optimized])
    dst = np.stack([p.center for p in reference])

    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / len(src)
    if var_s < 1e-18:
        raise DegenerateConfigurationError("optimized camera centers are coincident")
    # Collinearity check: second singular value of the centered cloud.
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateConfigurationError("camera centers are collinear")

    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    if scale <= 0:
        raise DegenerateConfigurationError("alignment produced a non-positive scale")
    t = mu_d - scale * R @ mu_s
    sim = SimilarityTransform(scale, R, t)

    rot_err = float(
        np.mean(
            [rotation_geodesic_deg(R @ o.R, r.R) for o, r in zip(optimized, reference)]
        )
    )
    trans_err = float(np.mean(np.linalg.norm(sim.apply_points(src) - dst, axis=1)))
    return sim, rot_err, trans_err
