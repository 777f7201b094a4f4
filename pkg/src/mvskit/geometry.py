"""Pinhole cameras, rigid transforms, plane-sweep correspondence, depth ranges.

Conventions used throughout the package:

* Camera frame is right-handed with x right, y down, z forward (into the
  scene).  A pixel (u, v) at depth d backprojects to
  ((u - cx) d / fx, (v - cy) d / fy, d).
* Scene manifests store world-from-camera poses; the camera-from-world
  inverse is derived once at load time and cached on the frame.
* All functions here are pure and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .depthestimate import DepthMap
    from .features import ImageGrid

# Orthonormality tolerance enforced on every RigidPose.
ROTATION_TOL = 1e-6
# Baselines below this are treated as zero (coincident camera centers).
ZERO_BASELINE_EPS = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels for an image of size width x height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rotation + translation; p_out = rotation @ p_in + translation.

    The rotation must be orthonormal with determinant +1 within
    ROTATION_TOL; construction rejects anything else.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tr)):
            raise ValueError("pose contains non-finite values")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation must have determinant +1, got {det:.9f}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "RigidPose":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {mat.shape}")
        return RigidPose(mat[:3, :3], mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def inverse(self) -> "RigidPose":
        rot_t = self.rotation.T
        return RigidPose(rot_t, -rot_t @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return the pose applying `other` first, then `self`."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to points of shape (3,) or (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def is_identity(self, tol: float = 1e-12) -> bool:
        return (
            np.abs(self.rotation - np.eye(3)).max() <= tol
            and np.abs(self.translation).max() <= tol
        )


@dataclass(frozen=True, eq=False)
class CameraFrame:
    """One posed view: intrinsics, world-from-camera pose, image, optional GT depth."""

    id: str
    intrinsics: Intrinsics
    world_from_camera: RigidPose
    image: "ImageGrid"
    gt_depth: "DepthMap | None" = None
    camera_from_world: RigidPose = field(init=False)

    def __post_init__(self) -> None:
        if self.image.width != self.intrinsics.width or self.image.height != self.intrinsics.height:
            raise ValueError(
                f"frame {self.id!r}: image is {self.image.width}x{self.image.height} "
                f"but intrinsics say {self.intrinsics.width}x{self.intrinsics.height}"
            )
        if self.gt_depth is not None and (
            self.gt_depth.width != self.intrinsics.width
            or self.gt_depth.height != self.intrinsics.height
        ):
            raise ValueError(f"frame {self.id!r}: GT depth dimensions do not match the image")
        object.__setattr__(self, "camera_from_world", self.world_from_camera.inverse())

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.world_from_camera.translation


@dataclass(frozen=True)
class RangeEstimate:
    """Depth search interval in scene units, 0 < d_min < d_max."""

    d_min: float
    d_max: float

    def __post_init__(self) -> None:
        if not (0.0 < self.d_min < self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")

    def scaled(self, factor: float) -> "RangeEstimate":
        return RangeEstimate(self.d_min * factor, self.d_max * factor)


@dataclass(frozen=True)
class RangeHeuristicConfig:
    """Constants for the disparity-band depth range heuristic.

    For each source with baseline b, depths are considered matchable while
    the fronto-parallel disparity f*b/d stays inside
    [min_disparity_px, max_disparity_frac * width].
    """

    max_disparity_frac: float = 0.3
    min_disparity_px: float = 2.0
    absolute_min: float = 1e-3
    absolute_max: float = 1e6
    fallback_min: float = 0.25
    fallback_max: float = 100.0


def project_point(intr: Intrinsics, p_cam: np.ndarray) -> tuple[float, float, float, bool]:
    """Project a camera-frame point to pixel coordinates.

    Returns (u, v, z, valid) where valid is False for points at or behind
    the camera plane (z <= 0); u and v are then meaningless.
    """
    x, y, z = np.asarray(p_cam, dtype=np.float64)
    if z <= 0.0:
        return 0.0, 0.0, float(z), False
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    return float(u), float(v), float(z), True


def project_points(
    intr: Intrinsics, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) camera-frame points.

    Returns (u, v, z, valid) arrays; u/v are zero where invalid.
    """
    pts = np.asarray(pts, dtype=np.float64)
    z = pts[:, 2]
    valid = z > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(valid, intr.fx * pts[:, 0] / z + intr.cx, 0.0)
        v = np.where(valid, intr.fy * pts[:, 1] / z + intr.cy, 0.0)
    return u, v, z, valid


def backproject_pixel(intr: Intrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Lift pixel (u, v) at the given depth to a camera-frame 3D point."""
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    return np.array(
        [(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth],
        dtype=np.float64,
    )


def pixel_directions(intr: Intrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions with unit z for arrays of pixel coords."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1
    )


def relative_pose(ref: RigidPose, src: RigidPose) -> RigidPose:
    """Map reference-camera coordinates to source-camera coordinates.

    Both arguments are world-from-camera poses. The result satisfies
    result o ref.inverse() == src.inverse() (as camera-from-world maps).
    """
    return src.inverse().compose(ref)


def pose_distance(rel: RigidPose) -> float:
    """Combined translation/rotation magnitude of a relative pose.

    Computed as sqrt(||t|| + (2/3) tr(I - R)); zero exactly when the pose
    is the identity.
    """
    t_norm = float(np.linalg.norm(rel.translation))
    rot_term = (2.0 / 3.0) * float(np.trace(np.eye(3) - rel.rotation))
    # tr(I - R) >= 0 for any rotation; guard float noise near identity.
    return float(np.sqrt(max(t_norm + rot_term, 0.0)))


def sweep_correspondence(
    ref: CameraFrame, src: CameraFrame, u: float, v: float, depth: float
) -> tuple[float, float, float, bool]:
    """Transport reference pixel (u, v) at a hypothesized depth into the source view.

    Backprojects the pixel, transforms it into the source camera, and
    projects it. Returns (u_s, v_s, z_s, valid); valid is False when the
    point lands behind the source camera or outside its image bounds
    [0, width-1] x [0, height-1].

    Raises:
        ValueError: If depth is not positive.
    """
    p_ref = backproject_pixel(ref.intrinsics, u, v, depth)
    rel = relative_pose(ref.world_from_camera, src.world_from_camera)
    p_src = rel.transform(p_ref)
    u_s, v_s, z_s, in_front = project_point(src.intrinsics, p_src)
    valid = (
        in_front
        and 0.0 <= u_s <= src.intrinsics.width - 1
        and 0.0 <= v_s <= src.intrinsics.height - 1
    )
    return u_s, v_s, z_s, valid


def estimate_matchable_range(
    ref: CameraFrame,
    sources: Sequence[CameraFrame],
    cfg: RangeHeuristicConfig = RangeHeuristicConfig(),
) -> RangeEstimate:
    """Infer the matchable depth interval from poses and intrinsics alone.

    For each source with a non-degenerate baseline b the disparity band
    [min_disparity_px, max_disparity_frac * width] maps to a per-source
    depth interval [f*b/d_max_px, f*b/d_min_px]; the union over sources is
    returned, clamped to the configured absolute bounds. If every baseline
    is below ZERO_BASELINE_EPS the configured fallback range is returned.

    Raises:
        ValueError: If `sources` is empty.
    """
    if len(sources) == 0:
        raise ValueError("estimate_matchable_range needs at least one source frame")
    f_mean = ref.intrinsics.mean_focal
    disp_max = cfg.max_disparity_frac * ref.intrinsics.width
    disp_min = cfg.min_disparity_px
    lo = np.inf
    hi = -np.inf
    for src in sources:
        rel = relative_pose(ref.world_from_camera, src.world_from_camera)
        baseline = float(np.linalg.norm(rel.translation))
        if baseline <= ZERO_BASELINE_EPS:
            continue
        lo = min(lo, f_mean * baseline / disp_max)
        hi = max(hi, f_mean * baseline / disp_min)
    if not np.isfinite(lo) or not np.isfinite(hi):
        return RangeEstimate(cfg.fallback_min, cfg.fallback_max)
    lo = max(lo, cfg.absolute_min)
    hi = min(hi, cfg.absolute_max)
    if lo >= hi:
        # The disparity band sits entirely outside the absolute window.
        return RangeEstimate(cfg.fallback_min, cfg.fallback_max)
    return RangeEstimate(lo, hi)
