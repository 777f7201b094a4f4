"""Shared builders for small synthetic inputs."""

import numpy as np
import pytest

from mvskit.depthestimate import DepthMap
from mvskit.features import ImageGrid
from mvskit.geometry import CameraFrame, Intrinsics, RigidPose


def make_intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=16, height=16) -> Intrinsics:
    return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def make_image(width=16, height=16, value=0.5, rng=None) -> ImageGrid:
    if rng is None:
        data = np.full((height, width, 1), value, dtype=np.float32)
    else:
        data = rng.random((height, width, 1)).astype(np.float32)
    return ImageGrid.from_array(data)


def make_frame(
    frame_id="f0",
    intrinsics=None,
    pose=None,
    image=None,
    gt_depth=None,
) -> CameraFrame:
    intrinsics = intrinsics or make_intrinsics()
    pose = pose or RigidPose.identity()
    if image is None:
        image = make_image(intrinsics.width, intrinsics.height)
    return CameraFrame(
        id=frame_id,
        intrinsics=intrinsics,
        world_from_camera=pose,
        image=image,
        gt_depth=gt_depth,
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with determinant fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator, t_scale=1.0) -> RigidPose:
    return RigidPose(random_rotation(rng), rng.normal(scale=t_scale, size=3))


def constant_depth(width, height, value, valid=None) -> DepthMap:
    depth = np.full((height, width), float(value))
    if valid is None:
        valid = np.ones((height, width), dtype=bool)
    return DepthMap(width=width, height=height, depth=depth, valid=valid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
