"""Procedural test scenes with exact poses and analytic ground-truth depth.

Three surface kinds are supported:

* ``plane``      - a fronto-parallel textured plane, viewed from a lateral
  translation rig (identity rotations). This is the workhorse matching
  fixture because its geometry is exactly known everywhere.
* ``two-planes`` - two fronto-parallel half-planes at different depths
  joined by a vertical wall, giving a depth discontinuity.
* ``sphere``     - a textured sphere orbited by inward-looking cameras,
  used for fusion tests.

Textures come from multi-octave value noise driven by an integer hash, so
the same seed always renders bit-identical images; pixel values are
quantized to the 16-bit grid at render time so in-memory scenes match
their on-disk PNG round trip exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..depthestimate import DepthMap, write_depth_png
from ..features import ImageGrid
from ..geometry import CameraFrame, Intrinsics, RigidPose
from .manifest import FrameEntry, SceneManifest, save_manifest

SCENE_KINDS = ("plane", "sphere", "two-planes")


@dataclass(frozen=True)
class SynthConfig:
    """Geometry and rendering knobs for synthetic scenes.

    The default lateral baseline is chosen so the plane sits at an
    integer disparity in 4x-downsampled feature cells (32 image pixels),
    which keeps the matching fixture well conditioned.
    """

    width: int = 256
    height: int = 192
    focal_frac: float = 0.78125  # fx = fy = focal_frac * width
    plane_depth: float = 2.0
    second_plane_depth: float = 3.0
    baseline_step: float | None = None  # None -> 32 px disparity at plane_depth
    sphere_radius: float = 0.5
    orbit_radius: float = 1.6
    orbit_elevation_deg: float = 25.0
    texture_octaves: int = 5
    texture_scale: float = 5.0  # lattice cells per scene unit at the base octave

    def lateral_baseline(self) -> float:
        if self.baseline_step is not None:
            return self.baseline_step
        return 32.0 * self.plane_depth / (self.focal_frac * self.width)


@dataclass(frozen=True)
class SyntheticScene:
    kind: str
    frames: tuple[CameraFrame, ...]
    config: SynthConfig
    seed: int


def _hash01(coords: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash of integer coords (N, D) to [0, 1)."""
    h = np.full(coords.shape[0], np.uint64(seed * 0x9E3779B97F4A7C15 & 0xFFFFFFFFFFFFFFFF))
    mults = (0xBF58476D1CE4E5B9, 0x94D049BB133111EB, 0xD6E8FEB86659FD93)
    with np.errstate(over="ignore"):
        for d in range(coords.shape[1]):
            c = coords[:, d].astype(np.int64).astype(np.uint64)
            h ^= c * np.uint64(mults[d % 3] & 0xFFFFFFFFFFFFFFFF)
            h ^= h >> np.uint64(31)
            h *= np.uint64(0x2545F4914F6CDD1D)
        h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _value_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """Smoothly interpolated lattice noise for (N, D) points, D in {2, 3}."""
    base = np.floor(points)
    frac = _smoothstep(points - base)
    base_i = base.astype(np.int64)
    dim = points.shape[1]
    out = np.zeros(points.shape[0])
    for corner in range(1 << dim):
        offs = np.array([(corner >> d) & 1 for d in range(dim)], dtype=np.int64)
        vals = _hash01(base_i + offs, seed)
        w = np.ones(points.shape[0])
        for d in range(dim):
            w = w * (frac[:, d] if offs[d] else (1.0 - frac[:, d]))
        out += w * vals
    return out


def texture_at(points: np.ndarray, seed: int, octaves: int, scale: float) -> np.ndarray:
    """Multi-octave value noise in [0, 1] for world-space points (N, D)."""
    pts = np.asarray(points, dtype=np.float64) * scale
    total = np.zeros(pts.shape[0])
    amp_sum = 0.0
    amp = 1.0
    for o in range(octaves):
        total += amp * _value_noise(pts * (2.0**o), seed + o)
        amp_sum += amp
        amp *= 0.6
    return total / amp_sum


def _default_intrinsics(cfg: SynthConfig) -> Intrinsics:
    f = cfg.focal_frac * cfg.width
    return Intrinsics(
        fx=f,
        fy=f,
        cx=(cfg.width - 1) / 2.0,
        cy=(cfg.height - 1) / 2.0,
        width=cfg.width,
        height=cfg.height,
    )


def _look_at(eye: np.ndarray, target: np.ndarray) -> RigidPose:
    """World-from-camera pose with +z toward target (x right, y down)."""
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up_hint = np.array([0.0, -1.0, 0.0])
    if abs(np.dot(fwd, up_hint)) > 0.999:
        up_hint = np.array([1.0, 0.0, 0.0])
    right = np.cross(up_hint, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return RigidPose(rot, eye)


def _pixel_rays(intr: Intrinsics) -> np.ndarray:
    """Camera-frame directions with unit z, one per pixel, shape (H*W, 3)."""
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return np.stack(
        [
            (us.ravel() - intr.cx) / intr.fx,
            (vs.ravel() - intr.cy) / intr.fy,
            np.ones(us.size),
        ],
        axis=1,
    )


def _quantize_16bit(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 65535.0) / 65535.0


def _render_plane(
    pose: RigidPose, intr: Intrinsics, plane_z: float, seed: int, cfg: SynthConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Depth, validity, and texture for a single fronto plane at world z."""
    rays = _pixel_rays(intr)
    w = rays @ pose.rotation.T  # world directions, one per pixel
    eye = pose.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane_z - eye[2]) / w[:, 2]
    valid = np.isfinite(t) & (t > 0)
    t = np.where(valid, t, 1.0)
    pts = eye + w * t[:, None]
    tex = texture_at(pts[:, :2], seed, cfg.texture_octaves, cfg.texture_scale)
    return t, valid, tex


def _render_frame(
    kind: str, pose: RigidPose, intr: Intrinsics, seed: int, cfg: SynthConfig
) -> tuple[ImageGrid, DepthMap]:
    rays = _pixel_rays(intr)
    w = rays @ pose.rotation.T
    eye = pose.translation

    if kind == "plane":
        depth, valid, tex = _render_plane(pose, intr, cfg.plane_depth, seed, cfg)
    elif kind == "two-planes":
        z1, z2 = cfg.plane_depth, cfg.second_plane_depth
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (z1 - eye[2]) / w[:, 2]
            t2 = (z2 - eye[2]) / w[:, 2]
            t_wall = -eye[0] / w[:, 0]
        p1x = eye[0] + w[:, 0] * t1
        p2x = eye[0] + w[:, 0] * t2
        wall_z = eye[2] + w[:, 2] * t_wall
        ok1 = np.isfinite(t1) & (t1 > 0) & (p1x < 0.0)
        ok2 = np.isfinite(t2) & (t2 > 0) & (p2x >= 0.0)
        okw = np.isfinite(t_wall) & (t_wall > 0) & (wall_z >= z1) & (wall_z <= z2)
        stack = np.stack(
            [
                np.where(ok1, t1, np.inf),
                np.where(ok2, t2, np.inf),
                np.where(okw, t_wall, np.inf),
            ]
        )
        depth = stack.min(axis=0)
        valid = np.isfinite(depth)
        depth = np.where(valid, depth, 1.0)
        pts = eye + w * depth[:, None]
        tex = texture_at(pts, seed, cfg.texture_octaves, cfg.texture_scale)
    elif kind == "sphere":
        r = cfg.sphere_radius
        a = (w * w).sum(axis=1)
        b = 2.0 * (w @ eye)
        c = float(eye @ eye) - r * r
        disc = b * b - 4.0 * a * c
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t_near = (-b - sq) / (2.0 * a)
        valid = hit & (t_near > 0.0)
        depth = np.where(valid, t_near, 1.0)
        pts = eye + w * depth[:, None]
        tex = texture_at(pts, seed, cfg.texture_octaves, cfg.texture_scale)
        tex = np.where(valid, tex, 0.0)
    else:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")

    shape = (intr.height, intr.width)
    image = ImageGrid.from_array(_quantize_16bit(tex).reshape(shape).astype(np.float32))
    gt = DepthMap(
        width=intr.width,
        height=intr.height,
        depth=depth.reshape(shape),
        valid=valid.reshape(shape),
    )
    return image, gt


def synth_scene(
    kind: str, n_frames: int, noise_seed: int = 0, cfg: SynthConfig = SynthConfig()
) -> SyntheticScene:
    """Render a synthetic scene with analytic GT depth on every frame.

    Plane scenes use a lateral rig (cameras spread along x, all looking
    +z); sphere scenes put cameras on two interleaved orbit rings looking
    at the center.

    Raises:
        ValueError: If n_frames < 2 or the kind is unknown.
    """
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    intr = _default_intrinsics(cfg)

    poses = []
    if kind in ("plane", "two-planes"):
        baseline = cfg.lateral_baseline()
        for i in range(n_frames):
            step = i - (n_frames - 1) / 2.0
            poses.append(RigidPose(np.eye(3), np.array([step * baseline, 0.0, 0.0])))
    else:
        elev = math.radians(cfg.orbit_elevation_deg)
        target = np.zeros(3)
        for i in range(n_frames):
            azim = 2.0 * math.pi * i / n_frames
            e = elev if i % 2 == 0 else -elev
            eye = cfg.orbit_radius * np.array(
                [math.cos(e) * math.cos(azim), math.sin(e), math.cos(e) * math.sin(azim)]
            )
            poses.append(_look_at(eye, target))

    frames = []
    for i, pose in enumerate(poses):
        image, gt = _render_frame(kind, pose, intr, noise_seed, cfg)
        frames.append(
            CameraFrame(
                id=f"frame_{i:03d}",
                intrinsics=intr,
                world_from_camera=pose,
                image=image,
                gt_depth=gt,
            )
        )
    return SyntheticScene(kind=kind, frames=tuple(frames), config=cfg, seed=noise_seed)


def write_scene(scene: SyntheticScene, out_dir, depth_scale: float = 1000.0) -> Path:
    """Materialize a synthetic scene as manifest + 16-bit PNGs; returns manifest path."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    entries = []
    for frame in scene.frames:
        img16 = np.round(frame.image.data[:, :, 0] * 65535.0).astype(np.uint16)
        Image.fromarray(img16).save(out / "images" / f"{frame.id}.png", format="PNG")
        write_depth_png(frame.gt_depth, out / "depth" / f"{frame.id}.png", depth_scale)
        entries.append(
            FrameEntry(
                id=frame.id,
                image_path=f"images/{frame.id}.png",
                intrinsics=frame.intrinsics,
                world_from_camera=frame.world_from_camera,
                gt_depth_path=f"depth/{frame.id}.png",
                depth_scale=depth_scale,
            )
        )
    manifest = SceneManifest(frames=tuple(entries), units="synthetic", root=out)
    manifest_path = out / "scene.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
