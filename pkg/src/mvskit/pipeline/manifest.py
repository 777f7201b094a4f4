"""Scene manifest schema, image loading, and frame construction.

A scene is a JSON manifest plus image files::

    {
      "units": "meters",
      "frames": [
        {
          "id": "frame_000",
          "image": "images/frame_000.png",
          "intrinsics": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..},
          "world_from_camera": [r00, r01, r02, tx, ...],   # 4x4 row-major
          "gt_depth": "depth/frame_000.png",               # optional, 16-bit PNG
          "depth_scale": 1000.0                            # optional, default 1000
        }
      ]
    }

Images may be 8- or 16-bit PNG or PGM; values are normalized to [0, 1].
GT depth PNGs are 16-bit with depth = pixel / depth_scale and 0 = invalid.
Stored poses are accepted up to an orthonormality deviation of 1e-4 and
snapped to the nearest rotation so downstream math sees exact members of
SO(3).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..depthestimate import load_depth_png
from ..features import ImageGrid
from ..geometry import CameraFrame, Intrinsics, RigidPose

# Stored poses may carry this much orthonormality error before rejection.
POSE_LOAD_TOL = 1e-4


class ManifestError(ValueError):
    """Raised for malformed or inconsistent scene manifests."""


@dataclass(frozen=True)
class FrameEntry:
    id: str
    image_path: str
    intrinsics: Intrinsics
    world_from_camera: RigidPose
    gt_depth_path: str | None = None
    depth_scale: float = 1000.0


@dataclass(frozen=True)
class SceneManifest:
    frames: tuple[FrameEntry, ...]
    units: str = ""
    root: Path = field(default_factory=Path)

    def frame_ids(self) -> list[str]:
        return [f.id for f in self.frames]

    def entry(self, frame_id: str) -> FrameEntry:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(f"no frame with id {frame_id!r}")


def _snap_rotation(rot: np.ndarray, frame_id: str) -> np.ndarray:
    """Project a near-rotation onto SO(3); reject if too far or reflected."""
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > POSE_LOAD_TOL:
        raise ManifestError(
            f"frame {frame_id!r}: pose rotation is not orthonormal "
            f"(max deviation {err:.3e} > {POSE_LOAD_TOL})"
        )
    if np.linalg.det(rot) < 0:
        raise ManifestError(
            f"frame {frame_id!r}: pose rotation has determinant -1 (reflection)"
        )
    u, _, vt = np.linalg.svd(rot)
    snapped = u @ vt
    if np.linalg.det(snapped) < 0:
        u[:, -1] = -u[:, -1]
        snapped = u @ vt
    return snapped


def load_manifest(path) -> SceneManifest:
    """Parse and validate a scene manifest (no image loading).

    Raises:
        ManifestError: Missing file, malformed JSON, duplicate ids, bad
            intrinsics or poses; messages name the offending frame.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise ManifestError(f"{path}: manifest must be an object with a 'frames' list")
    if not doc["frames"]:
        raise ManifestError(f"{path}: manifest has no frames")

    entries = []
    seen = set()
    for i, raw in enumerate(doc["frames"]):
        fid = raw.get("id")
        if not isinstance(fid, str) or not fid:
            raise ManifestError(f"{path}: frame {i} has no usable 'id'")
        if fid in seen:
            raise ManifestError(f"{path}: duplicate frame id {fid!r}")
        seen.add(fid)
        try:
            k = raw["intrinsics"]
            intr = Intrinsics(
                fx=float(k["fx"]),
                fy=float(k["fy"]),
                cx=float(k["cx"]),
                cy=float(k["cy"]),
                width=int(k["width"]),
                height=int(k["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"frame {fid!r}: bad intrinsics: {exc}") from exc
        pose_vals = raw.get("world_from_camera")
        if not isinstance(pose_vals, list) or len(pose_vals) != 16:
            raise ManifestError(
                f"frame {fid!r}: world_from_camera must be 16 row-major floats"
            )
        mat = np.asarray(pose_vals, dtype=np.float64).reshape(4, 4)
        rot = _snap_rotation(mat[:3, :3], fid)
        pose = RigidPose(rot, mat[:3, 3])
        if "image" not in raw:
            raise ManifestError(f"frame {fid!r}: missing 'image' path")
        entries.append(
            FrameEntry(
                id=fid,
                image_path=str(raw["image"]),
                intrinsics=intr,
                world_from_camera=pose,
                gt_depth_path=raw.get("gt_depth"),
                depth_scale=float(raw.get("depth_scale", 1000.0)),
            )
        )
    return SceneManifest(
        frames=tuple(entries), units=str(doc.get("units", "")), root=path.parent
    )


def load_image(path) -> ImageGrid:
    """Load an 8/16-bit PNG or PGM image, normalized to [0, 1]."""
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise ManifestError(f"image file not found: {path}")
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        data = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        data = arr.astype(np.float32) / 65535.0
    else:
        raise ManifestError(f"{path}: unsupported image dtype {arr.dtype}")
    if data.ndim == 3 and data.shape[2] == 4:
        data = data[:, :, :3]
    return ImageGrid.from_array(np.clip(data, 0.0, 1.0))


def load_scene(path) -> tuple[SceneManifest, list[CameraFrame]]:
    """Load a manifest plus every referenced image and GT depth map.

    Raises:
        ManifestError: For any missing file or dimension mismatch; the
            message names the frame.
    """
    manifest = load_manifest(path)
    frames = []
    for entry in manifest.frames:
        image = load_image(manifest.root / entry.image_path)
        gt = None
        if entry.gt_depth_path is not None:
            gt_path = manifest.root / entry.gt_depth_path
            if not gt_path.exists():
                raise ManifestError(f"frame {entry.id!r}: GT depth file not found: {gt_path}")
            gt = load_depth_png(gt_path, depth_scale=entry.depth_scale)
        try:
            frames.append(
                CameraFrame(
                    id=entry.id,
                    intrinsics=entry.intrinsics,
                    world_from_camera=entry.world_from_camera,
                    image=image,
                    gt_depth=gt,
                )
            )
        except ValueError as exc:
            raise ManifestError(str(exc)) from exc
    return manifest, frames


def save_manifest(manifest: SceneManifest, path) -> None:
    doc = {
        "units": manifest.units,
        "frames": [
            {
                "id": e.id,
                "image": e.image_path,
                "intrinsics": {
                    "fx": e.intrinsics.fx,
                    "fy": e.intrinsics.fy,
                    "cx": e.intrinsics.cx,
                    "cy": e.intrinsics.cy,
                    "width": e.intrinsics.width,
                    "height": e.intrinsics.height,
                },
                "world_from_camera": [
                    float(v) for v in e.world_from_camera.as_matrix().ravel()
                ],
                **(
                    {"gt_depth": e.gt_depth_path, "depth_scale": e.depth_scale}
                    if e.gt_depth_path
                    else {}
                ),
            }
            for e in manifest.frames
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2))
