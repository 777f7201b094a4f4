"""Sparse TSDF fusion, marching-cubes extraction, and mesh evaluation.

The volume stores 16^3-voxel blocks in a hash map keyed by block
coordinates, so scenes of any extent only pay for space near observed
surfaces. Integration follows the standard projective update: a voxel in
front of the observed surface moves toward +1, voxels within the
truncation band take the clamped signed distance, and voxels more than
one truncation behind the surface are left untouched.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree

from .depthestimate import DepthMap
from .features import feature_to_image_coords, image_to_feature_coords
from .geometry import CameraFrame

BLOCK = 16  # voxels per block edge


class PlyFormatError(ValueError):
    """Raised when a PLY file cannot be parsed."""


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle set; vertices (V, 3) float64, triangles (F, 3) int32."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if v.size and not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices contain non-finite values")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle indices out of vertex range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.triangles) == 0

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))


class TsdfVolume:
    """Truncated signed distance field over sparse voxel blocks.

    Voxel (i, j, k) covers the cube origin + [idx, idx+1) * voxel_size;
    its sample point is the cube center. Stored tsdf values live in
    [-1, 1] (signed distance over truncation); weights grow by 1 per
    observation up to `weight_cap`.
    """

    def __init__(
        self,
        voxel_size: float = 0.04,
        truncation: float | None = None,
        max_fuse_depth: float = 3.5,
        origin: Iterable[float] = (0.0, 0.0, 0.0),
        weight_cap: float = 128.0,
    ) -> None:
        if voxel_size <= 0.0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation) if truncation is not None else 3.0 * voxel_size
        if self.truncation <= 0.0:
            raise ValueError(f"truncation must be positive, got {self.truncation}")
        self.max_fuse_depth = float(max_fuse_depth)
        self.origin = np.asarray(tuple(origin), dtype=np.float64).reshape(3)
        self.weight_cap = float(weight_cap)
        self._blocks: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def block_count(self) -> int:
        return len(self._blocks)

    def block_keys(self) -> list[tuple[int, int, int]]:
        return list(self._blocks.keys())

    def _get_block(self, key: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
        blk = self._blocks.get(key)
        if blk is None:
            blk = (
                np.zeros((BLOCK, BLOCK, BLOCK), dtype=np.float32),
                np.zeros((BLOCK, BLOCK, BLOCK), dtype=np.float32),
            )
            self._blocks[key] = blk
        return blk

    def voxel_centers(self, key: tuple[int, int, int]) -> np.ndarray:
        """World-space centers of all voxels in one block, shape (BLOCK^3, 3)."""
        base = np.array(key, dtype=np.float64) * BLOCK
        ii, jj, kk = np.meshgrid(np.arange(BLOCK), np.arange(BLOCK), np.arange(BLOCK), indexing="ij")
        local = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        return self.origin + (base + local + 0.5) * self.voxel_size

    def write_sdf(self, lo, hi, sdf_fn) -> "TsdfVolume":
        """Seed the volume from an analytic signed-distance function.

        Allocates every block intersecting the axis-aligned box [lo, hi]
        and stores clip(sdf / truncation, -1, 1) with weight 1 at each
        voxel center. Intended for tests and synthetic fixtures.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        lo_blk = np.floor((lo - self.origin) / (self.voxel_size * BLOCK)).astype(np.int64)
        hi_blk = np.floor((hi - self.origin) / (self.voxel_size * BLOCK)).astype(np.int64)
        for bx in range(lo_blk[0], hi_blk[0] + 1):
            for by in range(lo_blk[1], hi_blk[1] + 1):
                for bz in range(lo_blk[2], hi_blk[2] + 1):
                    key = (bx, by, bz)
                    tsdf, weight = self._get_block(key)
                    values = sdf_fn(self.voxel_centers(key)) / self.truncation
                    tsdf[...] = np.clip(values, -1.0, 1.0).reshape(BLOCK, BLOCK, BLOCK)
                    weight[...] = 1.0
        return self

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(tsdf, weight) at the voxels containing each point; weight 0 if unallocated."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)
        block = idx // BLOCK
        local = idx - block * BLOCK
        tsdf = np.zeros(len(pts))
        weight = np.zeros(len(pts))
        for n in range(len(pts)):
            blk = self._blocks.get(tuple(block[n]))
            if blk is None:
                continue
            i, j, k = local[n]
            tsdf[n] = blk[0][i, j, k]
            weight[n] = blk[1][i, j, k]
        return tsdf, weight


def integrate_depth_map(vol: TsdfVolume, frame: CameraFrame, depth: DepthMap) -> TsdfVolume:
    """Fuse one posed depth map into the volume (mutates and returns it).

    The depth map either matches the frame resolution or sits on an
    integer-stride grid of it (the feature-grid convention). Pixels that
    are invalid or deeper than `max_fuse_depth` contribute nothing.
    Blocks are allocated within one truncation of observed surface
    points; every voxel of an allocated block that projects onto a usable
    depth sample and is not more than one truncation behind the surface
    is merged by weighted running average. The depth at a projection is
    interpolated bilinearly and trusted only when all four neighboring
    pixels are observed and agree within one truncation, which keeps
    silhouette and depth-discontinuity pixels from smearing false
    surface into free space.

    Requires exclusive access to `vol`; callers serialize integrations.
    """
    intr = frame.intrinsics
    if intr.width % depth.width or intr.height % depth.height:
        raise ValueError(
            f"depth grid {depth.width}x{depth.height} is not an integer-stride grid "
            f"of the {intr.width}x{intr.height} frame"
        )
    scale = intr.width // depth.width
    if intr.height // depth.height != scale:
        raise ValueError("depth grid stride differs between axes")

    usable = depth.valid & (depth.depth <= vol.max_fuse_depth)
    if not usable.any():
        return vol

    # Surface points in world space, from depth-grid pixel centers.
    ys, xs = np.nonzero(usable)
    d = depth.depth[ys, xs]
    u_img = feature_to_image_coords(xs.astype(np.float64), scale)
    v_img = feature_to_image_coords(ys.astype(np.float64), scale)
    dirs = np.stack(
        [(u_img - intr.cx) / intr.fx, (v_img - intr.cy) / intr.fy, np.ones_like(u_img)],
        axis=1,
    )
    p_world = frame.world_from_camera.transform(dirs * d[:, None])

    # Allocate blocks touching the truncation band around the surface.
    t = vol.truncation
    keys: set[tuple[int, int, int]] = set()
    for off in np.array(np.meshgrid([-t, 0.0, t], [-t, 0.0, t], [-t, 0.0, t])).T.reshape(-1, 3):
        idx = np.floor((p_world + off - vol.origin) / vol.voxel_size).astype(np.int64)
        blocks = idx // BLOCK
        keys.update(map(tuple, np.unique(blocks, axis=0)))

    cam_from_world = frame.camera_from_world
    usable_depth = np.where(usable, depth.depth, 0.0)
    for key in sorted(keys):
        tsdf, weight = vol._get_block(key)
        centers = vol.voxel_centers(key)
        p_cam = cam_from_world.transform(centers)
        z = p_cam[:, 2]
        front = z > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * p_cam[:, 0] / z + intr.cx
            v = intr.fy * p_cam[:, 1] / z + intr.cy
        x_c = image_to_feature_coords(np.where(front, u, -1.0), scale)
        y_c = image_to_feature_coords(np.where(front, v, -1.0), scale)
        inside = (
            front
            & (x_c >= 0.0)
            & (x_c <= depth.width - 1)
            & (y_c >= 0.0)
            & (y_c <= depth.height - 1)
        )
        x0 = np.clip(np.floor(x_c).astype(np.int64), 0, max(depth.width - 2, 0))
        y0 = np.clip(np.floor(y_c).astype(np.int64), 0, max(depth.height - 2, 0))
        x1 = np.minimum(x0 + 1, depth.width - 1)
        y1 = np.minimum(y0 + 1, depth.height - 1)
        corners = np.stack(
            [usable_depth[y0, x0], usable_depth[y0, x1], usable_depth[y1, x0], usable_depth[y1, x1]]
        )
        # A depth sample is trusted only away from silhouettes and depth
        # edges: all four neighbors observed and mutually consistent.
        all_valid = (corners > 0.0).all(axis=0)
        continuous = (corners.max(axis=0) - corners.min(axis=0)) <= vol.truncation
        fx_w = x_c - x0
        fy_w = y_c - y0
        top = corners[0] + (corners[1] - corners[0]) * fx_w
        bot = corners[2] + (corners[3] - corners[2]) * fx_w
        d_px = top + (bot - top) * fy_w
        ok = inside & all_valid & continuous
        sdf = d_px - z
        ok &= sdf >= -vol.truncation
        if not ok.any():
            continue
        value = np.clip(sdf / vol.truncation, -1.0, 1.0).astype(np.float32)
        sel = ok.reshape(BLOCK, BLOCK, BLOCK)
        w_old = weight[sel]
        tsdf[sel] = (tsdf[sel] * w_old + value.reshape(BLOCK, BLOCK, BLOCK)[sel]) / (w_old + 1.0)
        weight[sel] = np.minimum(w_old + 1.0, vol.weight_cap)
    return vol


def extract_mesh(vol: TsdfVolume) -> TriangleMesh:
    """Zero-crossing surface via marching cubes over the allocated region.

    Only grid cells whose 8 corners all carry weight > 0 can emit
    triangles; vertex positions are linearly interpolated along cell
    edges. An all-positive (or unobserved) volume yields an empty mesh.
    """
    if not vol._blocks:
        return TriangleMesh.empty()
    keys = np.array(sorted(vol._blocks.keys()), dtype=np.int64)
    lo = keys.min(axis=0)
    hi = keys.max(axis=0)
    shape = (hi - lo + 1) * BLOCK
    tsdf = np.zeros(shape, dtype=np.float32)
    weight = np.zeros(shape, dtype=np.float32)
    for key, (t_blk, w_blk) in vol._blocks.items():
        a = (np.array(key) - lo) * BLOCK
        tsdf[a[0] : a[0] + BLOCK, a[1] : a[1] + BLOCK, a[2] : a[2] + BLOCK] = t_blk
        weight[a[0] : a[0] + BLOCK, a[1] : a[1] + BLOCK, a[2] : a[2] + BLOCK] = w_blk

    obs = weight > 0.0
    if not obs.any():
        return TriangleMesh.empty()
    from skimage import measure

    # Unobserved voxels are painted as free space; every triangle they
    # could still touch is removed by the cell filter below.
    field = np.where(obs, tsdf, 1.0)
    try:
        verts, faces, _, _ = measure.marching_cubes(field, level=0.0)
    except (RuntimeError, ValueError):
        # No zero crossing anywhere in the volume.
        return TriangleMesh.empty()

    cell_ok = (
        obs[:-1, :-1, :-1]
        & obs[1:, :-1, :-1]
        & obs[:-1, 1:, :-1]
        & obs[:-1, :-1, 1:]
        & obs[1:, 1:, :-1]
        & obs[1:, :-1, 1:]
        & obs[:-1, 1:, 1:]
        & obs[1:, 1:, 1:]
    )
    centroids = verts[faces].mean(axis=1)
    cells = np.clip(
        np.floor(centroids).astype(np.int64), 0, np.asarray(cell_ok.shape) - 1
    )
    keep = cell_ok[cells[:, 0], cells[:, 1], cells[:, 2]]
    faces = faces[keep]
    if len(faces) == 0:
        return TriangleMesh.empty()
    used = np.unique(faces)
    remap = np.zeros(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    faces = remap[faces]
    world = vol.origin + (lo * BLOCK + verts + 0.5) * vol.voxel_size
    return TriangleMesh(world, faces.astype(np.int32))


def sample_surface_points(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Uniformly sample n points over the mesh surface (area-weighted).

    Deterministic for a fixed seed.

    Raises:
        ValueError: On an empty mesh or n < 1.
    """
    if mesh.is_empty:
        raise ValueError("cannot sample points from an empty mesh")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    tri = mesh.vertices[mesh.triangles]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(areas), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    t = tri[chosen]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])


@dataclass(frozen=True)
class MeshDistanceResult:
    accuracy: float  # mean over GT vertices of nearest predicted-vertex distance
    completion: float  # mean over predicted vertices of nearest GT-vertex distance
    chamfer: float


def mesh_distance_metrics(pred: TriangleMesh, gt: TriangleMesh) -> MeshDistanceResult:
    """Vertex-to-vertex distance metrics between two meshes.

    Accuracy averages, over GT vertices, the distance to the nearest
    predicted vertex; completion averages, over predicted vertices, the
    distance to the nearest GT vertex; chamfer is their mean. Exact
    nearest neighbors via a KD-tree.

    Raises:
        ValueError: If either mesh has no vertices.
    """
    if len(pred.vertices) == 0 or len(gt.vertices) == 0:
        raise ValueError("mesh_distance_metrics requires non-empty meshes")
    d_gt_to_pred, _ = cKDTree(pred.vertices).query(gt.vertices, k=1)
    d_pred_to_gt, _ = cKDTree(gt.vertices).query(pred.vertices, k=1)
    acc = float(np.mean(d_gt_to_pred))
    comp = float(np.mean(d_pred_to_gt))
    return MeshDistanceResult(accuracy=acc, completion=comp, chamfer=0.5 * (acc + comp))


def fscore_at_threshold(
    pred_pts: np.ndarray, gt_pts: np.ndarray, thresh: float = 0.05
) -> tuple[float, float, float]:
    """Precision / recall / F-score of two point sets at a distance threshold.

    Precision is the fraction of predicted points within `thresh` of some
    GT point; recall the fraction of GT points within `thresh` of some
    predicted point; F = 2PR / (P + R) (0 when both are 0).

    Raises:
        ValueError: If either set is empty.
    """
    pred = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("fscore_at_threshold requires non-empty point sets")
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    precision = float(np.mean(d_pred < thresh))
    recall = float(np.mean(d_gt < thresh))
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f


def _format_f32(v: float) -> str:
    return np.format_float_positional(np.float32(v), unique=True, trim="0")


def write_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    """Write a PLY mesh: float32 vertices, uchar-count + int32 face indices."""
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    verts = mesh.vertices.astype("<f4")
    faces = mesh.triangles.astype("<i4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(verts).tobytes())
            for face in faces:
                fh.write(struct.pack("<B3i", 3, *face))
        else:
            lines = []
            for vert in verts:
                lines.append(" ".join(_format_f32(c) for c in vert))
            for face in faces:
                lines.append("3 " + " ".join(str(int(i)) for i in face))
            fh.write(("\n".join(lines) + "\n" if lines else "").encode("ascii"))


def load_ply(path) -> TriangleMesh:
    """Read an ASCII or binary-little-endian PLY mesh with x/y/z vertices.

    Raises:
        PlyFormatError: On malformed headers, unsupported layouts, or
            truncated payloads.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"ply"):
        raise PlyFormatError(f"{path}: not a PLY file (bad magic at byte offset 0)")
    end = blob.find(b"end_header\n")
    if end < 0:
        raise PlyFormatError(f"{path}: missing end_header")
    header_lines = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n") :]

    fmt = None
    n_verts = n_faces = 0
    current = None
    vertex_props: list[str] = []
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_verts = int(parts[2])
            elif current == "face":
                n_faces = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            if parts[1] != "list":
                vertex_props.append(parts[-1])
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyFormatError(f"{path}: unsupported format {fmt!r}")
    if vertex_props[:3] != ["x", "y", "z"] or len(vertex_props) != 3:
        raise PlyFormatError(
            f"{path}: expected exactly float x/y/z vertex properties, got {vertex_props}"
        )

    if fmt == "ascii":
        text = body.decode("ascii", errors="replace").split()
        need = n_verts * 3
        if len(text) < need:
            raise PlyFormatError(f"{path}: truncated vertex data ({len(text)} of {need} values)")
        verts = np.array(text[:need], dtype=np.float32).reshape(n_verts, 3)
        rest = text[need:]
        faces = np.zeros((n_faces, 3), dtype=np.int32)
        pos = 0
        for i in range(n_faces):
            if pos >= len(rest):
                raise PlyFormatError(f"{path}: truncated face data at face {i}")
            cnt = int(rest[pos])
            if cnt != 3:
                raise PlyFormatError(f"{path}: only triangles supported, face {i} has {cnt}")
            faces[i] = [int(x) for x in rest[pos + 1 : pos + 4]]
            pos += 4
    else:
        need = n_verts * 12
        if len(body) < need:
            raise PlyFormatError(
                f"{path}: truncated vertex payload at byte offset "
                f"{end + 11 + len(body)} (need {need} bytes of vertices)"
            )
        verts = np.frombuffer(body[:need], dtype="<f4").reshape(n_verts, 3)
        offset = need
        faces = np.zeros((n_faces, 3), dtype=np.int32)
        for i in range(n_faces):
            if offset + 13 > len(body):
                raise PlyFormatError(f"{path}: truncated face payload at face {i}")
            cnt = body[offset]
            if cnt != 3:
                raise PlyFormatError(f"{path}: only triangles supported, face {i} has {cnt}")
            faces[i] = struct.unpack_from("<3i", body, offset + 1)
            offset += 13
    try:
        return TriangleMesh(verts.astype(np.float64), faces)
    except ValueError as exc:
        raise PlyFormatError(f"{path}: {exc}") from exc
