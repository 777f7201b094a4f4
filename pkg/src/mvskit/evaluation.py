"""Depth losses and benchmark metrics.

Losses operate on depth-map pyramids the way the training objective is
defined: log-depth L1 over four scales with 1/s^2 weights, an L1 penalty
on inverse-depth gradients over four average-pooled scales, and a cosine
penalty between normal maps. Metrics are the per-pixel absolute relative
error and the strict inlier ratio at a depth-ratio threshold, averaged
per image first and then across images.

Invalid pixels never enter any mean; they are excluded, not zero-filled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .depthestimate import DepthMap
from .geometry import Intrinsics

INLIER_THRESHOLD = 1.03


@dataclass(frozen=True, eq=False)
class NormalMap:
    """Per-pixel unit normals with validity mask."""

    vectors: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class ImageMetrics:
    image_id: str
    abs_rel: float
    tau: float
    n_valid: int


@dataclass(frozen=True)
class DepthReport:
    """Two-level depth metrics: per-image means, then the mean over images."""

    abs_rel: float
    tau: float
    n_valid: int
    per_image: tuple[ImageMetrics, ...] = ()
    skipped: int = 0

    def to_json_dict(self) -> dict:
        return {
            "abs_rel": self.abs_rel,
            "tau": self.tau,
            "n_valid": self.n_valid,
            "skipped": self.skipped,
            "per_image": [
                {
                    "id": m.image_id,
                    "abs_rel": m.abs_rel,
                    "tau": m.tau,
                    "n_valid": m.n_valid,
                }
                for m in self.per_image
            ],
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    def format_table(self) -> str:
        """Fixed-width text table with one rel/tau row per image."""
        lines = [
            f"{'image':<24}{'rel':>10}{'tau':>10}{'pixels':>10}",
            "-" * 54,
        ]
        for m in self.per_image:
            lines.append(
                f"{m.image_id:<24}{m.abs_rel:>10.4f}{m.tau:>10.2f}{m.n_valid:>10d}"
            )
        lines.append("-" * 54)
        lines.append(
            f"{'average':<24}{self.abs_rel:>10.4f}{self.tau:>10.2f}{self.n_valid:>10d}"
        )
        if self.skipped:
            lines.append(f"(skipped {self.skipped} image(s) with no valid pixels)")
        return "\n".join(lines)


def _joint_mask(pred: DepthMap, gt: DepthMap) -> np.ndarray:
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ValueError(
            f"depth maps differ in size: {pred.width}x{pred.height} vs {gt.width}x{gt.height}"
        )
    return pred.valid & gt.valid


def log_depth_l1(pred_pyramid: Sequence[DepthMap], gt: DepthMap) -> float:
    """Multi-scale L1 loss on log depth against a full-resolution GT map.

    Scale s (1-based) must measure ceil(H / 2^(s-1)) x ceil(W / 2^(s-1));
    each level is aligned to the GT grid by nearest-neighbor upsampling,
    weighted by 1/s^2, and averaged over the pixels where both the GT and
    the upsampled prediction are valid.

    Raises:
        ValueError: On an empty pyramid, a wrongly sized level, or no
            valid GT pixels.
    """
    if not 1 <= len(pred_pyramid) <= 4:
        raise ValueError(f"expected 1..4 pyramid levels, got {len(pred_pyramid)}")
    if gt.n_valid == 0:
        raise ValueError("GT depth map has no valid pixels")
    h, w = gt.height, gt.width
    total = 0.0
    for s, level in enumerate(pred_pyramid, start=1):
        factor = 2 ** (s - 1)
        eh, ew = math.ceil(h / factor), math.ceil(w / factor)
        if (level.height, level.width) != (eh, ew):
            raise ValueError(
                f"pyramid level {s} is {level.width}x{level.height}, expected {ew}x{eh}"
            )
        rows = np.arange(h) // factor
        cols = np.arange(w) // factor
        up_depth = level.depth[np.ix_(rows, cols)]
        up_valid = level.valid[np.ix_(rows, cols)]
        mask = gt.valid & up_valid
        if not mask.any():
            raise ValueError(f"no jointly valid pixels at pyramid level {s}")
        diff = np.abs(np.log(up_depth[mask]) - np.log(gt.depth[mask]))
        total += diff.mean() / (s * s)
    return float(total)


def _pool_mean(values: np.ndarray, valid: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Average-pool over valid entries; partial border windows included."""
    if factor == 1:
        return values.copy(), valid.copy()
    h, w = values.shape
    ph, pw = math.ceil(h / factor), math.ceil(w / factor)
    sums = np.zeros((ph, pw))
    counts = np.zeros((ph, pw))
    vz = np.where(valid, values, 0.0)
    for dy in range(factor):
        for dx in range(factor):
            sub_v = vz[dy::factor, dx::factor]
            sub_m = valid[dy::factor, dx::factor]
            sums[: sub_v.shape[0], : sub_v.shape[1]] += sub_v
            counts[: sub_m.shape[0], : sub_m.shape[1]] += sub_m
    has = counts > 0
    pooled = np.where(has, sums / np.maximum(counts, 1), 0.0)
    return pooled, has


def _forward_gradients(values: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences; zero where the pixel or its neighbor is invalid."""
    gx = np.zeros_like(values)
    gy = np.zeros_like(values)
    okx = valid[:, :-1] & valid[:, 1:]
    oky = valid[:-1, :] & valid[1:, :]
    gx[:, :-1] = np.where(okx, values[:, 1:] - values[:, :-1], 0.0)
    gy[:-1, :] = np.where(oky, values[1:, :] - values[:-1, :], 0.0)
    return gx, gy


def inv_depth_gradient_loss(pred: DepthMap, gt: DepthMap, scales: int = 4) -> float:
    """Multi-scale L1 difference of inverse-depth spatial gradients.

    Inverse depth is average-pooled by factors 1, 2, 4, 8; at each scale
    the forward-difference gradients of prediction and GT are compared
    with an L1 penalty, averaged over valid pooled pixels, and the scales
    are summed. Adding a constant to inverse depth changes nothing, since
    gradients remove it.
    """
    mask = _joint_mask(pred, gt)
    if not mask.any():
        raise ValueError("no jointly valid pixels")
    inv_pred = np.where(mask, 1.0 / np.where(mask, pred.depth, 1.0), 0.0)
    inv_gt = np.where(mask, 1.0 / np.where(mask, gt.depth, 1.0), 0.0)
    total = 0.0
    for s in range(1, scales + 1):
        factor = 2 ** (s - 1)
        p_pool, p_ok = _pool_mean(inv_pred, mask, factor)
        g_pool, _ = _pool_mean(inv_gt, mask, factor)
        pgx, pgy = _forward_gradients(p_pool, p_ok)
        ggx, ggy = _forward_gradients(g_pool, p_ok)
        diff = np.abs(pgx - ggx) + np.abs(pgy - ggy)
        total += diff[p_ok].mean()
    return float(total)


def normals_from_depth(d: DepthMap, intr: Intrinsics) -> NormalMap:
    """Surface normals from a depth map via backprojected tangents.

    Every pixel is backprojected; tangents along u and v come from
    central differences (one-sided at the borders) and the normal is
    their normalized cross product, oriented toward the camera
    (negative z). Pixels whose difference stencil touches an invalid
    depth, or with degenerate tangents, are marked invalid.
    """
    h, w = d.height, d.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    z = d.depth
    pts = np.stack(
        [(us - intr.cx) * z / intr.fx, (vs - intr.cy) * z / intr.fy, z], axis=2
    )

    def _axis_diff(arr: np.ndarray, valid: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
        # Neighbors beyond the image border count as invalid, so border
        # pixels automatically fall back to one-sided differences.
        v_next = np.zeros_like(valid)
        v_prev = np.zeros_like(valid)
        p_next = np.zeros_like(arr)
        p_prev = np.zeros_like(arr)
        if axis == 1:
            v_next[:, :-1] = valid[:, 1:]
            p_next[:, :-1] = arr[:, 1:]
            v_prev[:, 1:] = valid[:, :-1]
            p_prev[:, 1:] = arr[:, :-1]
        else:
            v_next[:-1, :] = valid[1:, :]
            p_next[:-1, :] = arr[1:, :]
            v_prev[1:, :] = valid[:-1, :]
            p_prev[1:, :] = arr[:-1, :]
        both = v_next & v_prev
        only_next = v_next & ~v_prev
        only_prev = v_prev & ~v_next
        diff = np.zeros_like(arr)
        diff[both] = p_next[both] - p_prev[both]
        diff[only_next] = p_next[only_next] - arr[only_next]
        diff[only_prev] = arr[only_prev] - p_prev[only_prev]
        return diff, v_next | v_prev

    t_u, ok_u = _axis_diff(pts, d.valid, axis=1)
    t_v, ok_v = _axis_diff(pts, d.valid, axis=0)
    normal = np.cross(t_u, t_v)
    norms = np.linalg.norm(normal, axis=2)
    ok = d.valid & ok_u & ok_v & (norms > 1e-12)
    normal = normal / np.maximum(norms, 1e-300)[..., None]
    # Orient toward the camera: n . view < 0, with view along +z rays.
    flip = normal[:, :, 2] > 0.0
    normal[flip] = -normal[flip]
    normal[~ok] = 0.0
    return NormalMap(vectors=normal, valid=ok)


def normals_loss(pred_n: NormalMap, gt_n: NormalMap) -> float:
    """Mean of (1 - cos angle) / 2 over jointly valid pixels; range [0, 1].

    Raises:
        ValueError: If no pixel is valid in both maps.
    """
    if pred_n.vectors.shape != gt_n.vectors.shape:
        raise ValueError("normal maps differ in shape")
    mask = pred_n.valid & gt_n.valid
    if not mask.any():
        raise ValueError("no jointly valid normals")
    cos = (pred_n.vectors[mask] * gt_n.vectors[mask]).sum(axis=1)
    return float(np.mean((1.0 - np.clip(cos, -1.0, 1.0)) / 2.0))


def abs_rel_map(pred: DepthMap, gt: DepthMap) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-pixel |pred - gt| / gt plus its mean over jointly valid pixels.

    Returns (rel_map, valid_mask, mean); rel_map is zero outside the mask.

    Raises:
        ValueError: If a valid GT pixel carries a non-positive depth, or
            no pixel is valid in both maps.
    """
    mask = _joint_mask(pred, gt)
    if not mask.any():
        raise ValueError("no jointly valid pixels")
    gt_vals = gt.depth[mask]
    if gt_vals.min() <= 0.0:
        raise ValueError("GT depth marked valid but non-positive")
    rel = np.zeros_like(gt.depth)
    rel[mask] = np.abs(pred.depth[mask] - gt_vals) / gt_vals
    return rel, mask, float(rel[mask].mean())


def inlier_ratio(pred: DepthMap, gt: DepthMap, thresh: float = INLIER_THRESHOLD) -> float:
    """Percentage of jointly valid pixels with max(r, 1/r) strictly below thresh."""
    mask = _joint_mask(pred, gt)
    if not mask.any():
        raise ValueError("no jointly valid pixels")
    gt_vals = gt.depth[mask]
    if gt_vals.min() <= 0.0:
        raise ValueError("GT depth marked valid but non-positive")
    ratio = pred.depth[mask] / gt_vals
    worst = np.maximum(ratio, 1.0 / ratio)
    return float(100.0 * np.mean(worst < thresh))


def depth_report(
    pairs: Sequence[tuple[DepthMap, DepthMap]],
    ids: Sequence[str] | None = None,
) -> DepthReport:
    """Two-level benchmark averaging over a list of (pred, gt) pairs.

    Metrics are averaged over valid pixels within each image first, then
    averaged (unweighted) across images. Pairs with no jointly valid
    pixels are skipped and counted in the report.

    Raises:
        ValueError: If no pair contributes any valid pixel.
    """
    if len(pairs) == 0:
        raise ValueError("depth_report needs at least one (pred, gt) pair")
    if ids is not None and len(ids) != len(pairs):
        raise ValueError("ids must match pairs in length")
    per_image = []
    skipped = 0
    for i, (pred, gt) in enumerate(pairs):
        name = ids[i] if ids is not None else f"image_{i:03d}"
        mask = _joint_mask(pred, gt)
        if not mask.any():
            skipped += 1
            continue
        _, _, rel = abs_rel_map(pred, gt)
        tau = inlier_ratio(pred, gt)
        per_image.append(
            ImageMetrics(image_id=name, abs_rel=rel, tau=tau, n_valid=int(mask.sum()))
        )
    if not per_image:
        raise ValueError("every pair was skipped: no valid pixels anywhere")
    return DepthReport(
        abs_rel=float(np.mean([m.abs_rel for m in per_image])),
        tau=float(np.mean([m.tau for m in per_image])),
        n_valid=int(sum(m.n_valid for m in per_image)),
        per_image=tuple(per_image),
        skipped=skipped,
    )
