"""Image containers, census descriptors, bilinear sampling, feature-map I/O.

Feature grids are aligned with the image through a fixed convention: the
feature pixel (x_f, y_f) at downsample scale s corresponds to image
coordinate (x_f * s + (s - 1) / 2, y_f * s + (s - 1) / 2), the center of
its s x s block.  `feature_to_image_coords` and `image_to_feature_coords`
implement the mapping and are used everywhere a warp crosses between the
two grids.  The feature grid spans width // s by height // s cells; a
remainder strip of the image is ignored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# Rec. 601 luma weights used to collapse RGB to grayscale for matching.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

MVSF_MAGIC = b"MVSF"


class FeatureFormatError(ValueError):
    """Raised when an MVSF feature file is malformed."""


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Dense image with values in [0, 1], stored as (height, width, channels)."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"image data shape {arr.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @staticmethod
    def from_array(arr: np.ndarray) -> "ImageGrid":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"expected a 2D or 3D array, got shape {arr.shape}")
        h, w, c = arr.shape
        return ImageGrid(width=w, height=h, channels=c, data=arr)

    def luma(self) -> np.ndarray:
        """Grayscale view as (height, width) float64."""
        if self.channels == 1:
            return self.data[:, :, 0].astype(np.float64)
        if self.channels == 3:
            return self.data.astype(np.float64) @ LUMA_WEIGHTS
        # Fall back to a plain channel mean for unusual channel counts.
        return self.data.mean(axis=2, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Per-pixel descriptors on a downsampled grid, stored as (C, H_f, W_f)."""

    channels: int
    width: int
    height: int
    scale: int
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != (self.channels, self.height, self.width):
            raise ValueError(
                f"feature data shape {arr.shape} does not match "
                f"C={self.channels}, H={self.height}, W={self.width}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite values")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        object.__setattr__(self, "data", arr)


def feature_to_image_coords(x_f: np.ndarray | float, scale: int) -> np.ndarray | float:
    """Image coordinate of a feature-grid coordinate (block center)."""
    return x_f * scale + (scale - 1) / 2.0


def image_to_feature_coords(x_img: np.ndarray | float, scale: int) -> np.ndarray | float:
    """Feature-grid coordinate (continuous) of an image coordinate."""
    return (x_img - (scale - 1) / 2.0) / scale


def feature_grid_size(image_size: int, scale: int) -> int:
    """Number of feature cells along one axis for a given image extent."""
    return image_size // scale


def _block_mean(gray: np.ndarray, stride: int) -> np.ndarray:
    """Average stride x stride blocks; a remainder strip is cropped off."""
    if stride == 1:
        return gray
    h_f = gray.shape[0] // stride
    w_f = gray.shape[1] // stride
    crop = gray[: h_f * stride, : w_f * stride]
    return crop.reshape(h_f, stride, w_f, stride).mean(axis=(1, 3))


def extract_census_features(
    img: ImageGrid, patch_radius: int = 3, stride: int = 4
) -> FeatureMap:
    """Census-style descriptors: signed neighbor-vs-center comparisons, L2-normalized.

    The grayscale image is first box-averaged onto the stride-downsampled
    grid (a no-op at stride 1). Each output cell then holds the
    (2r+1)^2 - 1 signs of (neighbor - center) over its surrounding patch
    of grid cells, normalized to unit L2 norm; flat patches yield all-zero
    vectors. Cells whose patch overhangs the grid border are also left as
    zeros: a truncated patch is no evidence, and zero descriptors drop out
    of every dot product. Descriptors are invariant to any global affine
    brightness change because only comparison signs are kept.

    Raises:
        ValueError: If patch_radius or stride is < 1, or the downsampled
            grid is smaller than the patch.
    """
    if patch_radius < 1:
        raise ValueError(f"patch_radius must be >= 1, got {patch_radius}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    side = 2 * patch_radius + 1
    grid = _block_mean(img.luma(), stride)
    h_f, w_f = grid.shape
    if w_f < side or h_f < side:
        raise ValueError(
            f"feature grid {w_f}x{h_f} (image {img.width}x{img.height} at stride "
            f"{stride}) is smaller than the {side}x{side} census patch"
        )

    n_comp = side * side - 1
    r = patch_radius
    inner = grid[r:-r, r:-r]
    feats = np.zeros((n_comp, h_f, w_f), dtype=np.float32)
    idx = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neigh = grid[r + dy : h_f - r + dy, r + dx : w_f - r + dx]
            feats[idx, r:-r, r:-r] = np.sign(neigh - inner)
            idx += 1

    norms = np.sqrt((feats.astype(np.float64) ** 2).sum(axis=0))
    nz = norms > 0.0
    feats[:, nz] /= norms[nz].astype(np.float32)
    return FeatureMap(channels=n_comp, width=w_f, height=h_f, scale=stride, data=feats)


def sample_bilinear(fm: FeatureMap, x: float, y: float) -> tuple[np.ndarray, bool]:
    """Bilinearly interpolate all channels at continuous grid coords (x, y).

    Returns (vector of length C, valid); valid is False outside
    [0, W_f - 1] x [0, H_f - 1], in which case the vector is zeros.
    """
    vals, valid = sample_bilinear_many(fm, np.array([x]), np.array([y]))
    return vals[0], bool(valid[0])


# Sampling coordinates are snapped to this binary grid before the bounds
# test, so near-boundary validity cannot flip on last-ulp arithmetic
# differences (e.g. when all poses and depths are rescaled together).
_COORD_QUANTUM = 2.0**32


def sample_bilinear_many(
    fm: FeatureMap, x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear sampling; returns ((N, C) values, (N,) valid mask)."""
    x = np.round(np.asarray(x, dtype=np.float64) * _COORD_QUANTUM) / _COORD_QUANTUM
    y = np.round(np.asarray(y, dtype=np.float64) * _COORD_QUANTUM) / _COORD_QUANTUM
    valid = (x >= 0.0) & (x <= fm.width - 1) & (y >= 0.0) & (y <= fm.height - 1)
    xc = np.clip(x, 0.0, fm.width - 1)
    yc = np.clip(y, 0.0, fm.height - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), fm.width - 2 if fm.width > 1 else 0)
    y0 = np.minimum(np.floor(yc).astype(np.intp), fm.height - 2 if fm.height > 1 else 0)
    x1 = np.minimum(x0 + 1, fm.width - 1)
    y1 = np.minimum(y0 + 1, fm.height - 1)
    wx = (xc - x0).astype(np.float32)
    wy = (yc - y0).astype(np.float32)

    data = fm.data  # (C, H, W)
    v00 = data[:, y0, x0]
    v01 = data[:, y0, x1]
    v10 = data[:, y1, x0]
    v11 = data[:, y1, x1]
    top = v00 + (v01 - v00) * wx
    bot = v10 + (v11 - v10) * wx
    out = (top + (bot - top) * wy).T
    out[~valid] = 0.0
    return out, valid


def dot_affinity(f_ref: np.ndarray, f_src: np.ndarray) -> float:
    """Inner product of two descriptor vectors of equal length."""
    a = np.asarray(f_ref, dtype=np.float64).ravel()
    b = np.asarray(f_src, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"descriptor lengths differ: {a.shape[0]} vs {b.shape[0]}")
    return float(np.dot(a, b))


def write_feature_map(fm: FeatureMap, path) -> None:
    """Write an MVSF file: magic, u32 C/W/H/scale, then f32 data channel-major."""
    header = MVSF_MAGIC + struct.pack("<4I", fm.channels, fm.width, fm.height, fm.scale)
    payload = np.ascontiguousarray(fm.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_feature_map(path) -> FeatureMap:
    """Read an MVSF file written by `write_feature_map`.

    Raises:
        FeatureFormatError: On bad magic, truncated payload, or non-finite
            values; the message names the failing byte offset.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MVSF_MAGIC:
        raise FeatureFormatError(
            f"{path}: bad magic {blob[:4]!r} at byte offset 0 (expected {MVSF_MAGIC!r})"
        )
    if len(blob) < 20:
        raise FeatureFormatError(
            f"{path}: truncated header at byte offset {len(blob)} (need 20 bytes)"
        )
    channels, width, height, scale = struct.unpack("<4I", blob[4:20])
    expected = 20 + channels * width * height * 4
    if len(blob) < expected:
        raise FeatureFormatError(
            f"{path}: truncated payload at byte offset {len(blob)} "
            f"(header promises {expected} bytes)"
        )
    data = np.frombuffer(blob[20:expected], dtype="<f4").reshape(channels, height, width)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise FeatureFormatError(
            f"{path}: non-finite value at byte offset {20 + 4 * bad}"
        )
    try:
        return FeatureMap(
            channels=channels, width=width, height=height, scale=scale, data=data.copy()
        )
    except ValueError as exc:
        raise FeatureFormatError(f"{path}: {exc}") from exc
