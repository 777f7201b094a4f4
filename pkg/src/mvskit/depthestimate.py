"""Depth extraction from cost volumes and the two-pass range cascade.

Extraction takes the softmax expectation over bins in log-depth space,
which pairs naturally with log-spaced bins: uniform scores recover the
geometric mean of the range instead of drifting toward the far bins.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .costvolume import CostVolume, DepthBins, ScorerConfig, build_cost_volume, make_log_bins
from .features import FeatureMap
from .geometry import CameraFrame, RangeEstimate, RangeHeuristicConfig, estimate_matchable_range

MVSD_MAGIC = b"MVSD"


class DepthFormatError(ValueError):
    """Raised when an MVSD depth file is malformed."""


class NoMatchableContentError(RuntimeError):
    """Raised when a cascade pass produces no valid depth at all."""


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Dense per-pixel depth in scene units with a validity mask."""

    width: int
    height: int
    depth: np.ndarray  # (height, width) float
    valid: np.ndarray  # (height, width) bool

    def __post_init__(self) -> None:
        d = np.asarray(self.depth, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool)
        if d.shape != (self.height, self.width) or m.shape != (self.height, self.width):
            raise ValueError(
                f"depth/mask shapes {d.shape}/{m.shape} do not match {self.height}x{self.width}"
            )
        vals = d[m]
        if vals.size and (not np.all(np.isfinite(vals)) or vals.min() <= 0.0):
            raise ValueError("valid depths must be finite and positive")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", m)

    @staticmethod
    def from_array(depth: np.ndarray, valid: np.ndarray | None = None) -> "DepthMap":
        depth = np.asarray(depth, dtype=np.float64)
        if valid is None:
            valid = np.isfinite(depth) & (depth > 0.0)
        h, w = depth.shape
        return DepthMap(width=w, height=h, depth=depth, valid=np.asarray(valid, bool))

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def soft_argmin_depth(cv: CostVolume, temperature: float) -> DepthMap:
    """Softmax expectation over bins, taken in log-depth space.

    Per pixel, p = softmax(scores / temperature) over the bin axis and the
    output is exp(sum_k p_k log bins[k]), which always lies inside
    [bins.d_min, bins.d_max]. Pixels with zero coverage at every bin are
    marked invalid.

    Raises:
        ValueError: If temperature is not positive.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = cv.scores / temperature
    logits = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=0, keepdims=True)
    log_depth = np.einsum("khw,k->hw", p, np.log(cv.bins.values), optimize=False)
    valid = cv.coverage.max(axis=0) > 0
    depth = np.exp(log_depth)
    depth[~valid] = 1.0  # placeholder outside the mask
    return DepthMap(width=cv.width, height=cv.height, depth=depth, valid=valid)


def sigmoid_log_depth(x: float, rng: RangeEstimate) -> float:
    """Map a logit to a depth inside (d_min, d_max).

    depth = exp(log d_min + log(d_max / d_min) * sigmoid(x)); strictly
    increasing in x, with the geometric mean of the range at x = 0.
    """
    if x >= 0.0:
        s = 1.0 / (1.0 + math.exp(-x))
    else:
        e = math.exp(x)
        s = e / (1.0 + e)
    return math.exp(math.log(rng.d_min) + math.log(rng.d_max / rng.d_min) * s)


def logit_from_depth(depth: float, rng: RangeEstimate) -> float:
    """Inverse of `sigmoid_log_depth` for depths strictly inside the range."""
    if not (rng.d_min < depth < rng.d_max):
        raise ValueError(f"depth {depth} not strictly inside ({rng.d_min}, {rng.d_max})")
    s = (math.log(depth) - math.log(rng.d_min)) / math.log(rng.d_max / rng.d_min)
    return math.log(s / (1.0 - s))


@dataclass(frozen=True)
class PerturbConfig:
    """One-sided log-uniform widening amplitude used during training."""

    log_amplitude: float = math.log(2.0)


def perturb_range(
    rng_est: RangeEstimate, rng_seed: int, cfg: PerturbConfig = PerturbConfig()
) -> RangeEstimate:
    """Randomly widen a range: d_min shrinks, d_max grows, never the reverse.

    d_min' = d_min * exp(U[-a, 0]) and d_max' = d_max * exp(U[0, a]) with
    a = cfg.log_amplitude, so the result always contains the input.
    Deterministic for a fixed seed (the min draw comes first).
    """
    a = cfg.log_amplitude
    if a < 0.0:
        raise ValueError(f"log_amplitude must be >= 0, got {a}")
    gen = np.random.default_rng(rng_seed)
    lo_shift = gen.uniform(-a, 0.0) if a > 0.0 else 0.0
    hi_shift = gen.uniform(0.0, a) if a > 0.0 else 0.0
    return RangeEstimate(rng_est.d_min * math.exp(lo_shift), rng_est.d_max * math.exp(hi_shift))


# Default extraction temperature. Census descriptors are L2-normalized,
# so score magnitudes do not grow with the descriptor dimension and a
# constant works across patch sizes; 0.05 keeps the softmax sharp enough
# that the bin expectation tracks the matching peak instead of drifting
# toward the middle of the search range.
DEFAULT_TEMPERATURE = 0.05


@dataclass(frozen=True)
class CascadeConfig:
    """Settings for cascaded cost-volume depth estimation."""

    bins: int = 64
    passes: int = 2
    temperature: float | None = None  # None -> DEFAULT_TEMPERATURE
    margin_frac: float = 0.05
    range_heuristic: RangeHeuristicConfig = field(default_factory=RangeHeuristicConfig)

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")
        if self.passes < 1:
            raise ValueError(f"need at least 1 pass, got {self.passes}")


@dataclass(frozen=True, eq=False)
class CascadePass:
    """Diagnostics for one cascade pass."""

    search_range: RangeEstimate
    bins: DepthBins
    depth: DepthMap


@dataclass(frozen=True, eq=False)
class CascadeResult:
    depth: DepthMap
    passes: tuple[CascadePass, ...]


def _widen_log_range(lo: float, hi: float, margin_frac: float) -> RangeEstimate:
    """Widen [lo, hi] by margin_frac of its log-span on each side."""
    log_lo = math.log(lo)
    log_hi = math.log(hi)
    span = log_hi - log_lo
    if span < 1e-9:
        # Degenerate single-depth estimate: open a minimal bracket.
        span = 0.1
        mid = 0.5 * (log_lo + log_hi)
        log_lo, log_hi = mid - span / 2, mid + span / 2
    pad = margin_frac * span
    return RangeEstimate(math.exp(log_lo - pad), math.exp(log_hi + pad))


def cascaded_depth(
    ref: CameraFrame,
    sources: Sequence[CameraFrame],
    features: Mapping[str, FeatureMap],
    scorer: ScorerConfig = ScorerConfig(),
    cfg: CascadeConfig = CascadeConfig(),
) -> CascadeResult:
    """Estimate depth, then rebuild the volume over the observed range.

    Pass 1 sweeps log bins over the pose-derived matchable range; each
    later pass re-bins over the [min, max] of the previous pass's valid
    depths widened by `margin_frac` in log space, concentrating the same
    bin budget on a tighter interval.

    Raises:
        NoMatchableContentError: If a pass yields zero valid pixels.
        ValueError: If `sources` is empty.
    """
    if len(sources) == 0:
        raise ValueError("cascaded_depth needs at least one source frame")
    temperature = cfg.temperature if cfg.temperature is not None else DEFAULT_TEMPERATURE
    search = estimate_matchable_range(ref, sources, cfg.range_heuristic)
    passes: list[CascadePass] = []
    depth_map: DepthMap | None = None
    for _ in range(cfg.passes):
        bins = make_log_bins(search, cfg.bins)
        volume = build_cost_volume(ref, sources, features, bins, scorer)
        depth_map = soft_argmin_depth(volume, temperature)
        if depth_map.n_valid == 0:
            raise NoMatchableContentError(
                f"no matchable content for reference {ref.id!r} in range "
                f"[{search.d_min:.4g}, {search.d_max:.4g}]"
            )
        passes.append(CascadePass(search_range=search, bins=bins, depth=depth_map))
        observed = depth_map.depth[depth_map.valid]
        search = _widen_log_range(float(observed.min()), float(observed.max()), cfg.margin_frac)
    return CascadeResult(depth=depth_map, passes=tuple(passes))


def write_depth_mvsd(dm: DepthMap, path) -> None:
    """Write an MVSD file: magic, u32 width/height, f32 row-major depths.

    Invalid pixels are stored as 0 (any non-positive value is invalid on
    read).
    """
    vals = np.where(dm.valid, dm.depth, 0.0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MVSD_MAGIC)
        fh.write(struct.pack("<2I", dm.width, dm.height))
        fh.write(np.ascontiguousarray(vals).tobytes())


def load_depth_mvsd(path) -> DepthMap:
    """Read an MVSD file written by `write_depth_mvsd`.

    Raises:
        DepthFormatError: On bad magic or truncation, naming byte offsets.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MVSD_MAGIC:
        raise DepthFormatError(
            f"{path}: bad magic {blob[:4]!r} at byte offset 0 (expected {MVSD_MAGIC!r})"
        )
    if len(blob) < 12:
        raise DepthFormatError(f"{path}: truncated header at byte offset {len(blob)}")
    width, height = struct.unpack("<2I", blob[4:12])
    expected = 12 + width * height * 4
    if len(blob) < expected:
        raise DepthFormatError(
            f"{path}: truncated payload at byte offset {len(blob)} "
            f"(header promises {expected} bytes)"
        )
    vals = np.frombuffer(blob[12:expected], dtype="<f4").reshape(height, width)
    vals = vals.astype(np.float64)
    valid = vals > 0.0
    depth = np.where(valid, vals, 1.0)
    return DepthMap(width=width, height=height, depth=depth, valid=valid)


def write_depth_png(dm: DepthMap, path, depth_scale: float = 1000.0) -> None:
    """Export as 16-bit grayscale PNG, value = round(depth * scale); 0 = invalid."""
    from PIL import Image

    quantized = np.round(dm.depth * depth_scale)
    quantized = np.where(dm.valid, np.clip(quantized, 1, 65535), 0).astype(np.uint16)
    Image.fromarray(quantized).save(path, format="PNG")


def load_depth_png(path, depth_scale: float = 1000.0) -> DepthMap:
    """Read a 16-bit depth PNG; pixel / depth_scale, 0 means invalid."""
    from PIL import Image

    arr = np.asarray(Image.open(path), dtype=np.float64)
    if arr.ndim != 2:
        raise DepthFormatError(f"{path}: depth PNG must be single-channel, got shape {arr.shape}")
    valid = arr > 0
    depth = np.where(valid, arr / depth_scale, 1.0)
    h, w = arr.shape
    return DepthMap(width=w, height=h, depth=depth, valid=valid)
