"""Depth bins, per-source geometric metadata, and score aggregation.

The cost volume is built one depth hypothesis at a time: every feature
pixel is backprojected at the hypothesized depth, transported into each
source view, and scored there. Per-source (score, weight) pairs are then
collapsed with a softmax-weighted sum, which makes the volume independent
of how many sources are present and of their ordering.

Metadata normalization makes each record independent of the global scene
scale: hypothesis depths are log-min-max normalized against the bin range
and pose distances are divided by the per-tuple maximum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .features import (
    FeatureMap,
    feature_to_image_coords,
    image_to_feature_coords,
    sample_bilinear,
    sample_bilinear_many,
)
from .geometry import CameraFrame, RangeEstimate, relative_pose, pose_distance

# Canonical layout of the per-source MLP input vector. Weight files are
# only portable if producers and consumers agree on this ordering.
MLP_INPUT_FIELDS = (
    "dot",
    "ray_ref_x",
    "ray_ref_y",
    "ray_ref_z",
    "ray_src_x",
    "ray_src_y",
    "ray_src_z",
    "depth_ref_norm",
    "depth_src_norm",
    "ray_angle",
    "pose_dist_norm",
    "valid",
)
MLP_INPUT_DIM = len(MLP_INPUT_FIELDS)

_ACTIVATIONS = ("relu", "none")


class ConfigurationError(ValueError):
    """Raised when scorer configuration does not match the data it is applied to."""


class MlpFormatError(ValueError):
    """Raised when an MLP weight JSON document is malformed."""


@dataclass(frozen=True, eq=False)
class DepthBins:
    """Strictly increasing positive depth hypotheses."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if vals.size < 2:
            raise ValueError(f"need at least 2 depth bins, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("depth bins contain non-finite values")
        if vals[0] <= 0.0:
            raise ValueError(f"depth bins must be positive, got min {vals[0]}")
        if not np.all(np.diff(vals) > 0.0):
            raise ValueError("depth bins must be strictly increasing")
        object.__setattr__(self, "values", vals)

    @property
    def count(self) -> int:
        return int(self.values.size)

    @property
    def d_min(self) -> float:
        return float(self.values[0])

    @property
    def d_max(self) -> float:
        return float(self.values[-1])


def make_log_bins(rng: RangeEstimate, count: int) -> DepthBins:
    """Log-uniformly spaced depth bins with exact endpoints.

    values[j] = exp(log d_min + j * (log d_max - log d_min) / (count - 1)).

    Raises:
        ValueError: If count < 2 (an invalid range is rejected by
            RangeEstimate itself).
    """
    if count < 2:
        raise ValueError(f"need at least 2 bins, got {count}")
    vals = np.exp(np.linspace(math.log(rng.d_min), math.log(rng.d_max), count))
    vals[0] = rng.d_min
    vals[-1] = rng.d_max
    return DepthBins(vals)


@dataclass
class MetadataRecord:
    """Geometric side information for one (source, bin, pixel) triple.

    All fields are zero when `valid` is False. `pose_dist_norm` is filled
    in by `normalize_metadata`, which needs the whole tuple of sources.
    """

    dot: float = 0.0
    ray_ref: np.ndarray = None  # type: ignore[assignment]
    ray_src: np.ndarray = None  # type: ignore[assignment]
    depth_ref_norm: float = 0.0
    depth_src_norm: float = 0.0
    ray_angle: float = 0.0
    pose_dist_norm: float = 0.0
    valid: bool = False

    def __post_init__(self) -> None:
        if self.ray_ref is None:
            self.ray_ref = np.zeros(3)
        if self.ray_src is None:
            self.ray_src = np.zeros(3)

    def to_vector(self) -> np.ndarray:
        """Flatten to the canonical MLP input layout (MLP_INPUT_FIELDS order)."""
        out = np.empty(MLP_INPUT_DIM, dtype=np.float64)
        out[0] = self.dot
        out[1:4] = self.ray_ref
        out[4:7] = self.ray_src
        out[7] = self.depth_ref_norm
        out[8] = self.depth_src_norm
        out[9] = self.ray_angle
        out[10] = self.pose_dist_norm
        out[11] = 1.0 if self.valid else 0.0
        return out


@dataclass(frozen=True, eq=False)
class MlpLayer:
    in_dim: int
    out_dim: int
    weights: np.ndarray  # (out_dim, in_dim), applied as y = W x + b
    bias: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64).reshape(self.out_dim, self.in_dim)
        b = np.asarray(self.bias, dtype=np.float64).reshape(self.out_dim)
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("MLP layer contains non-finite values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class MlpWeights:
    """A small fully-connected net whose final layer emits (score, weight)."""

    layers: tuple[MlpLayer, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("MLP needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.out_dim != cur.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {cur.in_dim}"
                )
        if self.layers[-1].out_dim != 2:
            raise ValueError(
                f"final layer must emit 2 values (score, weight), got {self.layers[-1].out_dim}"
            )
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim


def mlp_forward(w: MlpWeights, x: np.ndarray) -> np.ndarray:
    """Run the affine + activation chain on a single input vector.

    Raises:
        ValueError: If the input length does not match the first layer.
    """
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size != w.input_dim:
        raise ValueError(f"input has length {v.size}, MLP expects {w.input_dim}")
    return mlp_forward_batch(w, v[None, :])[0]


def mlp_forward_batch(w: MlpWeights, x: np.ndarray) -> np.ndarray:
    """Run the MLP on an (N, in_dim) batch; returns (N, out_dim).

    Uses einsum without BLAS dispatch so results are bit-identical
    regardless of the thread count of the linked BLAS.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != w.input_dim:
        raise ValueError(f"batch shape {h.shape} does not match MLP input dim {w.input_dim}")
    for layer in w.layers:
        h = np.einsum("oi,ni->no", layer.weights, h, optimize=False) + layer.bias
        if layer.activation == "relu":
            np.maximum(h, 0.0, out=h)
    return h


def random_mlp_weights(
    hidden_dims: Sequence[int] = (16,), seed: int = 0, input_dim: int = MLP_INPUT_DIM
) -> MlpWeights:
    """Deterministic random weights for testing and demos (relu hidden layers)."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden_dims, 2]
    layers = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        scale = 1.0 / math.sqrt(din)
        layers.append(
            MlpLayer(
                in_dim=din,
                out_dim=dout,
                weights=rng.uniform(-scale, scale, size=(dout, din)),
                bias=rng.uniform(-0.1, 0.1, size=dout),
                activation="relu" if i < len(dims) - 2 else "none",
            )
        )
    return MlpWeights(tuple(layers))


def save_mlp_weights(w: MlpWeights, path) -> None:
    doc = {
        "layers": [
            {
                "in": layer.in_dim,
                "out": layer.out_dim,
                "w": [float(v) for v in layer.weights.ravel()],
                "b": [float(v) for v in layer.bias],
                "act": layer.activation,
            }
            for layer in w.layers
        ]
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_mlp_weights(path) -> MlpWeights:
    """Load and validate an MLP weight JSON document.

    Raises:
        MlpFormatError: On structural problems (missing keys, wrong value
            counts, non-chaining dims, unknown activation).
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MlpFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "layers" not in doc:
        raise MlpFormatError(f"{path}: missing top-level 'layers' list")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        try:
            in_dim = int(entry["in"])
            out_dim = int(entry["out"])
            w = np.asarray(entry["w"], dtype=np.float64)
            b = np.asarray(entry["b"], dtype=np.float64)
            act = str(entry["act"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MlpFormatError(f"{path}: layer {i} is malformed: {exc}") from exc
        if w.size != in_dim * out_dim:
            raise MlpFormatError(
                f"{path}: layer {i} has {w.size} weights, expected {in_dim * out_dim}"
            )
        if b.size != out_dim:
            raise MlpFormatError(
                f"{path}: layer {i} has {b.size} biases, expected {out_dim}"
            )
        if act not in _ACTIVATIONS:
            raise MlpFormatError(f"{path}: layer {i} has unknown activation {act!r}")
        layers.append(
            MlpLayer(in_dim=in_dim, out_dim=out_dim, weights=w, bias=b, activation=act)
        )
    try:
        return MlpWeights(tuple(layers))
    except ValueError as exc:
        raise MlpFormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ScorerConfig:
    """How per-source (score, weight) pairs are produced.

    mode 'dot-only' uses the feature dot product for both; mode 'mlp'
    feeds the flattened MetadataRecord through `mlp`. Cells no source can
    see receive `empty_score`.
    """

    mode: str = "dot-only"
    mlp: MlpWeights | None = None
    empty_score: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("dot-only", "mlp"):
            raise ConfigurationError(f"unknown scorer mode {self.mode!r}")
        if self.mode == "mlp" and self.mlp is None:
            raise ConfigurationError("scorer mode 'mlp' requires weights")


@dataclass(frozen=True, eq=False)
class CostVolume:
    """Aggregated matching scores indexed (bin, row, column) on the feature grid."""

    bins: DepthBins
    width: int
    height: int
    scores: np.ndarray  # (K, height, width) float64
    coverage: np.ndarray  # (K, height, width) int; valid sources per cell

    def __post_init__(self) -> None:
        k = self.bins.count
        if self.scores.shape != (k, self.height, self.width):
            raise ValueError(f"scores shape {self.scores.shape} inconsistent with volume dims")
        if self.coverage.shape != (k, self.height, self.width):
            raise ValueError(f"coverage shape {self.coverage.shape} inconsistent with volume dims")
        covered = self.coverage > 0
        if not np.all(np.isfinite(self.scores[covered])):
            raise ValueError("non-finite score in a covered cell")


def aggregate_views(per_source: Sequence[tuple[float, float]]) -> float:
    """Softmax-weighted sum of per-source scores.

    Weights go through a max-subtracted softmax; the result is the convex
    combination of the scores, so it always lies inside their range.

    Raises:
        ValueError: If the list is empty or contains non-finite values.
    """
    if len(per_source) == 0:
        raise ValueError("aggregate_views needs at least one (score, weight) pair")
    scores = np.array([p[0] for p in per_source], dtype=np.float64)
    weights = np.array([p[1] for p in per_source], dtype=np.float64)
    if not (np.all(np.isfinite(scores)) and np.all(np.isfinite(weights))):
        raise ValueError("scores and weights must be finite")
    e = np.exp(weights - weights.max())
    return float(np.dot(e / e.sum(), scores))


def compute_metadata(
    ref: CameraFrame,
    src: CameraFrame,
    f_ref: FeatureMap,
    f_src: FeatureMap,
    bins: DepthBins,
    u: int,
    v: int,
    k: int,
) -> MetadataRecord:
    """Metadata for feature pixel (u, v) of the reference at depth bin k.

    The pixel is backprojected to a world point P; the record holds the
    feature dot product against the source sampled at P's reprojection,
    unit rays from both camera centers to P, log-normalized hypothesis and
    reprojected depths, and the angle between the rays. The record is
    marked invalid (and fully zeroed) when P lands behind the source
    camera or its reprojection falls outside the source feature grid.
    `pose_dist_norm` is left at 0 for `normalize_metadata` to fill.
    """
    if not (0 <= u < f_ref.width and 0 <= v < f_ref.height):
        raise IndexError(f"feature pixel ({u}, {v}) outside {f_ref.width}x{f_ref.height}")
    if not 0 <= k < bins.count:
        raise IndexError(f"bin index {k} outside [0, {bins.count})")
    depth = float(bins.values[k])
    u_img = feature_to_image_coords(float(u), f_ref.scale)
    v_img = feature_to_image_coords(float(v), f_ref.scale)

    from .geometry import backproject_pixel, project_point

    p_ref = backproject_pixel(ref.intrinsics, u_img, v_img, depth)
    rel = relative_pose(ref.world_from_camera, src.world_from_camera)
    p_src = rel.transform(p_ref)
    u_s, v_s, z_s, in_front = project_point(src.intrinsics, p_src)
    if not in_front:
        return MetadataRecord()
    x_f = image_to_feature_coords(u_s, f_src.scale)
    y_f = image_to_feature_coords(v_s, f_src.scale)
    sampled, sample_ok = sample_bilinear(f_src, x_f, y_f)
    if not sample_ok:
        return MetadataRecord()

    ref_vec = f_ref.data[:, v, u].astype(np.float64)
    dot = float(np.dot(ref_vec, sampled.astype(np.float64)))

    p_world = ref.world_from_camera.transform(p_ref)
    ray_ref = p_world - ref.center
    ray_src = p_world - src.center
    ray_ref = ray_ref / max(np.linalg.norm(ray_ref), 1e-300)
    ray_src = ray_src / max(np.linalg.norm(ray_src), 1e-300)

    log_lo = math.log(bins.d_min)
    log_span = math.log(bins.d_max) - log_lo
    depth_ref_norm = min(max((math.log(depth) - log_lo) / log_span, 0.0), 1.0)
    depth_src_norm = min(max((math.log(z_s) - log_lo) / log_span, 0.0), 1.0)
    ray_angle = math.acos(min(max(float(np.dot(ray_ref, ray_src)), -1.0), 1.0))
    return MetadataRecord(
        dot=dot,
        ray_ref=ray_ref,
        ray_src=ray_src,
        depth_ref_norm=depth_ref_norm,
        depth_src_norm=depth_src_norm,
        ray_angle=ray_angle,
        pose_dist_norm=0.0,
        valid=True,
    )


def normalize_metadata(
    records: Sequence[Sequence[MetadataRecord]],
    pose_dists: Sequence[float],
) -> list[list[MetadataRecord]]:
    """Fill pose_dist_norm = p_i / max_j p_j on every valid record.

    When every pose distance is zero the normalized values are all zero.
    Invalid records stay zeroed. Returns new record lists.

    Raises:
        ValueError: If `records` and `pose_dists` are empty or mismatched.
    """
    if len(records) == 0 or len(records) != len(pose_dists):
        raise ValueError("need matching, non-empty per-source records and pose distances")
    p_max = max(pose_dists)
    out = []
    for recs, p in zip(records, pose_dists):
        norm = p / p_max if p_max > 0.0 else 0.0
        out.append(
            [replace(r, pose_dist_norm=norm) if r.valid else replace(r) for r in recs]
        )
    return out


def build_cost_volume(
    ref: CameraFrame,
    sources: Sequence[CameraFrame],
    features: Mapping[str, FeatureMap],
    bins: DepthBins,
    scorer: ScorerConfig = ScorerConfig(),
) -> CostVolume:
    """Aggregate per-source matching evidence over all bins and pixels.

    For every (bin, pixel) cell each source contributes a (score, weight)
    pair: the feature dot product twice in 'dot-only' mode, or the MLP
    output on the flattened metadata in 'mlp' mode. Sources whose
    correspondence is invalid are excluded from the softmax entirely;
    cells seen by no source get `scorer.empty_score` and coverage 0.
    Pixels whose reference descriptor is all-zero (flat or truncated
    patches) carry no matching evidence and are reported with coverage 0
    at every bin, which downstream extraction turns into invalid depth.

    Per-cell reduction over sources follows the given source order, so
    identical inputs always produce identical volumes.

    Raises:
        ValueError: If there are no sources or feature scales differ.
        ConfigurationError: If the MLP input dim does not match the
            metadata layout.
    """
    if len(sources) == 0:
        raise ValueError("build_cost_volume needs at least one source frame")
    f_ref = features[ref.id]
    scale = f_ref.scale
    for src in sources:
        if features[src.id].scale != scale:
            raise ValueError("all feature maps must share the same downsample scale")
    if scorer.mode == "mlp" and scorer.mlp.input_dim != MLP_INPUT_DIM:
        raise ConfigurationError(
            f"MLP expects input dim {scorer.mlp.input_dim}, metadata layout has {MLP_INPUT_DIM}"
        )

    h_f, w_f = f_ref.height, f_ref.width
    n_px = h_f * w_f
    k_bins = bins.count

    # Reference pixel rays (camera frame, unit z) and flattened descriptors.
    from .geometry import pixel_directions

    xs, ys = np.meshgrid(np.arange(w_f), np.arange(h_f))
    u_img = feature_to_image_coords(xs.ravel().astype(np.float64), scale)
    v_img = feature_to_image_coords(ys.ravel().astype(np.float64), scale)
    dirs = pixel_directions(ref.intrinsics, u_img, v_img)  # (N, 3)
    ref_desc = f_ref.data.reshape(f_ref.channels, n_px).T.astype(np.float64)
    ref_has_evidence = (ref_desc != 0.0).any(axis=1)

    rels = [relative_pose(ref.world_from_camera, s.world_from_camera) for s in sources]
    pose_ds = [pose_distance(rel) for rel in rels]
    p_max = max(pose_ds)
    pose_norms = [p / p_max if p_max > 0.0 else 0.0 for p in pose_ds]

    need_metadata = scorer.mode == "mlp"
    if need_metadata:
        r_ref_rot = ref.world_from_camera.rotation
        ray_ref = dirs @ r_ref_rot.T
        ray_ref /= np.linalg.norm(ray_ref, axis=1, keepdims=True)
        src_centers = [s.center for s in sources]
        log_lo = math.log(bins.d_min)
        log_span = math.log(bins.d_max) - log_lo

    scores_out = np.empty((k_bins, n_px), dtype=np.float64)
    coverage_out = np.empty((k_bins, n_px), dtype=np.int32)

    src_scores = np.empty((len(sources), n_px), dtype=np.float64)
    src_weights = np.empty((len(sources), n_px), dtype=np.float64)
    src_valid = np.empty((len(sources), n_px), dtype=bool)

    for k in range(k_bins):
        depth = float(bins.values[k])
        p_ref = dirs * depth  # (N, 3)
        for i, (src, rel) in enumerate(zip(sources, rels)):
            f_src = features[src.id]
            p_src = p_ref @ rel.rotation.T + rel.translation
            z_s = p_src[:, 2]
            front = z_s > 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                u_s = src.intrinsics.fx * p_src[:, 0] / z_s + src.intrinsics.cx
                v_s = src.intrinsics.fy * p_src[:, 1] / z_s + src.intrinsics.cy
            u_s = np.where(front, u_s, -1.0)
            v_s = np.where(front, v_s, -1.0)
            sampled, in_bounds = sample_bilinear_many(
                f_src,
                image_to_feature_coords(u_s, scale),
                image_to_feature_coords(v_s, scale),
            )
            valid = front & in_bounds & ref_has_evidence
            dots = (ref_desc * sampled.astype(np.float64)).sum(axis=1)
            dots[~valid] = 0.0
            if scorer.mode == "dot-only":
                src_scores[i] = dots
                src_weights[i] = dots
            else:
                x = np.zeros((n_px, MLP_INPUT_DIM), dtype=np.float64)
                p_world = p_ref @ r_ref_rot.T + ref.center
                ray_src = p_world - src_centers[i]
                norms = np.linalg.norm(ray_src, axis=1, keepdims=True)
                ray_src = ray_src / np.maximum(norms, 1e-300)
                cos_ang = np.clip((ray_ref * ray_src).sum(axis=1), -1.0, 1.0)
                with np.errstate(divide="ignore", invalid="ignore"):
                    z_norm = (np.log(np.where(front, z_s, 1.0)) - log_lo) / log_span
                x[:, 0] = dots
                x[:, 1:4] = ray_ref
                x[:, 4:7] = ray_src
                x[:, 7] = min(max((math.log(depth) - log_lo) / log_span, 0.0), 1.0)
                x[:, 8] = np.clip(z_norm, 0.0, 1.0)
                x[:, 9] = np.arccos(cos_ang)
                x[:, 10] = pose_norms[i]
                x[:, 11] = 1.0
                x[~valid] = 0.0
                out = mlp_forward_batch(scorer.mlp, x)
                src_scores[i] = out[:, 0]
                src_weights[i] = out[:, 1]
            src_valid[i] = valid

        coverage = src_valid.sum(axis=0).astype(np.int32)
        w_masked = np.where(src_valid, src_weights, -np.inf)
        w_max = w_masked.max(axis=0)
        safe_max = np.where(coverage > 0, w_max, 0.0)
        # exp(-inf) = 0 drops invalid sources without inf * 0 hazards.
        e = np.exp(np.where(src_valid, src_weights - safe_max, -np.inf))
        denom = e.sum(axis=0)
        agg = (e * src_scores).sum(axis=0) / np.maximum(denom, 1e-300)
        scores_out[k] = np.where(coverage > 0, agg, scorer.empty_score)
        coverage_out[k] = coverage

    return CostVolume(
        bins=bins,
        width=w_f,
        height=h_f,
        scores=scores_out.reshape(k_bins, h_f, w_f),
        coverage=coverage_out.reshape(k_bins, h_f, w_f),
    )
