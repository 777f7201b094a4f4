"""End-to-end orchestration: per-tuple depth estimation and mesh fusion."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..costvolume import ScorerConfig, load_mlp_weights
from ..depthestimate import (
    CascadeConfig,
    DepthMap,
    cascaded_depth,
    load_depth_mvsd,
    write_depth_mvsd,
    write_depth_png,
)
from ..evaluation import DepthReport, depth_report
from ..features import FeatureMap, extract_census_features, feature_to_image_coords
from ..fusion import TriangleMesh, TsdfVolume, extract_mesh, integrate_depth_map
from ..geometry import CameraFrame, RangeHeuristicConfig
from .manifest import ManifestError
from .tuples import TupleSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the depth pipeline in one serializable place."""

    bins: int = 64
    scorer_mode: str = "dot-only"
    mlp_weights_path: str | None = None
    passes: int = 2
    temperature: float | None = None
    margin_frac: float = 0.05
    patch_radius: int = 3
    stride: int = 4
    range_heuristic: RangeHeuristicConfig = field(default_factory=RangeHeuristicConfig)
    voxel_size: float = 0.04
    truncation: float | None = None
    max_fuse_depth: float = 3.5
    depth_scale: float = 1000.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.passes < 1:
            raise ValueError(f"passes must be >= 1, got {self.passes}")

    def cascade_config(self) -> CascadeConfig:
        return CascadeConfig(
            bins=self.bins,
            passes=self.passes,
            temperature=self.temperature,
            margin_frac=self.margin_frac,
            range_heuristic=self.range_heuristic,
        )

    def scorer(self, base_dir: Path | None = None) -> ScorerConfig:
        if self.scorer_mode == "dot-only":
            return ScorerConfig(mode="dot-only")
        path = Path(self.mlp_weights_path or "")
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ScorerConfig(mode="mlp", mlp=load_mlp_weights(path))

    def to_json_dict(self) -> dict:
        rh = self.range_heuristic
        return {
            "bins": self.bins,
            "scorer_mode": self.scorer_mode,
            "mlp_weights_path": self.mlp_weights_path,
            "passes": self.passes,
            "temperature": self.temperature,
            "margin_frac": self.margin_frac,
            "patch_radius": self.patch_radius,
            "stride": self.stride,
            "range_heuristic": {
                "max_disparity_frac": rh.max_disparity_frac,
                "min_disparity_px": rh.min_disparity_px,
                "absolute_min": rh.absolute_min,
                "absolute_max": rh.absolute_max,
                "fallback_min": rh.fallback_min,
                "fallback_max": rh.fallback_max,
            },
            "voxel_size": self.voxel_size,
            "truncation": self.truncation,
            "max_fuse_depth": self.max_fuse_depth,
            "depth_scale": self.depth_scale,
            "seed": self.seed,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2))

    @staticmethod
    def from_json(path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
        rh_doc = doc.pop("range_heuristic", {})
        rh = RangeHeuristicConfig(**rh_doc)
        known = {f for f in PipelineConfig.__dataclass_fields__ if f != "range_heuristic"}
        unknown = set(doc) - known
        if unknown:
            raise ManifestError(f"{path}: unknown config keys {sorted(unknown)}")
        try:
            return PipelineConfig(range_heuristic=rh, **doc)
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: bad config: {exc}") from exc


@dataclass(frozen=True)
class TupleFailure:
    reference: str
    error: str


@dataclass(frozen=True, eq=False)
class RunDepthResult:
    depth_maps: dict[str, DepthMap]
    report: DepthReport | None
    failures: tuple[TupleFailure, ...]


def gt_at_feature_grid(frame: CameraFrame, width: int, height: int, scale: int) -> DepthMap:
    """Sample a frame's GT depth at the feature-grid cell centers."""
    if frame.gt_depth is None:
        raise ValueError(f"frame {frame.id!r} carries no GT depth")
    xs = np.floor(
        feature_to_image_coords(np.arange(width, dtype=np.float64), scale) + 0.5
    ).astype(np.int64)
    ys = np.floor(
        feature_to_image_coords(np.arange(height, dtype=np.float64), scale) + 0.5
    ).astype(np.int64)
    xs = np.clip(xs, 0, frame.gt_depth.width - 1)
    ys = np.clip(ys, 0, frame.gt_depth.height - 1)
    depth = frame.gt_depth.depth[np.ix_(ys, xs)]
    valid = frame.gt_depth.valid[np.ix_(ys, xs)]
    return DepthMap(width=width, height=height, depth=depth, valid=valid)


def compute_features(
    frames: Sequence[CameraFrame], config: PipelineConfig
) -> dict[str, FeatureMap]:
    return {
        f.id: extract_census_features(f.image, config.patch_radius, config.stride)
        for f in frames
    }


def run_depth(
    frames: Sequence[CameraFrame],
    tuples: Sequence[TupleSpec],
    config: PipelineConfig = PipelineConfig(),
    out_dir: Path | str | None = None,
    write_png: bool = False,
    figures: bool = False,
    config_dir: Path | None = None,
) -> RunDepthResult:
    """Run the cascade for every tuple, optionally writing artifacts.

    Per-tuple failures are recorded and remaining tuples continue. When
    the scene carries GT depth, a two-level DepthReport is attached.
    Outputs per tuple (when out_dir is set): <ref>.mvsd always,
    <ref>.png (16-bit) with write_png, <ref>_preview.png with figures.
    """
    if len(tuples) == 0:
        raise ValueError("run_depth needs at least one tuple")
    by_id = {f.id: f for f in frames}
    scorer = config.scorer(config_dir)
    cascade_cfg = config.cascade_config()
    feature_cache: dict[str, FeatureMap] = {}

    def features_for(ids: Sequence[str]) -> dict[str, FeatureMap]:
        for fid in ids:
            if fid not in feature_cache:
                feature_cache[fid] = extract_census_features(
                    by_id[fid].image, config.patch_radius, config.stride
                )
        return feature_cache

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    depth_maps: dict[str, DepthMap] = {}
    pairs = []
    pair_ids = []
    failures = []
    for spec in tuples:
        try:
            missing = [fid for fid in (spec.reference, *spec.sources) if fid not in by_id]
            if missing:
                raise ManifestError(f"tuple references unknown frame ids {missing}")
            ref = by_id[spec.reference]
            sources = [by_id[s] for s in spec.sources]
            feats = features_for([spec.reference, *spec.sources])
            result = cascaded_depth(ref, sources, feats, scorer, cascade_cfg)
            dm = result.depth
            depth_maps[spec.reference] = dm
            if out is not None:
                write_depth_mvsd(dm, out / f"{spec.reference}.mvsd")
                if write_png:
                    write_depth_png(dm, out / f"{spec.reference}.png", config.depth_scale)
                if figures:
                    from .figures import save_depth_figure

                    save_depth_figure(
                        dm, out / f"{spec.reference}_preview.png", title=spec.reference
                    )
            if ref.gt_depth is not None:
                pairs.append((dm, gt_at_feature_grid(ref, dm.width, dm.height, config.stride)))
                pair_ids.append(spec.reference)
        except Exception as exc:  # noqa: BLE001 - per-tuple isolation is the contract
            logger.warning("tuple %s failed: %s", spec.reference, exc)
            failures.append(TupleFailure(reference=spec.reference, error=str(exc)))
    report = depth_report(pairs, ids=pair_ids) if pairs else None
    return RunDepthResult(
        depth_maps=depth_maps, report=report, failures=tuple(failures)
    )


def fuse_depth_maps(
    frames: Sequence[CameraFrame],
    depth_maps: Mapping[str, DepthMap],
    voxel_size: float = 0.04,
    truncation: float | None = None,
    max_fuse_depth: float = 3.5,
) -> TriangleMesh:
    """Integrate per-frame depth maps into a TSDF and extract the surface.

    Frames without a depth map are skipped; integration follows frame
    order for determinism.
    """
    vol = TsdfVolume(
        voxel_size=voxel_size, truncation=truncation, max_fuse_depth=max_fuse_depth
    )
    fused = 0
    for frame in frames:
        dm = depth_maps.get(frame.id)
        if dm is None:
            continue
        integrate_depth_map(vol, frame, dm)
        fused += 1
    if fused == 0:
        raise ValueError("no depth maps matched any frame id")
    return extract_mesh(vol)


def load_depth_dir(directory: Path | str, frame_ids: Sequence[str]) -> dict[str, DepthMap]:
    """Load <id>.mvsd files for every frame id that has one."""
    directory = Path(directory)
    found = {}
    for fid in frame_ids:
        path = directory / f"{fid}.mvsd"
        if path.exists():
            found[fid] = load_depth_mvsd(path)
    return found
