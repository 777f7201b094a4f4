"""Reference/source tuple selection from poses or geometric overlap.

Both selectors work on the manifest alone (poses + intrinsics); images
are never touched. Selection is deterministic: ties break toward the
earlier manifest entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import (
    RangeHeuristicConfig,
    estimate_matchable_range,
    pose_distance,
    relative_pose,
)
from .manifest import FrameEntry, ManifestError, SceneManifest


@dataclass(frozen=True)
class TupleSpec:
    """One unit of matching work: a reference frame and its source frames."""

    reference: str
    sources: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.sources) < 1:
            raise ValueError(f"tuple for {self.reference!r} has no sources")
        if self.reference in self.sources:
            raise ValueError(f"tuple for {self.reference!r} lists itself as a source")
        object.__setattr__(self, "sources", tuple(self.sources))


@dataclass(frozen=True)
class PoseTupleConfig:
    """Window and preference point for pose-distance keyframe selection."""

    max_sources: int = 8
    t_low: float = 0.025
    t_high: float = 0.45
    t_target: float = 0.225


@dataclass(frozen=True)
class OverlapTupleConfig:
    """Grid-reprojection overlap selection parameters."""

    max_sources: int = 8
    min_overlap: float = 0.3
    grid: int = 16
    range_heuristic: RangeHeuristicConfig = field(default_factory=RangeHeuristicConfig)


@dataclass(frozen=True)
class TupleSelection:
    tuples: tuple[TupleSpec, ...]
    skipped: tuple[str, ...]  # reference ids with zero usable candidates


def select_tuples_pose(
    manifest: SceneManifest, cfg: PoseTupleConfig = PoseTupleConfig()
) -> TupleSelection:
    """Pick sources whose pose distance to the reference falls in a window.

    For every reference frame, candidates with pose distance inside
    [t_low, t_high] are ranked by closeness to t_target (manifest order
    breaks ties) and up to max_sources are kept. References with no
    candidate are omitted and listed in `skipped`.

    Raises:
        ValueError: If the manifest has fewer than 2 frames.
    """
    if len(manifest.frames) < 2:
        raise ValueError("tuple selection needs at least 2 frames")
    tuples = []
    skipped = []
    for ref in manifest.frames:
        ranked = []
        for idx, cand in enumerate(manifest.frames):
            if cand.id == ref.id:
                continue
            p = pose_distance(
                relative_pose(ref.world_from_camera, cand.world_from_camera)
            )
            if cfg.t_low <= p <= cfg.t_high:
                ranked.append((abs(p - cfg.t_target), idx, cand.id))
        if not ranked:
            skipped.append(ref.id)
            continue
        ranked.sort()
        tuples.append(
            TupleSpec(
                reference=ref.id,
                sources=tuple(cid for _, _, cid in ranked[: cfg.max_sources]),
            )
        )
    return TupleSelection(tuples=tuple(tuples), skipped=tuple(skipped))


def _overlap_score(ref: FrameEntry, cand: FrameEntry, cfg: OverlapTupleConfig) -> float:
    """Fraction of a reference pixel grid that reprojects validly into cand."""
    rng = estimate_matchable_range(ref, [cand], cfg.range_heuristic)
    mid_depth = math.sqrt(rng.d_min * rng.d_max)
    intr = ref.intrinsics
    us = np.linspace(0.0, intr.width - 1, cfg.grid)
    vs = np.linspace(0.0, intr.height - 1, cfg.grid)
    uu, vv = np.meshgrid(us, vs)
    dirs = np.stack(
        [
            (uu.ravel() - intr.cx) / intr.fx,
            (vv.ravel() - intr.cy) / intr.fy,
            np.ones(uu.size),
        ],
        axis=1,
    )
    rel = relative_pose(ref.world_from_camera, cand.world_from_camera)
    p_src = rel.transform(dirs * mid_depth)
    z = p_src[:, 2]
    front = z > 0.0
    ci = cand.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = ci.fx * p_src[:, 0] / z + ci.cx
        v = ci.fy * p_src[:, 1] / z + ci.cy
    ok = front & (u >= 0.0) & (u <= ci.width - 1) & (v >= 0.0) & (v <= ci.height - 1)
    return float(ok.mean())


def select_tuples_overlap(
    manifest: SceneManifest, cfg: OverlapTupleConfig = OverlapTupleConfig()
) -> TupleSelection:
    """Pick sources by how much of the reference view reprojects into them.

    A grid of reference pixels is backprojected at the log-midpoint of
    the pairwise matchable range and reprojected into each candidate; the
    in-bounds fraction is the overlap score. Candidates scoring at least
    min_overlap are kept, best first (manifest order on ties).

    Raises:
        ValueError: If the manifest has fewer than 2 frames.
    """
    if len(manifest.frames) < 2:
        raise ValueError("tuple selection needs at least 2 frames")
    tuples = []
    skipped = []
    for ref in manifest.frames:
        ranked = []
        for idx, cand in enumerate(manifest.frames):
            if cand.id == ref.id:
                continue
            score = _overlap_score(ref, cand, cfg)
            if score >= cfg.min_overlap:
                ranked.append((-score, idx, cand.id))
        if not ranked:
            skipped.append(ref.id)
            continue
        ranked.sort()
        tuples.append(
            TupleSpec(
                reference=ref.id,
                sources=tuple(cid for _, _, cid in ranked[: cfg.max_sources]),
            )
        )
    return TupleSelection(tuples=tuple(tuples), skipped=tuple(skipped))


def write_tuples(selection: TupleSelection, path) -> None:
    doc = {
        "tuples": [
            {"reference": t.reference, "sources": list(t.sources)} for t in selection.tuples
        ],
        "skipped": list(selection.skipped),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_tuples(path) -> TupleSelection:
    """Read a tuples JSON document written by `write_tuples`.

    Raises:
        ManifestError: On structural problems.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"tuples file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("tuples"), list):
        raise ManifestError(f"{path}: expected an object with a 'tuples' list")
    try:
        tuples = tuple(
            TupleSpec(reference=e["reference"], sources=tuple(e["sources"]))
            for e in doc["tuples"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed tuple entry: {exc}") from exc
    return TupleSelection(tuples=tuples, skipped=tuple(doc.get("skipped", ())))
