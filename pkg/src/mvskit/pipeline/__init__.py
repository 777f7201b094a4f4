"""Scene ingestion, tuple selection, synthetic fixtures, orchestration, CLI."""

from .manifest import (
    FrameEntry,
    ManifestError,
    SceneManifest,
    load_image,
    load_manifest,
    load_scene,
    save_manifest,
)
from .run import (
    PipelineConfig,
    RunDepthResult,
    fuse_depth_maps,
    gt_at_feature_grid,
    load_depth_dir,
    run_depth,
)
from .synth import SCENE_KINDS, SynthConfig, SyntheticScene, synth_scene, write_scene
from .tuples import (
    OverlapTupleConfig,
    PoseTupleConfig,
    TupleSelection,
    TupleSpec,
    load_tuples,
    select_tuples_overlap,
    select_tuples_pose,
    write_tuples,
)

__all__ = [
    "FrameEntry",
    "ManifestError",
    "SceneManifest",
    "load_image",
    "load_manifest",
    "load_scene",
    "save_manifest",
    "PipelineConfig",
    "RunDepthResult",
    "fuse_depth_maps",
    "gt_at_feature_grid",
    "load_depth_dir",
    "run_depth",
    "SCENE_KINDS",
    "SynthConfig",
    "SyntheticScene",
    "synth_scene",
    "write_scene",
    "OverlapTupleConfig",
    "PoseTupleConfig",
    "TupleSelection",
    "TupleSpec",
    "load_tuples",
    "select_tuples_overlap",
    "select_tuples_pose",
    "write_tuples",
]
