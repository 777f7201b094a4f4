"""Scene ingestion, synthetic fixtures, tuple selection, orchestration, CLI."""

import json

import numpy as np
import pytest

from mvskit.geometry import RigidPose, project_point, backproject_pixel
from mvskit.pipeline import (
    ManifestError,
    OverlapTupleConfig,
    PipelineConfig,
    PoseTupleConfig,
    SynthConfig,
    load_manifest,
    load_scene,
    load_tuples,
    run_depth,
    select_tuples_overlap,
    select_tuples_pose,
    synth_scene,
    write_scene,
    write_tuples,
)
from mvskit.pipeline.cli import main as cli_main
from mvskit.pipeline.manifest import FrameEntry, SceneManifest
from mvskit.pipeline.tuples import TupleSelection, TupleSpec

from conftest import make_intrinsics


def _manifest_doc(n=2, rot=None):
    rot = np.eye(3) if rot is None else rot
    frames = []
    for i in range(n):
        mat = np.eye(4)
        mat[:3, :3] = rot
        mat[0, 3] = 0.1 * i
        frames.append(
            {
                "id": f"f{i}",
                "image": f"images/f{i}.png",
                "intrinsics": {"fx": 50.0, "fy": 50.0, "cx": 15.5, "cy": 11.5,
                               "width": 32, "height": 24},
                "world_from_camera": [float(v) for v in mat.ravel()],
            }
        )
    return {"units": "test", "frames": frames}


class TestManifest:
    def test_minimal_scene_roundtrip(self, tmp_path):
        scene = synth_scene("plane", 2, noise_seed=0, cfg=SynthConfig(width=64, height=48))
        manifest_path = write_scene(scene, tmp_path)
        manifest, frames = load_scene(manifest_path)
        assert len(frames) == 2
        assert manifest.frame_ids() == ["frame_000", "frame_001"]
        np.testing.assert_allclose(
            frames[0].image.data, scene.frames[0].image.data, atol=0
        )
        np.testing.assert_allclose(
            frames[0].gt_depth.depth[frames[0].gt_depth.valid],
            scene.frames[0].gt_depth.depth[scene.frames[0].gt_depth.valid],
            rtol=1e-3,
        )

    def test_reflection_rejected_naming_frame(self, tmp_path):
        doc = _manifest_doc(rot=np.diag([1.0, 1.0, -1.0]))
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="f0.*determinant -1"):
            load_manifest(path)

    def test_badly_non_orthonormal_rejected(self, tmp_path):
        rot = np.eye(3)
        rot[0, 1] = 5e-3  # beyond the 1e-4 load tolerance
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(_manifest_doc(rot=rot)))
        with pytest.raises(ManifestError, match="orthonormal"):
            load_manifest(path)

    def test_slightly_noisy_pose_snapped(self, tmp_path):
        rot = np.eye(3)
        rot[0, 1] = 5e-5  # inside load tolerance, outside RigidPose tolerance
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(_manifest_doc(rot=rot)))
        manifest = load_manifest(path)
        r = manifest.frames[0].world_from_camera.rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)

    def test_duplicate_id_rejected(self, tmp_path):
        doc = _manifest_doc()
        doc["frames"][1]["id"] = "f0"
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="duplicate frame id"):
            load_manifest(path)

    def test_missing_manifest_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.json")

    def test_missing_image_file(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(_manifest_doc()))
        with pytest.raises(ManifestError, match="image file not found"):
            load_scene(path)

    def test_8bit_png_and_pgm_accepted(self, tmp_path):
        from PIL import Image

        from mvskit.pipeline import load_image

        arr = (np.arange(32 * 24, dtype=np.uint8).reshape(24, 32) % 251)
        png8 = tmp_path / "a.png"
        Image.fromarray(arr).save(png8)
        img = load_image(png8)
        assert (img.width, img.height, img.channels) == (32, 24, 1)
        np.testing.assert_allclose(img.data[:, :, 0], arr / 255.0, atol=1e-7)

        pgm = tmp_path / "a.pgm"
        Image.fromarray(arr).save(pgm)
        img2 = load_image(pgm)
        np.testing.assert_allclose(img2.data, img.data, atol=0)


def _pose_manifest(distances):
    """Frames whose pose distance from f0 is exactly each given value."""
    intr = make_intrinsics(fx=50, fy=50, cx=16, cy=12, width=32, height=24)
    frames = [
        FrameEntry(
            id="f0",
            image_path="f0.png",
            intrinsics=intr,
            world_from_camera=RigidPose.identity(),
        )
    ]
    for i, p in enumerate(distances):
        frames.append(
            FrameEntry(
                id=f"c{i}",
                image_path=f"c{i}.png",
                intrinsics=intr,
                world_from_camera=RigidPose(np.eye(3), np.array([p * p, 0.0, 0.0])),
            )
        )
    return SceneManifest(frames=tuple(frames))


class TestSelectTuplesPose:
    def test_window_and_target_preference(self):
        manifest = _pose_manifest([0.05, 0.2, 0.5])
        cfg = PoseTupleConfig(max_sources=1, t_low=0.1, t_high=0.4, t_target=0.225)
        selection = select_tuples_pose(manifest, cfg)
        ref_tuple = next(t for t in selection.tuples if t.reference == "f0")
        assert ref_tuple.sources == ("c1",)

    def test_identical_poses_all_skipped(self):
        intr = make_intrinsics()
        frames = tuple(
            FrameEntry(
                id=f"f{i}",
                image_path=f"f{i}.png",
                intrinsics=intr,
                world_from_camera=RigidPose.identity(),
            )
            for i in range(3)
        )
        selection = select_tuples_pose(SceneManifest(frames=frames))
        assert selection.tuples == ()
        assert len(selection.skipped) == 3

    def test_equidistant_tie_prefers_earlier_entry(self):
        # 0.2 and 0.25 are both 0.025 from the target 0.225.
        manifest = _pose_manifest([0.2, 0.25])
        cfg = PoseTupleConfig(max_sources=1, t_low=0.1, t_high=0.4, t_target=0.225)
        selection = select_tuples_pose(manifest, cfg)
        ref_tuple = next(t for t in selection.tuples if t.reference == "f0")
        assert ref_tuple.sources == ("c0",)

    def test_permutation_independent_without_ties(self):
        manifest = _pose_manifest([0.12, 0.2, 0.3, 0.41])
        cfg = PoseTupleConfig(max_sources=2, t_low=0.1, t_high=0.45, t_target=0.225)
        base = {t.reference: t.sources for t in select_tuples_pose(manifest, cfg).tuples}
        permuted = SceneManifest(frames=tuple(reversed(manifest.frames)))
        perm = {t.reference: t.sources for t in select_tuples_pose(permuted, cfg).tuples}
        assert base == perm


class TestSelectTuplesOverlap:
    def test_identical_poses_full_overlap(self):
        intr = make_intrinsics(fx=50, fy=50, cx=16, cy=12, width=32, height=24)
        frames = tuple(
            FrameEntry(
                id=f"f{i}",
                image_path=f"f{i}.png",
                intrinsics=intr,
                world_from_camera=RigidPose.identity(),
            )
            for i in range(2)
        )
        selection = select_tuples_overlap(SceneManifest(frames=frames))
        assert {t.reference for t in selection.tuples} == {"f0", "f1"}

    def test_opposite_facing_skipped(self):
        intr = make_intrinsics(fx=50, fy=50, cx=16, cy=12, width=32, height=24)
        frames = (
            FrameEntry(
                id="a", image_path="a.png", intrinsics=intr,
                world_from_camera=RigidPose.identity(),
            ),
            FrameEntry(
                id="b", image_path="b.png", intrinsics=intr,
                world_from_camera=RigidPose(np.diag([-1.0, 1.0, -1.0]), np.zeros(3)),
            ),
        )
        selection = select_tuples_overlap(SceneManifest(frames=frames))
        assert selection.tuples == ()
        assert set(selection.skipped) == {"a", "b"}

    def test_half_overlap_via_shifted_principal_point(self):
        # Identical poses but the candidate's principal point is shifted
        # by half the image: exactly half the reference grid lands inside.
        w, h = 33, 25
        a_intr = make_intrinsics(fx=50, fy=50, cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h)
        b_intr = make_intrinsics(
            fx=50, fy=50, cx=(w - 1) / 2 - (w - 1) / 2.0, cy=(h - 1) / 2, width=w, height=h
        )
        frames = (
            FrameEntry(id="a", image_path="a.png", intrinsics=a_intr,
                       world_from_camera=RigidPose.identity()),
            FrameEntry(id="b", image_path="b.png", intrinsics=b_intr,
                       world_from_camera=RigidPose.identity()),
        )
        cfg = OverlapTupleConfig(min_overlap=0.05, grid=16)
        from mvskit.pipeline.tuples import _overlap_score

        score = _overlap_score(frames[0], frames[1], cfg)
        assert abs(score - 0.5) <= 1.0 / 16.0 + 1e-9


class TestSynthScene:
    def test_plane_gt_constant(self):
        scene = synth_scene("plane", 3, noise_seed=4, cfg=SynthConfig(width=64, height=48))
        gt = scene.frames[1].gt_depth
        assert gt.valid.all()
        np.testing.assert_allclose(gt.depth, 2.0, rtol=1e-12)

    def test_sphere_center_depth_hand_value(self):
        # Central pixel looks straight at the sphere center, so the first
        # hit is orbit_radius - sphere_radius away.
        cfg = SynthConfig(width=65, height=49)  # odd: integer principal point
        scene = synth_scene("sphere", 4, noise_seed=4, cfg=cfg)
        frame = scene.frames[0]
        cy = int(frame.intrinsics.cy)
        cx = int(frame.intrinsics.cx)
        assert frame.gt_depth.valid[cy, cx]
        assert frame.gt_depth.depth[cy, cx] == pytest.approx(
            cfg.orbit_radius - cfg.sphere_radius, rel=1e-9
        )

    def test_two_planes_has_both_depths(self):
        cfg = SynthConfig(width=64, height=48)
        scene = synth_scene("two-planes", 3, noise_seed=4, cfg=cfg)
        gt = scene.frames[1].gt_depth
        depths = np.unique(np.round(gt.depth[gt.valid], 6))
        assert cfg.plane_depth in depths
        assert cfg.second_plane_depth in depths

    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(width=48, height=32)
        a = synth_scene("plane", 2, noise_seed=9, cfg=cfg)
        b = synth_scene("plane", 2, noise_seed=9, cfg=cfg)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.image.data, fb.image.data)

    def test_different_seed_differs(self):
        cfg = SynthConfig(width=48, height=32)
        a = synth_scene("plane", 2, noise_seed=1, cfg=cfg)
        b = synth_scene("plane", 2, noise_seed=2, cfg=cfg)
        assert not np.array_equal(a.frames[0].image.data, b.frames[0].image.data)

    def test_too_few_frames_rejected(self):
        with pytest.raises(ValueError):
            synth_scene("plane", 1)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            synth_scene("torus", 3)

    def test_gt_reprojection_consistency_plane(self):
        # Backprojecting GT from one view and projecting into another must
        # agree with the other view's GT (exact for fronto planes).
        scene = synth_scene("plane", 3, noise_seed=2, cfg=SynthConfig(width=64, height=48))
        a, b = scene.frames[0], scene.frames[2]
        rng = np.random.default_rng(0)
        for _ in range(50):
            u, v = int(rng.integers(0, 64)), int(rng.integers(0, 48))
            d = a.gt_depth.depth[v, u]
            p_world = a.world_from_camera.transform(backproject_pixel(a.intrinsics, u, v, d))
            u_b, v_b, z_b, ok = project_point(b.intrinsics, b.camera_from_world.transform(p_world))
            if not ok or not (0 <= u_b <= 63 and 0 <= v_b <= 47):
                continue
            gt_b = b.gt_depth.depth[int(round(v_b)), int(round(u_b))]
            assert z_b == pytest.approx(gt_b, rel=1e-9)

    def test_gt_reprojection_consistency_sphere(self):
        cfg = SynthConfig(width=96, height=72)
        scene = synth_scene("sphere", 6, noise_seed=2, cfg=cfg)
        a, b = scene.frames[0], scene.frames[1]
        r = cfg.sphere_radius
        c_b = b.world_from_camera.translation
        rels = []
        rng = np.random.default_rng(0)
        for _ in range(2500):
            u, v = int(rng.integers(0, 96)), int(rng.integers(0, 72))
            if not a.gt_depth.valid[v, u]:
                continue
            d = a.gt_depth.depth[v, u]
            p_world = a.world_from_camera.transform(backproject_pixel(a.intrinsics, u, v, d))
            # Analytic visibility from B: P (at ray parameter 1) must be
            # the first intersection of the ray from B's center.
            ray = p_world - c_b
            qa = ray @ ray
            qb = c_b @ ray
            qc = c_b @ c_b - r * r
            t_near = (-qb - np.sqrt(max(qb * qb - qa * qc, 0.0))) / qa
            if t_near < 1.0 - 1e-9:
                continue  # occluded by the near surface
            u_b, v_b, z_b, ok = project_point(b.intrinsics, b.camera_from_world.transform(p_world))
            if not ok or not (1 <= u_b <= 94 and 1 <= v_b <= 70):
                continue
            iy, ix = int(round(v_b)), int(round(u_b))
            if not b.gt_depth.valid[iy - 1 : iy + 2, ix - 1 : ix + 2].all():
                continue  # silhouette neighborhood
            gt_b = b.gt_depth.depth[iy, ix]
            rels.append(abs(z_b - gt_b) / gt_b)
        rels = np.array(rels)
        assert len(rels) > 50
        # The rounded pixel sits at most 0.51 px away; away from the
        # silhouette the induced depth difference stays small.
        assert np.percentile(rels, 95) < 0.02


class TestPipelineConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = PipelineConfig(bins=32, passes=1, temperature=0.07)
        path = tmp_path / "c.json"
        cfg.save_json(path)
        back = PipelineConfig.from_json(path)
        assert back == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"bogus": 1}')
        with pytest.raises(ManifestError, match="unknown config keys"):
            PipelineConfig.from_json(path)

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            PipelineConfig(bins=1)
        with pytest.raises(ValueError):
            PipelineConfig(passes=0)


@pytest.fixture(scope="module")
def plane_scene_640():
    return synth_scene("plane", 3, noise_seed=7, cfg=SynthConfig(width=640, height=480))


class TestRunDepth:
    def test_plane_scene_report_under_two_percent(self, plane_scene_640):
        frames = list(plane_scene_640.frames)
        tuples = [TupleSpec(reference="frame_001", sources=("frame_000", "frame_002"))]
        result = run_depth(frames, tuples)
        assert not result.failures
        assert result.report is not None
        assert result.report.abs_rel < 0.02

    def test_missing_frame_id_fails_only_that_tuple(self, plane_scene_640):
        frames = list(plane_scene_640.frames)
        tuples = [
            TupleSpec(reference="frame_001", sources=("frame_000", "ghost")),
            TupleSpec(reference="frame_001", sources=("frame_000", "frame_002")),
        ]
        result = run_depth(frames, tuples, PipelineConfig(bins=16, passes=1))
        assert len(result.failures) == 1
        assert "ghost" in result.failures[0].error
        assert "frame_001" in result.depth_maps

    def test_outputs_byte_identical_across_runs(self, plane_scene_640, tmp_path):
        frames = list(plane_scene_640.frames)
        tuples = [TupleSpec(reference="frame_001", sources=("frame_000", "frame_002"))]
        cfg = PipelineConfig(bins=16, passes=2)
        run_depth(frames, tuples, cfg, out_dir=tmp_path / "a")
        run_depth(frames, tuples, cfg, out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "frame_001.mvsd").read_bytes()
        b = (tmp_path / "b" / "frame_001.mvsd").read_bytes()
        assert a == b


class TestTuplesIO:
    def test_roundtrip(self, tmp_path):
        selection = TupleSelection(
            tuples=(TupleSpec(reference="a", sources=("b", "c")),), skipped=("d",)
        )
        path = tmp_path / "t.json"
        write_tuples(selection, path)
        back = load_tuples(path)
        assert back == selection

    def test_self_reference_rejected(self):
        with pytest.raises(ValueError):
            TupleSpec(reference="a", sources=("a",))

    def test_empty_sources_rejected(self):
        with pytest.raises(ValueError):
            TupleSpec(reference="a", sources=())


class TestCli:
    def test_full_flow_small_scene(self, tmp_path):
        scene_dir = str(tmp_path / "scene")
        assert cli_main(["synth", "--kind", "plane", "--frames", "3",
                         "--out", scene_dir, "--width", "128", "--height", "96"]) == 0
        manifest = f"{scene_dir}/scene.json"
        tuples_path = str(tmp_path / "tuples.json")
        assert cli_main(["tuples", "--scene", manifest, "--mode", "overlap",
                         "--out", tuples_path]) == 0
        cfg_path = tmp_path / "config.json"
        PipelineConfig(bins=16, passes=1).save_json(cfg_path)
        depth_dir = str(tmp_path / "depths")
        assert cli_main(["depth", "--scene", manifest, "--tuples", tuples_path,
                         "--config", str(cfg_path), "--out", depth_dir]) == 0
        mesh_path = str(tmp_path / "mesh.ply")
        assert cli_main(["fuse", "--scene", manifest, "--depth-dir", depth_dir,
                         "--voxel", "0.04", "--max-depth", "3.5", "--out", mesh_path]) == 0
        report_path = str(tmp_path / "r.json")
        assert cli_main(["eval-depth", "--pred-dir", depth_dir, "--scene", manifest,
                         "--report", report_path]) == 0
        assert cli_main(["eval-mesh", "--pred", mesh_path, "--gt", mesh_path,
                         "--samples", "2000", "--thresh", "0.05"]) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert "abs_rel" in report and report["per_image"]

    def test_mlp_scorer_with_relative_weights_path(self, tmp_path):
        from mvskit.costvolume import random_mlp_weights, save_mlp_weights

        scene_dir = str(tmp_path / "scene")
        cli_main(["synth", "--kind", "plane", "--frames", "3",
                  "--out", scene_dir, "--width", "128", "--height", "96"])
        save_mlp_weights(random_mlp_weights((8,), seed=1), tmp_path / "weights.json")
        cfg_path = tmp_path / "config.json"
        PipelineConfig(
            bins=8, passes=1, scorer_mode="mlp", mlp_weights_path="weights.json"
        ).save_json(cfg_path)
        tuples_path = tmp_path / "tuples.json"
        write_tuples(
            TupleSelection(
                tuples=(TupleSpec(reference="frame_001",
                                  sources=("frame_000", "frame_002")),),
                skipped=(),
            ),
            tuples_path,
        )
        code = cli_main(["depth", "--scene", f"{scene_dir}/scene.json",
                         "--tuples", str(tuples_path), "--config", str(cfg_path),
                         "--out", str(tmp_path / "d")])
        assert code == 0
        assert (tmp_path / "d" / "frame_001.mvsd").exists()

    def test_bad_manifest_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert cli_main(["tuples", "--scene", str(bad), "--mode", "pose",
                         "--out", str(tmp_path / "t.json")]) == 2

    def test_partial_failure_exits_1(self, tmp_path):
        scene_dir = str(tmp_path / "scene")
        cli_main(["synth", "--kind", "plane", "--frames", "2",
                  "--out", scene_dir, "--width", "128", "--height", "96"])
        tuples_path = tmp_path / "tuples.json"
        selection = TupleSelection(
            tuples=(
                TupleSpec(reference="frame_000", sources=("ghost",)),
                TupleSpec(reference="frame_001", sources=("frame_000",)),
            ),
            skipped=(),
        )
        write_tuples(selection, tuples_path)
        cfg_path = tmp_path / "config.json"
        PipelineConfig(bins=8, passes=1).save_json(cfg_path)
        code = cli_main(["depth", "--scene", f"{scene_dir}/scene.json",
                         "--tuples", str(tuples_path), "--config", str(cfg_path),
                         "--out", str(tmp_path / "d")])
        assert code == 1
