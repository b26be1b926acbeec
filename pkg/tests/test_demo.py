import numpy as np
import pytest

from scansim.demo import (Waypoint, build_trajectory, balance_trajectories,
                          dataset_a_rows, dataset_b_rows, dataset_c_rows,
                          execute_trajectory, load_demonstration,
                          refine_waypoints, sample_triplets,
                          save_demonstration, window_dataset)
from scansim.errors import (DemoTooShort, InsufficientStages,
                            UnorderedWaypoints)
from scansim.volume import ProbePose, SliceSpec, transform_pose
from scansim.workflow import DONE, ApiCommand, MotionParams, ScanStage


def wp(z, stage):
    pose = ProbePose(np.array([12.0, 2.0, z]), np.eye(3))
    return Waypoint(pose, stage, name=stage.wire_name)


class TestRefineWaypoints:
    def test_centers_on_vessel(self, phantom, waypoints):
        refined = refine_waypoints(phantom, waypoints[:4])
        spec = SliceSpec()
        from scansim.volume import mask_centroid_in_plane
        center = (spec.width_px - 1) / 2.0
        for r in refined:
            assert not r.off_mask
            _, col = mask_centroid_in_plane(phantom, r.pose, spec)
            assert abs(col - center) <= 1.0

    def test_off_mask_flagged(self, phantom):
        far = Waypoint(ProbePose(np.array([12.0, 2.0, 300.0]), np.eye(3)),
                       ScanStage.EXAMINE_CCA_PROXIMAL)
        refined = refine_waypoints(phantom, [far])
        assert refined[0].off_mask
        assert np.array_equal(refined[0].pose.position, far.pose.position)


class TestBuildTrajectory:
    def test_rejects_unordered(self):
        with pytest.raises(UnorderedWaypoints):
            build_trajectory([wp(6, ScanStage.EXAMINE_CCA_DISTAL),
                              wp(16, ScanStage.EXAMINE_CCA_PROXIMAL)])

    def test_rejects_too_few(self):
        with pytest.raises(UnorderedWaypoints):
            build_trajectory([wp(6, ScanStage.EXAMINE_CCA_PROXIMAL)])

    def test_forward_step_count_exact_distance(self):
        # 10 mm apart, 1 mm steps: ten forward records before the return
        traj = build_trajectory([wp(6, ScanStage.EXAMINE_CCA_PROXIMAL),
                                 wp(16, ScanStage.EXAMINE_CCA_DISTAL)])
        forward = [s for s in traj
                   if s[1] is ScanStage.EXAMINE_CCA_PROXIMAL]
        assert len(forward) == 10
        for i, (pose, _, api) in enumerate(forward):
            assert api is ApiCommand.TRACKING_FORWARD
            assert abs(pose.position[2] - (6.0 + i)) < 1e-9

    def test_forward_only_ends_done(self):
        traj = build_trajectory([wp(6, ScanStage.EXAMINE_CCA_PROXIMAL),
                                 wp(16, ScanStage.EXAMINE_CCA_DISTAL)])
        pose, stage, api = traj[-1]
        assert stage is ScanStage.EXAMINE_CCA_DISTAL
        assert api == DONE
        assert abs(pose.position[2] - 16.0) < 1e-9

    def test_return_phase_step_pattern(self):
        # 8 mm retraction: 2.0 + 1.5 * 3 = 6.5 leaves 1.5, clamped, so
        # 5 backward records (one transverse, four return) then the arrival
        wps = [wp(6, ScanStage.EXAMINE_CCA_PROXIMAL),
               wp(14, ScanStage.TRANSVERSE_SCAN_COMPLETED),
               wp(6, ScanStage.RETURN_COMPLETED)]
        traj = build_trajectory(wps)
        stages = [s for _, s, _ in traj]
        assert stages.count(ScanStage.TRANSVERSE_SCAN_COMPLETED) == 1
        assert stages.count(ScanStage.RETURN_TO_CAROTID_BULB) == 4
        assert stages.count(ScanStage.RETURN_COMPLETED) == 1
        back = [s for s in traj if s[2] is ApiCommand.TRACKING_BACKWARD]
        zs = [p.position[2] for p, _, _ in back]
        assert np.allclose(zs, [14.0, 12.0, 10.5, 9.0, 7.5])

    def test_rotation_phase(self):
        wps = [wp(6, ScanStage.EXAMINE_CCA_PROXIMAL),
               wp(14, ScanStage.TRANSVERSE_SCAN_COMPLETED),
               wp(6, ScanStage.RETURN_COMPLETED)]
        traj = build_trajectory(wps)
        rot = [s for _, s, _ in traj
               if s in (ScanStage.ROTATE_TO_LONGITUDINAL_VIEW,
                        ScanStage.LONGITUDINAL_SCAN_COMPLETED)]
        assert len(rot) == MotionParams().rotation_steps
        assert traj[-1][1] is ScanStage.LONGITUDINAL_SCAN_COMPLETED
        assert traj[-1][2] == DONE
        # final orientation is a 90 degree turn about v
        R = traj[-1][0].orientation
        assert abs(R[0, 0]) < 1e-9 and abs(R[0, 2] - 1.0) < 1e-9

    def test_visits_all_stages_in_order(self, waypoints):
        traj = build_trajectory(waypoints)
        seen = []
        for _, stage, _ in traj:
            if not seen or seen[-1] is not stage:
                seen.append(stage)
        assert seen == list(ScanStage)

    def test_seeded_perturbation_deterministic(self, waypoints):
        a = build_trajectory(waypoints, seed=7)
        b = build_trajectory(waypoints, seed=7)
        assert len(a) == len(b)
        for (pa, sa, aa), (pb, sb, ab) in zip(a, b):
            assert np.array_equal(pa.position, pb.position)
            assert sa is sb and aa == ab

    def test_perturbed_differs_from_nominal(self, waypoints):
        nominal = build_trajectory(waypoints, seed=None)
        perturbed = build_trajectory(waypoints, seed=3)
        moved = [np.linalg.norm(a[0].position - b[0].position)
                 for a, b in zip(nominal, perturbed)]
        assert max(moved[:5]) > 0.0


class TestBalance:
    def test_snippets_end_on_sparse_stages(self, waypoints):
        snippets = balance_trajectories(waypoints, MotionParams(), seed=0,
                                        scans=6)
        assert len(snippets) == 6
        finals = [traj[-1][1] for traj in snippets]
        assert set(finals) == {ScanStage.TRANSVERSE_SCAN_COMPLETED,
                               ScanStage.RETURN_COMPLETED,
                               ScanStage.LONGITUDINAL_SCAN_COMPLETED}
        for traj in snippets:
            assert traj[-1][2] == DONE
            assert len(traj) >= 3


class TestWindows:
    def _demo(self, phantom, waypoints, spec=SliceSpec(64, 64, 0.5)):
        traj = build_trajectory(waypoints)
        return execute_trajectory(phantom, traj, spec, volume_id="phantom")

    def test_count_formula(self, phantom, waypoints):
        demo = self._demo(phantom, waypoints)
        L = len(demo)
        for N, stride in ((5, 1), (5, 3), (8, 2)):
            entries = window_dataset(demo, N=N, stride=stride, demo_id="d")
            assert len(entries) == (L - N) // stride + 1

    def test_labels_come_from_last_frame(self, phantom, waypoints):
        demo = self._demo(phantom, waypoints)
        entries = window_dataset(demo, N=5, demo_id="d")
        for e in entries:
            rec = demo.records[e.last_index]
            assert e.stage is rec.stage
            assert e.prev_stage is demo.records[e.last_index - 1].stage
            assert e.last_index - e.first_index == 4
        assert entries[0].entry_id == "d:4"

    def test_too_short(self, phantom):
        traj = build_trajectory([wp(6, ScanStage.EXAMINE_CCA_PROXIMAL),
                                 wp(8, ScanStage.EXAMINE_CCA_DISTAL)])
        demo = execute_trajectory(phantom, traj, SliceSpec(32, 32, 0.5))
        with pytest.raises(DemoTooShort):
            window_dataset(demo, N=len(demo) + 1)


class TestTriplets:
    def _entries(self, phantom, waypoints):
        spec = SliceSpec(32, 32, 0.5)
        out = []
        for vid, seed in (("vol_a", 1), ("vol_b", 2)):
            traj = build_trajectory(waypoints, seed=seed)
            demo = execute_trajectory(phantom, traj, spec, volume_id=vid)
            out.extend(window_dataset(demo, N=5, stride=4, demo_id=vid))
        return out

    def test_stage_semantics(self, phantom, waypoints):
        entries = self._entries(phantom, waypoints)
        by_id = {e.entry_id: e for e in entries}
        triplets = sample_triplets(entries, per_anchor=3, seed=0)
        assert triplets
        for t in triplets:
            a, p, n = by_id[t.anchor_id], by_id[t.positive_id], by_id[t.negative_id]
            assert p.stage is a.stage
            assert n.stage is not a.stage
            if not t.positive_same_volume:
                assert p.volume_id != a.volume_id

    def test_cross_volume_preferred(self, phantom, waypoints):
        entries = self._entries(phantom, waypoints)
        triplets = sample_triplets(entries, per_anchor=2, seed=1)
        common = [t for t in triplets if not t.positive_same_volume]
        assert len(common) > len(triplets) // 2

    def test_single_stage_rejected(self, phantom, waypoints):
        entries = self._entries(phantom, waypoints)
        one_stage = [e for e in entries
                     if e.stage is ScanStage.EXAMINE_CCA_DISTAL]
        with pytest.raises(InsufficientStages):
            sample_triplets(one_stage)

    def test_deterministic(self, phantom, waypoints):
        entries = self._entries(phantom, waypoints)
        a = sample_triplets(entries, per_anchor=2, seed=9)
        b = sample_triplets(entries, per_anchor=2, seed=9)
        assert a == b


class TestPersistence:
    def test_demo_round_trip(self, phantom, waypoints, tmp_path):
        traj = build_trajectory(waypoints)[:12]
        demo = execute_trajectory(phantom, traj, SliceSpec(48, 48, 0.5),
                                  volume_id="phantom", seed=4)
        out = str(tmp_path / "demo0")
        save_demonstration(demo, out, demo_id="demo0")
        loaded, demo_id = load_demonstration(out)
        assert demo_id == "demo0"
        assert loaded.volume_id == "phantom" and loaded.seed == 4
        assert len(loaded) == len(demo)
        for a, b in zip(demo.records, loaded.records):
            assert np.array_equal(a.image.pixels, b.image.pixels)
            assert np.allclose(a.pose.position, b.pose.position, atol=1e-9)
            assert np.allclose(a.pose.orientation, b.pose.orientation,
                               atol=1e-9)
            assert a.stage is b.stage and a.next_api == b.next_api


class TestDatasetRows:
    def test_schemas(self, phantom, waypoints):
        traj = build_trajectory(waypoints)[:10]
        demo = execute_trajectory(phantom, traj, SliceSpec(32, 32, 0.5),
                                  volume_id="phantom")
        entries = window_dataset(demo, N=5, demo_id="demo0")

        a = dataset_a_rows(entries)
        assert set(a[0]) == {"first_img", "last_img", "prev_stage", "stage",
                             "explanation", "next_api", "volume_id"}
        assert a[0]["first_img"] == "demo0/frame_00000.png"
        assert a[0]["last_img"] == "demo0/frame_00004.png"

        b = dataset_b_rows(demo, "demo0")
        assert len(b) == len(demo)
        assert set(b[0]) == {"img", "question", "answer"}

        c = dataset_c_rows(entries)
        assert set(c[0]) == {"imgs", "turns"}
        assert len(c[0]["imgs"]) == 2 and len(c[0]["turns"]) == 3
        assert c[0]["turns"][0]["a"] == entries[0].stage.wire_name
