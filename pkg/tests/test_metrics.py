import csv
import json
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from meshes import looking_down_z, make_cube, make_random_hull
from salientpose.exceptions import BehindCameraError
from salientpose.file_utils import dumps_json
from salientpose.geometry import mesh_diameter
from salientpose.metrics import (
    SUMMARY_COLUMNS,
    MetricSummary,
    PoseErrorReport,
    SymmetrySpec,
    add_adi,
    average_recall,
    evaluate_pose,
    expand_symmetries,
    merge_summaries,
    mspd,
    mssd,
    re_te,
    recall_and_ar,
    rotation_angle,
    summarize_reports,
    vsd,
    vsd_errors,
    write_summary_csv,
)
from salientpose.models import EvalConfig
from salientpose.raster import Pose

# --- Fixtures ---

Z_AXIS = np.array([0.0, 0.0, 1.0])


def _rz(degrees):
    return Pose(Rotation.from_euler("z", degrees, degrees=True).as_matrix(), np.zeros(3))


@pytest.fixture
def quarter_turn_syms():
    return expand_symmetries(SymmetrySpec.create(continuous_axes=[(Z_AXIS, np.zeros(3))]), step_degrees=90.0)


@pytest.fixture
def small_grid():
    return EvalConfig(
        vsd_tau_fractions=[0.1],
        vsd_thresholds=[0.3, 0.6],
        mssd_thresholds=[0.1, 0.2],
        mspd_thresholds=[10.0, 20.0],
    )


def _report(vsd_error, mssd_value, mspd_value, add, adi, re, te, symmetric=False):
    return PoseErrorReport(
        obj_id=1, symmetric=symmetric, vsd_errors=(vsd_error,), vsd_taus=(10.0,),
        mssd=mssd_value, mspd=mspd_value, add=add, adi=adi, re=re, te=te,
    )


# --- Rotations and symmetries ---


def test_rotation_angle():
    assert rotation_angle(np.eye(3), np.eye(3)) == 0.0
    assert rotation_angle(np.eye(3), _rz(90).rotation) == pytest.approx(math.pi / 2)
    assert rotation_angle(np.eye(3), np.diag([1.0, -1.0, -1.0])) == pytest.approx(math.pi)


def test_rotation_angle_is_accurate_for_tiny_angles():
    R = Rotation.from_rotvec([1e-8, 0.0, 0.0]).as_matrix()
    assert rotation_angle(np.eye(3), R) == pytest.approx(1e-8, rel=1e-6)


def test_identity_must_appear_exactly_once():
    with pytest.raises(ValueError):
        SymmetrySpec((Pose.identity(), Pose.identity()))
    with pytest.raises(ValueError):
        SymmetrySpec((_rz(90),))


def test_continuous_axis_must_be_unit():
    with pytest.raises(ValueError):
        SymmetrySpec(continuous_axes=((np.array([0.0, 0.0, 2.0]), np.zeros(3)),))
    spec = SymmetrySpec.create(continuous_axes=[(np.array([0.0, 0.0, 2.0]), np.zeros(3))])
    np.testing.assert_allclose(spec.continuous_axes[0][0], Z_AXIS)


def test_create_puts_identity_first():
    spec = SymmetrySpec.create(discrete=[_rz(180), Pose.identity()])
    assert len(spec.discrete) == 2
    np.testing.assert_array_equal(spec.discrete[0].rotation, np.eye(3))
    assert spec.is_symmetric
    assert not SymmetrySpec().is_symmetric


def test_expand_continuous_axis(quarter_turn_syms):
    assert len(quarter_turn_syms) == 4
    np.testing.assert_array_equal(quarter_turn_syms[0].rotation, np.eye(3))


def test_expand_deduplicates_coinciding_transforms():
    half_turn = Pose(np.diag([-1.0, -1.0, 1.0]), np.zeros(3))
    spec = SymmetrySpec.create(discrete=[half_turn], continuous_axes=[(Z_AXIS, np.zeros(3))])
    assert len(expand_symmetries(spec, step_degrees=90.0)) == 4


def test_expand_combines_discrete_and_continuous():
    flip = Pose(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
    spec = SymmetrySpec.create(discrete=[flip], continuous_axes=[(Z_AXIS, np.zeros(3))])
    assert len(expand_symmetries(spec, step_degrees=90.0)) == 8


def test_continuous_axis_through_offset_keeps_the_axis_fixed():
    offset = np.array([10.0, 0.0, 0.0])
    syms = expand_symmetries(SymmetrySpec.create(continuous_axes=[(Z_AXIS, offset)]), step_degrees=120.0)
    assert len(syms) == 3
    for s in syms:
        np.testing.assert_allclose(s.apply(offset[None, :])[0], offset, atol=1e-12)


def test_expand_rejects_non_positive_step():
    with pytest.raises(ValueError):
        expand_symmetries(SymmetrySpec(), step_degrees=0.0)


# --- Point errors ---


def test_translation_only_errors(cube):
    gt = looking_down_z(500.0)
    est = Pose(np.eye(3), [3.0, 4.0, 500.0])
    syms = [Pose.identity()]
    assert mssd(cube.vertices, est, gt, syms) == pytest.approx(5.0)
    add, adi = add_adi(cube.vertices, est, gt)
    assert add == pytest.approx(5.0)
    assert adi <= add
    re, te = re_te(est, gt, syms)
    assert re == 0.0
    assert te == pytest.approx(5.0)


def test_symmetric_pose_has_zero_error(cube, quarter_turn_syms):
    gt = looking_down_z(500.0)
    est = gt.compose(_rz(90))
    assert mssd(cube.vertices, est, gt, quarter_turn_syms) == pytest.approx(0.0, abs=1e-9)
    assert mssd(cube.vertices, est, gt, [Pose.identity()]) > 50.0
    add, adi = add_adi(cube.vertices, est, gt)
    assert add > 50.0
    assert adi == pytest.approx(0.0, abs=1e-9)
    re, te = re_te(est, gt, quarter_turn_syms)
    assert re == pytest.approx(0.0, abs=1e-6)
    assert te == pytest.approx(0.0, abs=1e-9)
    assert re_te(est, gt, [Pose.identity()])[0] == pytest.approx(90.0)


def test_mspd_of_a_lateral_shift(cube, small_camera):
    gt = looking_down_z(500.0)
    est = Pose(np.eye(3), [5.0, 0.0, 500.0])
    # The shift projects to f * 5 / z pixels, largest on the near face.
    assert mspd(cube.vertices, est, gt, [Pose.identity()], small_camera) == pytest.approx(500.0 / 450.0)


def test_mspd_rejects_ground_truth_behind_camera(cube, small_camera):
    gt = looking_down_z(0.0)
    with pytest.raises(BehindCameraError):
        mspd(cube.vertices, gt, gt, [Pose.identity()], small_camera)


# --- VSD ---


def test_vsd_of_identical_renders_is_zero():
    depth = np.zeros((8, 8))
    depth[2:6, 2:6] = 300.0
    assert vsd(depth, depth, depth, tau=20.0, delta=15.0) == 0.0


def test_vsd_of_disjoint_footprints_is_one():
    est = np.zeros((8, 8))
    gt = np.zeros((8, 8))
    est[:, :2] = 300.0
    gt[:, 6:] = 300.0
    assert vsd(est, gt, gt, tau=20.0, delta=15.0) == 1.0


def test_vsd_empty_union_depends_on_annotation():
    empty = np.zeros((4, 4))
    assert vsd(empty, empty, empty, 20.0, 15.0) == 1.0
    assert vsd(empty, empty, empty, 20.0, 15.0, annotated_visible=False) == 0.0


def test_vsd_depth_tolerance():
    gt = np.full((1, 4), 100.0)
    est = np.array([[100.0, 100.0, 130.0, 130.0]])
    no_measurement = np.zeros((1, 4))
    assert vsd_errors(est, gt, no_measurement, [20.0, 40.0], delta=15.0) == [0.5, 0.0]


def test_vsd_hides_pixels_behind_the_test_depth():
    gt = np.full((1, 4), 100.0)
    est = np.array([[100.0, 100.0, 130.0, 130.0]])
    # Against the ground truth as test depth the far pixels are invisible for est.
    assert vsd(est, gt, gt, tau=40.0, delta=15.0) == 0.5


def test_vsd_argument_checks():
    depth = np.zeros((4, 4))
    with pytest.raises(ValueError):
        vsd(depth, depth, np.zeros((4, 5)), 20.0, 15.0)
    with pytest.raises(ValueError):
        vsd(depth, depth, depth, 0.0, 15.0)
    with pytest.raises(ValueError):
        vsd(depth, depth, depth, 20.0, 0.0)


# --- Random fixtures against direct evaluation ---


def _random_pose(rng, depth=(400.0, 700.0)):
    t = [rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(*depth)]
    return Pose(Rotation.random(random_state=rng).as_matrix(), t)


def _random_syms(rng):
    count = int(rng.integers(0, 8))
    return [Pose.identity()] + [
        Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-10, 10, 3)) for _ in range(count)
    ]


def _apply(pose, v):
    return pose.rotation @ v + pose.translation


def _mssd_by_loops(vertices, est, gt, syms):
    best = math.inf
    for s in syms:
        worst = max(float(np.linalg.norm(_apply(est, v) - _apply(gt, _apply(s, v)))) for v in vertices)
        best = min(best, worst)
    return best


def _pixel(K, p):
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def _mspd_by_loops(vertices, est, gt, syms, K):
    best = math.inf
    for s in syms:
        worst = max(
            float(np.linalg.norm(_pixel(K, _apply(est, v)) - _pixel(K, _apply(gt, _apply(s, v))))) for v in vertices
        )
        best = min(best, worst)
    return best


def _add_adi_by_loops(vertices, est, gt):
    moved_est = [_apply(est, v) for v in vertices]
    moved_gt = [_apply(gt, v) for v in vertices]
    add = sum(float(np.linalg.norm(e - g)) for e, g in zip(moved_est, moved_gt)) / len(vertices)
    adi = sum(min(float(np.linalg.norm(e - g)) for g in moved_gt) for e in moved_est) / len(vertices)
    return add, adi


def _re_te_by_loops(est, gt, syms):
    pairs = []
    for s in syms:
        target = gt.compose(s)
        angle = Rotation.from_matrix(est.rotation.T @ target.rotation).magnitude()
        pairs.append((math.degrees(angle), float(np.linalg.norm(est.translation - target.translation))))
    return min(pairs)


def _vsd_by_loops(est, gt, test, tau, delta):
    union = differing = 0
    for row in range(est.shape[0]):
        for col in range(est.shape[1]):
            e, g, d = est[row, col], gt[row, col], test[row, col]
            seen_est = e > 0 and (d == 0 or e - d <= delta)
            seen_gt = g > 0 and (d == 0 or g - d <= delta)
            if not (seen_est or seen_gt):
                continue
            union += 1
            if not (seen_est and seen_gt) or abs(e - g) > tau:
                differing += 1
    return differing / union if union else 1.0


def _identity_case_syms(rng, case):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    if case == 0:
        return [Pose.identity()]
    if case == 1:
        flip = Pose(Rotation.from_rotvec(math.pi * axis).as_matrix(), np.zeros(3))
        return expand_symmetries(SymmetrySpec.create(discrete=[flip]))
    return expand_symmetries(SymmetrySpec.create(continuous_axes=[(axis, rng.uniform(-5, 5, 3))]), step_degrees=10.0)


def test_exact_estimates_have_zero_error_and_full_recall(small_camera):
    rng = np.random.default_rng(101)
    for i in range(50):
        mesh = make_random_hull(rng, count=30, radius=30.0)
        gt = _random_pose(rng)
        syms = _identity_case_syms(rng, i % 3)
        diameter = mesh_diameter(mesh)
        report = evaluate_pose(mesh, gt, gt, syms, small_camera, diameter)
        assert set(report.vsd_errors) == {0.0}
        assert (report.mssd, report.mspd, report.add, report.adi, report.re, report.te) == (0, 0, 0, 0, 0, 0)
        summary = recall_and_ar([report], diameter, small_camera.width)
        assert summary.ar == 1.0
        assert summary.ad_recall == summary.re_recall == summary.te_recall == 1.0


def test_point_errors_match_direct_evaluation(small_camera):
    rng = np.random.default_rng(202)
    for _ in range(200):
        vertices = rng.uniform(-50.0, 50.0, size=(int(rng.integers(1, 51)), 3))
        est, gt = _random_pose(rng), _random_pose(rng)
        syms = _random_syms(rng)
        assert mssd(vertices, est, gt, syms) == pytest.approx(_mssd_by_loops(vertices, est, gt, syms), rel=1e-9)
        assert mspd(vertices, est, gt, syms, small_camera) == pytest.approx(
            _mspd_by_loops(vertices, est, gt, syms, small_camera), rel=1e-9)
        assert add_adi(vertices, est, gt) == pytest.approx(_add_adi_by_loops(vertices, est, gt), rel=1e-9)
        re, te = re_te(est, gt, syms)
        expected_re, expected_te = _re_te_by_loops(est, gt, syms)
        assert re == pytest.approx(expected_re, abs=1e-6)
        assert te == pytest.approx(expected_te, rel=1e-9, abs=1e-9)


def test_vsd_matches_pixel_by_pixel_evaluation():
    rng = np.random.default_rng(303)

    def depth_map():
        values = rng.uniform(270.0, 330.0, size=(16, 16))
        values[rng.random((16, 16)) < 0.3] = 0.0
        return values

    for _ in range(100):
        est, gt, test = depth_map(), depth_map(), depth_map()
        taus = [5.0, 10.0, 20.0, 40.0]
        expected = [_vsd_by_loops(est, gt, test, tau, 15.0) for tau in taus]
        assert vsd_errors(est, gt, test, taus, delta=15.0) == expected


def test_pure_translation_gives_its_magnitude():
    rng = np.random.default_rng(404)
    for _ in range(10):
        mesh = make_random_hull(rng, count=30, radius=40.0)
        gt = _random_pose(rng)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        for delta in (1.0, 5.0, 20.0):
            est = Pose(gt.rotation, gt.translation + delta * direction)
            re, te = re_te(est, gt, [Pose.identity()])
            assert re == 0.0
            assert te == pytest.approx(delta, rel=1e-9)
            assert mssd(mesh.vertices, est, gt, [Pose.identity()]) == pytest.approx(delta, rel=1e-9)
            add, adi = add_adi(mesh.vertices, est, gt)
            assert add == pytest.approx(delta, rel=1e-9)
            assert adi <= add


def test_discretized_axis_absorbs_rotations_about_it(sphere, small_camera):
    offset = np.array([10.0, -5.0, 0.0])
    syms = expand_symmetries(SymmetrySpec.create(continuous_axes=[(Z_AXIS, offset)]), step_degrees=1.0)
    assert len(syms) == 360
    gt = Pose(Rotation.from_euler("xy", [30, -20], degrees=True).as_matrix(), [5.0, 0.0, 500.0])
    vertices = sphere.vertices

    for k in (1, 45, 180, 359):
        est = gt.compose(syms[k])
        assert mssd(vertices, est, gt, syms) == pytest.approx(0.0, abs=1e-9)
        assert mspd(vertices, est, gt, syms, small_camera) == pytest.approx(0.0, abs=1e-9)
        assert re_te(est, gt, syms)[0] == pytest.approx(0.0, abs=1e-6)

    # Off-grid angles land at most half a step from a member.
    reach = np.linalg.norm((vertices - offset)[:, :2], axis=1).max()
    for degrees in (0.3, 17.5, 123.77, 359.6):
        R = Rotation.from_rotvec(math.radians(degrees) * Z_AXIS).as_matrix()
        est = gt.compose(Pose(R, offset - R @ offset))
        assert mssd(vertices, est, gt, syms) <= 2.0 * reach * math.sin(math.radians(0.25)) + 1e-9
        assert re_te(est, gt, syms)[0] <= 0.5 + 1e-6


# --- Reports and recalls ---


def test_exact_estimate_scores_full_recall(cube, small_camera):
    gt = looking_down_z(500.0)
    diameter = 100.0 * math.sqrt(3.0)
    report = evaluate_pose(cube, gt, gt, [Pose.identity()], small_camera, diameter, obj_id=3)
    assert report.obj_id == 3 and not report.symmetric
    assert set(report.vsd_errors) == {0.0}
    assert len(report.vsd_taus) == 10
    assert report.mssd == 0.0 and report.mspd == 0.0 and report.te == 0.0
    summary = recall_and_ar([report], diameter, small_camera.width)
    assert summary.ar == 1.0
    assert summary.ad_recall == 1.0
    assert summary.re_recall == 1.0 and summary.te_recall == 1.0


def test_far_estimate_scores_zero(cube, small_camera):
    gt = looking_down_z(500.0)
    est = Pose(np.eye(3), [1000.0, 0.0, 500.0])
    diameter = 100.0 * math.sqrt(3.0)
    report = evaluate_pose(cube, est, gt, [Pose.identity()], small_camera, diameter)
    assert set(report.vsd_errors) == {1.0}
    summary = recall_and_ar([report], diameter, small_camera.width)
    assert summary.ar == 0.0
    assert summary.ad_recall == 0.0 and summary.te_recall == 0.0
    # Rotation is exact, so the rotation recall still counts it.
    assert summary.re_recall == 1.0


def test_report_validation():
    with pytest.raises(ValueError):
        _report(1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        _report(0.5, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        _report(0.5, 0.0, 0.0, 0.0, 0.0, 181.0, 0.0)


def test_average_recall_is_exactly_rounded():
    assert average_recall(0.3, 0.6, 0.9) == 0.6


def test_summary_counts_hits_per_grid_cell(small_grid):
    a = _report(0.5, 15.0, 5.0, add=5.0, adi=5.0, re=5.0, te=5.0)
    b = _report(0.1, 5.0, 30.0, add=50.0, adi=2.0, re=20.0, te=2.0, symmetric=True)
    summary = summarize_reports([a, b], diameter=100.0, image_width=640, cfg=small_grid, targets=3)
    assert (summary.targets, summary.estimates) == (3, 2)
    assert summary.ar_vsd == 0.5
    assert summary.ar_mssd == 0.5
    assert summary.ar_mspd == pytest.approx(1.0 / 3.0)
    assert summary.ar == pytest.approx((0.5 + 0.5 + 1.0 / 3.0) / 3.0)
    # ADI counts for the symmetric object, ADD for the other.
    assert summary.ad_recall == pytest.approx(2.0 / 3.0)
    assert summary.re_recall == pytest.approx(1.0 / 3.0)
    assert summary.te_recall == pytest.approx(2.0 / 3.0)
    assert summary.mean_re == 12.5 and summary.mean_te == 3.5


def test_thresholds_are_strict(small_grid):
    report = _report(0.3, 10.0, 10.0, add=10.0, adi=10.0, re=10.0, te=10.0)
    summary = summarize_reports([report], diameter=100.0, image_width=640, cfg=small_grid)
    assert summary.vsd_hits == 1  # only 0.3 < 0.6
    assert summary.mssd_hits == 1
    assert summary.mspd_hits == 1
    assert summary.ad_hits == summary.re_hits == summary.te_hits == 0


def test_mssd_just_above_the_smallest_threshold_misses_one_cell():
    diameter = 100.0 * math.sqrt(3.0)
    cfg = EvalConfig()
    report = PoseErrorReport(
        obj_id=1, symmetric=False, vsd_errors=(0.0,) * 10,
        vsd_taus=tuple(f * diameter for f in cfg.vsd_tau_fractions),
        mssd=0.07 * diameter, mspd=0.0, add=0.0, adi=0.0, re=0.0, te=0.0,
    )
    summary = recall_and_ar([report] * 10, diameter, 640)
    assert summary.ar_mssd == 0.9
    assert summary.ar == pytest.approx((1.0 + 0.9 + 1.0) / 3.0)


def test_mspd_thresholds_scale_with_image_width(small_grid):
    report = _report(0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0)
    assert summarize_reports([report], 100.0, 640, small_grid).mspd_hits == 2
    # At 160 px the 10 and 20 px thresholds shrink to 2.5 and 5.
    assert summarize_reports([report], 100.0, 160, small_grid).mspd_hits == 1


def test_summary_argument_checks(small_grid):
    report = _report(0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        summarize_reports([report, report], 100.0, 640, small_grid, targets=1)
    with pytest.raises(ValueError):
        summarize_reports([report], 0.0, 640, small_grid)
    with pytest.raises(ValueError):
        summarize_reports([report], 100.0, 640)  # default grid wants ten VSD errors
    with pytest.raises(ValueError):
        recall_and_ar([], 100.0, 640)


def test_merging_disjoint_groups_matches_one_summary(small_grid):
    a = _report(0.5, 15.0, 5.0, add=5.0, adi=5.0, re=5.0, te=5.0)
    b = _report(0.1, 5.0, 30.0, add=50.0, adi=2.0, re=20.0, te=2.0, symmetric=True)
    whole = summarize_reports([a, b], 100.0, 640, small_grid, targets=3)
    parts = [
        summarize_reports([a], 100.0, 640, small_grid),
        summarize_reports([b], 100.0, 640, small_grid, targets=2),
    ]
    assert merge_summaries(parts).as_row() == whole.as_row()


def test_merge_edge_cases(small_grid):
    assert merge_summaries([]).ar is None
    report = _report(0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    other_grid = small_grid.model_copy(update={"mssd_thresholds": [0.1]})
    with pytest.raises(ValueError):
        merge_summaries([
            summarize_reports([report], 100.0, 640, small_grid),
            summarize_reports([report], 100.0, 640, other_grid),
        ])


def test_target_without_estimate_is_a_miss(small_grid):
    summary = summarize_reports([], 100.0, 640, small_grid, targets=2)
    assert summary.ar == 0.0
    assert summary.mean_re is None


# --- Output ---


def test_summary_csv(tmp_path, small_grid):
    summary = summarize_reports([_report(0.1, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)], 100.0, 640, small_grid)
    path = tmp_path / "summary.csv"
    write_summary_csv(str(path), {"obj_000001": summary, "empty": MetricSummary()})
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["group"] + SUMMARY_COLUMNS + ["targets", "estimates"]
    assert rows[1][0] == "obj_000001"
    assert float(rows[1][1]) == 1.0
    assert rows[1][-2:] == ["1", "1"]
    assert rows[2][1] == ""


def test_summary_rows_serialize_missing_recalls_as_null(small_grid):
    summary = summarize_reports([_report(0.1, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)], 100.0, 640, small_grid)
    data = json.loads(dumps_json({"all": summary.as_row(), "empty": MetricSummary().as_row()}))
    assert list(data) == ["all", "empty"]
    assert data["all"]["AR"] == 1.0
    assert data["empty"]["AR"] is None
