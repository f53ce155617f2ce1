import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laserodom.geometry import MotionDelta, Pose2D
from laserodom.evaluation import (
    DRIFT_LENGTHS,
    AlignmentError,
    DriftReport,
    compare_methods,
    drift_score,
    frame_errors,
    load_reference_drift,
)
from laserodom.odometry import Trajectory, integrate


def straight(n, step=1.0):
    return Trajectory([Pose2D(0.0, k * step, 0.0) for k in range(n)])


def wiggly(seed, n=400):
    rng = np.random.default_rng(seed)
    ds = [MotionDelta(float(d), float(t)) for d, t in zip(rng.uniform(1.5, 2.5, n), rng.normal(0, 0.03, n))]
    return integrate(ds)


def transformed(traj, x0, y0, th0):
    """Apply one global rigid motion (heading convention) to every pose."""
    c, s = math.cos(th0), math.sin(th0)
    arr = traj.as_array()
    xy = arr[:, :2] @ np.array([[c, s], [-s, c]]).T + [x0, y0]
    return Trajectory.from_array(np.column_stack([xy, arr[:, 2] + th0]), traj.frames, traj.provenance)


def test_identical_trajectories_have_zero_drift():
    gt = wiggly(0)
    rep = drift_score(gt, gt)
    assert rep.mean == 0.0
    assert all(v == 0.0 for v in rep.per_length.values())


def test_one_percent_scale_closed_form():
    gt = straight(901)  # 900 m at 1 m per frame
    est = straight(901, 1.01)
    rep = drift_score(gt, est)
    for L in DRIFT_LENGTHS:
        assert abs(rep.per_length[L] - 0.0100) < 1e-12
        assert rep.per_length_count[L] == 901 - L
    assert abs(rep.mean - 0.0100) < 1e-12


def test_short_trajectory_not_evaluable():
    rep = drift_score(straight(50), straight(50))
    assert rep.mean is None and not rep.evaluable
    assert all(v is None for v in rep.per_length.values())
    part = drift_score(straight(250), straight(250, 1.02))
    assert part.per_length[100] is not None and part.per_length[300] is None
    assert math.isclose(part.mean, 0.02, rel_tol=1e-9)


def test_mean_is_over_all_subsequences():
    gt = straight(301)
    est = Trajectory.from_array(np.column_stack([np.zeros(301), np.r_[np.arange(151), 150 + 1.1 * np.arange(1, 151)],
                                                 np.zeros(301)]))
    rep = drift_score(gt, est)
    pooled = sum(rep.per_length[L] * rep.per_length_count[L] for L in (100, 200, 300)) / sum(
        rep.per_length_count[L] for L in (100, 200, 300))
    assert math.isclose(rep.mean, pooled, rel_tol=1e-12)


@given(st.integers(0, 100), st.floats(-100, 100), st.floats(-100, 100), st.floats(-3.1, 3.1))
def test_joint_rigid_transform_invariance(seed, x0, y0, th0):
    gt = wiggly(seed, 120)
    est = wiggly(seed + 1000, 120)
    a = drift_score(gt, est)
    b = drift_score(transformed(gt, x0, y0, th0), transformed(est, x0, y0, th0))
    assert math.isclose(a.mean, b.mean, rel_tol=1e-9, abs_tol=1e-12)


@given(st.integers(0, 100), st.floats(-100, 100), st.floats(-100, 100), st.floats(-3.1, 3.1))
def test_global_offset_of_estimate_is_free(seed, x0, y0, th0):
    gt = wiggly(seed, 120)
    rep = drift_score(gt, transformed(gt, x0, y0, th0))
    assert rep.mean < 1e-9


def test_misaligned_trajectories():
    with pytest.raises(AlignmentError) as err:
        drift_score(straight(10), straight(12))
    assert err.value.index == 10
    gt = straight(5)
    est = Trajectory(gt.poses, [0, 1, 2, 4, 5])
    with pytest.raises(AlignmentError) as err:
        drift_score(gt, est)
    assert err.value.index == 3


def test_report_serialisation():
    rep = drift_score(straight(301), straight(301, 1.01), "05", "RCNN")
    rep.s_per_frame = 0.015
    d = json.loads(rep.to_json())
    assert d["sequence_id"] == "05" and d["method"] == "RCNN"
    assert d["lengths"]["800"]["drift"] is None and d["lengths"]["100"]["subsequences"] == 201
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert rows[-1]["length_m"] == "mean" and math.isclose(float(rows[-1]["drift"]), 0.01, rel_tol=1e-9)


# -- per-frame errors ----------------------------------------------------------------


def test_frame_errors_zero():
    ds = [MotionDelta(0.5, 0.01)] * 4
    st_ = frame_errors(ds, ds)
    assert st_.max_rot_deg == 0 and st_.max_trans_m == 0 and st_.mean_rot_deg == 0


def test_frame_errors_worst_case():
    truth = [MotionDelta(1.0, 0.0)] * 10
    pred = list(truth)
    pred[3] = MotionDelta(1.2, math.radians(0.4))
    st_ = frame_errors(pred, truth)
    assert math.isclose(st_.max_trans_m, 0.2, rel_tol=1e-12)
    assert math.isclose(st_.max_rot_deg, 0.4, rel_tol=1e-12)
    assert st_.max_rot_deg >= st_.mean_rot_deg >= 0


def test_frame_errors_constant_offset():
    truth = [MotionDelta(1.0, 0.01 * k) for k in range(8)]
    pred = [MotionDelta(d.delta_d + 0.02, d.delta_theta + math.radians(0.05)) for d in truth]
    st_ = frame_errors(pred, truth)
    assert math.isclose(st_.mean_trans_m, 0.02, rel_tol=1e-9)
    assert math.isclose(st_.mean_rot_deg, 0.05, rel_tol=1e-9)


@given(st.lists(st.tuples(st.floats(0, 3), st.floats(-3, 3), st.floats(0, 3), st.floats(-3, 3)), max_size=30))
def test_frame_errors_symmetric(rows):
    a = [MotionDelta(r[0], r[1]) for r in rows]
    b = [MotionDelta(r[2], r[3]) for r in rows]
    x, y = frame_errors(a, b), frame_errors(b, a)
    assert np.array_equal(x.rot_err_deg, y.rot_err_deg) and np.array_equal(x.trans_err_m, y.trans_err_m)


def test_frame_errors_wrap_and_mismatch(tmp_path):
    st_ = frame_errors([MotionDelta(0, math.pi - 0.01)], [MotionDelta(0, -math.pi + 0.01)])
    assert math.isclose(st_.rot_err_deg[0], math.degrees(0.02), rel_tol=1e-6)
    with pytest.raises(AlignmentError):
        frame_errors([MotionDelta(0, 0)], [])
    path = st_.write_csv(tmp_path / "f.csv")
    assert path.read_text().splitlines()[0] == "frame,rot_err_deg,trans_err_m"


# -- comparison tables ---------------------------------------------------------------


def _report(method, seq, mean, t=None):
    return DriftReport(seq, method, {100: mean}, {100: 1}, {100: 0.0}, mean, 0.0, t)


def test_single_row_table():
    table = compare_methods([_report("RCNN", "s1", 0.05, 0.0123)])
    assert len(table.rows) == 1 and table.sequences == ["s1"]
    rows = list(csv.DictReader(io.StringIO(table.to_csv())))
    assert rows[0]["s_per_frame"] == "0.012"


def test_rows_sorted_by_mean():
    table = compare_methods([_report("RCNN", "s1", 0.05), _report("ICP", "s1", 0.001),
                             _report("RCNN", "s2", 0.07), _report("ICP", "s2", 0.003)])
    assert [r.method for r in table.rows] == ["ICP", "RCNN"]
    assert math.isclose(table.rows[1].mean, 0.06)
    assert "ICP" in table.to_text().splitlines()[2]


def test_duplicate_label_rejected():
    with pytest.raises(ValueError):
        compare_methods([_report("RCNN", "s1", 0.05), _report("RCNN", "s1", 0.04)])
    with pytest.raises(ValueError):
        compare_methods([])


def test_transcribed_reference_rows():
    ref = load_reference_drift()
    r = ref["methods"]["RCNN-Regression"]
    assert r["mean"] == 0.0255 and r["s_per_frame"] == 0.015
    assert r["drift"] == {"05": 0.0293, "07": 0.0218}
    assert ref["methods"]["CNN-Classification"]["mean"] == 0.1760
    table = compare_methods([_report("RCNN", "s1", 0.05, 0.02)], include_reference=True)
    marked = [row for row in table.rows if row.source == "transcribed"]
    assert len(marked) == 6
    text = table.to_text()
    assert "0.0255" in text and "0.015" in text and "transcribed" in text
