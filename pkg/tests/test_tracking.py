import numpy as np
import pytest

from pixelhand.errors import EvaluationError
from pixelhand.geometry import box_from_center
from pixelhand.tracking import (
    CONFIRMED,
    DEAD,
    TENTATIVE,
    KalmanBoxFilter,
    KalmanTrack,
    SortTracker,
    Track,
    associate,
    iou_tlwh_matrix,
    iou_track,
    load_mot,
    mot_metrics,
    run_sort,
    save_mot,
    sort_step,
    to_tlwh,
)

from oracles import aligned_iou, iou_tracker_reference, kalman_reference


def make_track(tid, spans):
    """spans: {frame: (x, y, w, h)}"""
    t = Track(tid, state=CONFIRMED)
    for frame, tlwh in spans.items():
        t.add(frame, tlwh)
    return t


def constant_track(tid, frames, tlwh):
    return make_track(tid, {f: tlwh for f in frames})


def test_to_tlwh_rotated_hull():
    box = box_from_center(10, 10, 8, 6, 0.0)
    np.testing.assert_allclose(to_tlwh(box), [6, 7, 8, 6])
    rot = box_from_center(0, 0, 10, 10, np.pi / 4)
    x, y, w, h = to_tlwh(rot)
    side = 10 * np.sqrt(2)
    assert w == pytest.approx(side, abs=1e-9)
    assert h == pytest.approx(side, abs=1e-9)
    assert x == pytest.approx(-side / 2, abs=1e-9)
    np.testing.assert_allclose(to_tlwh((1, 2, 3, 4, 0.9)), [1, 2, 3, 4])


def test_iou_tlwh_matrix_matches_interval_oracle():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(0, 50, 6), rng.uniform(0, 50, 6),
                         rng.uniform(5, 20, 6), rng.uniform(5, 20, 6)])
    b = np.column_stack([rng.uniform(0, 50, 4), rng.uniform(0, 50, 4),
                         rng.uniform(5, 20, 4), rng.uniform(5, 20, 4)])
    got = iou_tlwh_matrix(a, b)
    assert got.shape == (6, 4)
    for i in range(6):
        for j in range(4):
            assert got[i, j] == pytest.approx(aligned_iou(a[i], b[j]), abs=1e-12)
    assert iou_tlwh_matrix(np.zeros((0, 4)), b).shape == (0, 4)


def test_kalman_init_state():
    f = KalmanBoxFilter((10.0, 20.0, 8.0, 4.0))
    np.testing.assert_allclose(f.x[:4], [14.0, 22.0, 32.0, 2.0])
    assert np.all(f.x[4:] == 0.0)
    np.testing.assert_allclose(f.tlwh, [10, 20, 8, 4], atol=1e-12)


def test_kalman_matches_textbook_form():
    f = KalmanBoxFilter((10.0, 20.0, 8.0, 4.0))
    x0 = f.x.copy()
    P0 = f.P.copy()
    z = np.array([16.0, 23.0, 33.0, 2.1])
    xp, Pp, xn, Pn = kalman_reference(
        x0, P0, KalmanBoxFilter.F, KalmanBoxFilter.Q, KalmanBoxFilter.H, KalmanBoxFilter.R, z
    )
    f.predict()
    np.testing.assert_allclose(f.x, xp, atol=1e-9)
    np.testing.assert_allclose(f.P, Pp, atol=1e-9)
    f.update(_z_to_tlwh_for_test(z))
    np.testing.assert_allclose(f.x, xn, atol=1e-8)
    np.testing.assert_allclose(f.P, Pn, atol=1e-6)


def _z_to_tlwh_for_test(z):
    cx, cy, area, aspect = z
    w = np.sqrt(area * aspect)
    h = area / w
    return (cx - w / 2, cy - h / 2, w, h)


def test_kalman_area_velocity_guard():
    f = KalmanBoxFilter((0.0, 0.0, 4.0, 1.0))
    f.x[6] = -100.0  # would drive the area negative on the next step
    f.predict()
    assert f.x[6] == 0.0
    assert f.x[2] > 0.0


def test_kalman_converges_on_static_box():
    f = KalmanBoxFilter((5.0, 5.0, 10.0, 10.0))
    for _ in range(10):
        f.predict()
        f.update((5.0, 5.0, 10.0, 10.0))
    np.testing.assert_allclose(f.tlwh, [5, 5, 10, 10], atol=1e-3)


def test_associate_gating_and_optimality():
    iou = np.array([[0.9, 0.1], [0.2, 0.8]])
    matches, ut, ud = associate(iou, 0.3)
    assert sorted(matches) == [(0, 0), (1, 1)]
    assert ut == [] and ud == []
    # below the gate nothing matches even if assigned
    matches, ut, ud = associate(np.array([[0.2]]), 0.3)
    assert matches == [] and ut == [0] and ud == [0]
    matches, ut, ud = associate(np.zeros((0, 3)), 0.3)
    assert matches == [] and ut == [] and ud == [0, 1, 2]


def test_associate_prefers_total_overlap():
    # greedy would give (0,0) then strand track 1; the assignment solver
    # takes the globally better pairing
    iou = np.array([[0.6, 0.5], [0.55, 0.0]])
    matches, _, _ = associate(iou, 0.3)
    assert sorted(matches) == [(0, 1), (1, 0)]


def test_sort_step_lifecycle():
    tracks = []
    det = (10.0, 10.0, 5.0, 5.0, 0.9)
    sort_step(tracks, [det], min_hits=3)
    assert len(tracks) == 1
    assert tracks[0].state == TENTATIVE and tracks[0].id == 1
    sort_step(tracks, [det], min_hits=3)
    sort_step(tracks, [det], min_hits=3)
    assert tracks[0].state == CONFIRMED
    assert tracks[0].hits == 3
    # two missed frames exceed max_age=1
    sort_step(tracks, [], max_age=1)
    assert tracks[0].state == CONFIRMED
    sort_step(tracks, [], max_age=1)
    assert tracks[0].state == DEAD
    # a new detection opens a fresh identity, never reusing id 1
    sort_step(tracks, [det])
    assert [t.id for t in tracks] == [1, 2]


def test_sort_reports_fresh_tracks_only_in_warmup():
    tracker = SortTracker(min_hits=3)
    det = [(10.0, 10.0, 5.0, 5.0, 1.0)]
    # during the first min_hits frames even brand-new tracks are reported
    assert len(tracker.step(det)) == 1
    assert len(tracker.step(det)) == 1
    assert len(tracker.step(det)) == 1
    # a new track born after warmup stays hidden until confirmed
    late = [(100.0, 100.0, 5.0, 5.0, 1.0)]
    out = tracker.step(det + late)
    assert [tid for tid, _, _ in out] == [1]
    tracker.step(det + late)
    out = tracker.step(det + late)
    assert sorted(tid for tid, _, _ in out) == [1, 2]


def test_sort_does_not_report_coasting_tracks():
    tracker = SortTracker(min_hits=1)
    det = [(10.0, 10.0, 5.0, 5.0, 1.0)]
    tracker.step(det)
    out = tracker.step([])
    assert out == []


def test_run_sort_single_constant_target():
    frames = [[(10.0, 10.0, 5.0, 5.0, 1.0)] for _ in range(8)]
    tracks = run_sort(frames)
    assert len(tracks) == 1
    t = tracks[0]
    assert t.id == 1
    assert t.frames() == list(range(1, 9))
    assert t.state == CONFIRMED
    for frame in t.frames():
        np.testing.assert_allclose(t.boxes[frame], (10, 10, 5, 5), atol=0.5)


def test_run_sort_two_crossing_free_targets():
    frames = []
    for t in range(10):
        frames.append([
            (10.0 + 3 * t, 10.0, 6.0, 6.0, 1.0),
            (80.0 - 3 * t, 60.0, 6.0, 6.0, 1.0),
        ])
    tracks = run_sort(frames)
    assert len(tracks) == 2
    assert all(len(t.boxes) == 10 for t in tracks)


@pytest.mark.parametrize("seed", range(5))
def test_iou_track_matches_reference_transcription(seed):
    rng = np.random.default_rng(seed)
    n_frames = 12
    frame_dets = []
    walkers = rng.uniform(10, 80, size=(3, 2))
    for t in range(n_frames):
        dets = []
        for i in range(3):
            if rng.uniform() < 0.85:  # occasional dropouts
                x, y = walkers[i] + rng.uniform(-1.5, 1.5, 2)
                dets.append((x, y, 12.0, 12.0, 1.0))
        walkers += rng.uniform(-2, 2, size=(3, 2))
        frame_dets.append(dets)
    got = iou_track(frame_dets, sigma_iou=0.4, min_track_len=2)
    want = iou_tracker_reference(frame_dets, 0.4, 2)
    assert len(got) == len(want)
    got_sorted = sorted(got, key=lambda t: (t.frames()[0], t.boxes[t.frames()[0]]))
    want_sorted = sorted(want, key=lambda tr: (tr["first_frame"] + 1, tuple(tr["boxes"][0])))
    for g, w in zip(got_sorted, want_sorted):
        assert g.frames()[0] == w["first_frame"] + 1
        assert len(g.boxes) == len(w["boxes"])
        for frame, box in zip(g.frames(), w["boxes"]):
            np.testing.assert_allclose(g.boxes[frame], box, atol=1e-12)


def test_iou_track_drops_short_tracks():
    frames = [[(0.0, 0.0, 5.0, 5.0, 1.0)], [], [], [(50.0, 50.0, 5.0, 5.0, 1.0)]]
    assert iou_track(frames, min_track_len=2) == []
    kept = iou_track(frames, min_track_len=1)
    assert len(kept) == 2


def test_iou_track_splits_on_overlap_gap():
    frames = [
        [(0.0, 0.0, 10.0, 10.0, 1.0)],
        [(0.5, 0.0, 10.0, 10.0, 1.0)],
        [(40.0, 40.0, 10.0, 10.0, 1.0)],  # jump: overlap drops below sigma
        [(40.5, 40.0, 10.0, 10.0, 1.0)],
    ]
    tracks = iou_track(frames, sigma_iou=0.5, min_track_len=2)
    assert len(tracks) == 2
    assert tracks[0].frames() == [1, 2]
    assert tracks[1].frames() == [3, 4]


def test_mot_metrics_perfect():
    gt = [constant_track(1, range(1, 11), (10, 10, 8, 8)),
          constant_track(2, range(1, 11), (50, 50, 8, 8))]
    hyp = [constant_track(7, range(1, 11), (10, 10, 8, 8)),
           constant_track(9, range(1, 11), (50, 50, 8, 8))]
    m = mot_metrics(hyp, gt)
    assert m.mota == 1.0
    assert m.motp == pytest.approx(1.0)
    assert m.ids == 0 and m.frag == 0
    assert m.fp == 0 and m.fn == 0
    assert m.mt == 1.0 and m.ml == 0.0
    assert m.gt_count == 20


def test_mot_metrics_id_swap_counts_two_switches():
    gt = [constant_track(1, range(1, 11), (10, 10, 8, 8)),
          constant_track(2, range(1, 11), (50, 50, 8, 8))]
    hyp = [
        make_track(1, {**{f: (10, 10, 8, 8) for f in range(1, 6)},
                       **{f: (50, 50, 8, 8) for f in range(6, 11)}}),
        make_track(2, {**{f: (50, 50, 8, 8) for f in range(1, 6)},
                       **{f: (10, 10, 8, 8) for f in range(6, 11)}}),
    ]
    m = mot_metrics(hyp, gt)
    assert m.ids == 2
    assert m.fp == 0 and m.fn == 0
    assert m.mota == pytest.approx(1.0 - 2 / 20)


def test_mot_metrics_gap_counts_fragmentation():
    gt = [constant_track(1, range(1, 11), (10, 10, 8, 8))]
    hyp = [make_track(3, {**{f: (10, 10, 8, 8) for f in range(1, 4)},
                          **{f: (10, 10, 8, 8) for f in range(7, 11)}})]
    m = mot_metrics(hyp, gt)
    assert m.frag == 1
    assert m.ids == 0
    assert m.fn == 3
    assert m.mota == pytest.approx(1.0 - 3 / 10)


def test_mot_metrics_sticky_matching_prevents_flicker():
    # a second hypothesis with slightly better overlap must not steal the
    # match from an existing correspondence that still clears the threshold
    gt = [constant_track(1, range(1, 6), (10.0, 10.0, 10.0, 10.0))]
    hyp = [
        constant_track(1, range(1, 6), (11.0, 10.0, 10.0, 10.0)),
        constant_track(2, range(2, 6), (10.0, 10.0, 10.0, 10.0)),
    ]
    m = mot_metrics(hyp, gt)
    assert m.ids == 0
    assert m.fp == 4  # the interloper is surplus every frame it appears


def test_mot_metrics_mostly_tracked_thresholds():
    gt = [constant_track(1, range(1, 11), (10, 10, 8, 8)),
          constant_track(2, range(1, 11), (50, 50, 8, 8)),
          constant_track(3, range(1, 11), (90, 90, 8, 8))]
    hyp = [
        constant_track(1, range(1, 10), (10, 10, 8, 8)),   # 9/10 covered
        constant_track(2, range(1, 6), (50, 50, 8, 8)),    # 5/10
        constant_track(3, range(1, 2), (90, 90, 8, 8)),    # 1/10
    ]
    m = mot_metrics(hyp, gt)
    assert m.mt == pytest.approx(1 / 3)
    assert m.ml == pytest.approx(1 / 3)


def test_mot_metrics_requires_ground_truth():
    with pytest.raises(EvaluationError):
        mot_metrics([constant_track(1, [1], (0, 0, 5, 5))], [])


@pytest.mark.parametrize("seed", range(10))
def test_mota_identity_on_random_perturbations(seed):
    rng = np.random.default_rng(seed)
    gt = []
    for i in range(3):
        x, y = rng.uniform(10, 80, 2)
        gt.append(constant_track(i + 1, range(1, 16), (x, y, 10, 10)))
    hyp = []
    for i, g in enumerate(gt):
        spans = {}
        for f, tlwh in g.boxes.items():
            if rng.uniform() < 0.8:
                jitter = rng.uniform(-2, 2, size=2)
                spans[f] = (tlwh[0] + jitter[0], tlwh[1] + jitter[1], 10, 10)
        if spans:
            hyp.append(make_track(i + 1, spans))
    if rng.uniform() < 0.5:
        hyp.append(constant_track(99, range(1, 6), tuple(rng.uniform(100, 150, 2)) + (5, 5)))
    m = mot_metrics(hyp, gt)
    assert m.mota <= 1.0
    assert (m.mota == 1.0) == (m.fp == 0 and m.fn == 0 and m.ids == 0)
    assert m.gt_count == 45


def test_save_load_mot_round_trip(tmp_path):
    tracks = [
        make_track(2, {1: (1.5, 2.25, 3.0, 4.125), 2: (1.625, 2.25, 3.0, 4.125)}),
        make_track(1, {1: (10.0, 20.0, 30.0, 40.0)}),
    ]
    path = tmp_path / "tracks.csv"
    save_mot(tracks, path)
    lines = path.read_text().splitlines()
    # sorted by frame then id
    assert lines[0].startswith("1,1,") and lines[1].startswith("1,2,")
    back = load_mot(path)
    assert [t.id for t in back] == [1, 2]
    assert back[1].boxes == tracks[0].boxes
    save_mot(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_text() == path.read_text()


def test_load_mot_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,1,0,0,5,5\n")
    from pixelhand.errors import ParseError

    with pytest.raises(ParseError):
        load_mot(path)


def test_kalman_track_streak_bookkeeping():
    t = KalmanTrack(1, (0, 0, 5, 5))
    assert t.hit_streak == 1
    t.predict()
    t.update((0, 0, 5, 5))
    assert t.hit_streak == 2 and t.time_since_update == 0
    t.predict()
    assert t.time_since_update == 1
    t.predict()
    assert t.hit_streak == 0
