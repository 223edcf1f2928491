"""Tracking-by-detection over per-frame detections.

Two linkers: an online SORT-style tracker (constant-velocity Kalman filter per
track, Hungarian association on IoU cost) and the offline IoU tracker that
greedily extends tracks with the best-overlapping detection. Rotated detections
are reduced to their axis-aligned hulls because tracking annotations are
axis-aligned. Metrics follow CLEAR-MOT with per-frame Hungarian matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EvaluationError, ParseError
from .geometry import RotatedBox

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
DEAD = "dead"


@dataclass(eq=False)
class Track:
    """One identity: axis-aligned (x, y, w, h) per frame plus a lifecycle state."""

    id: int
    boxes: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    state: str = TENTATIVE

    def frames(self):
        return sorted(self.boxes)

    def add(self, frame: int, tlwh, score: float = 1.0):
        self.boxes[frame] = tuple(float(v) for v in tlwh)
        self.scores[frame] = float(score)


def to_tlwh(box) -> np.ndarray:
    """Axis-aligned hull (x, y, w, h) of a rotated box; passes plain 4-vectors through."""
    if isinstance(box, RotatedBox):
        xs = box.vertices[:, 0]
        ys = box.vertices[:, 1]
        return np.array([xs.min(), ys.min(), xs.max() - xs.min(), ys.max() - ys.min()])
    arr = np.asarray(box, dtype=np.float64)
    return arr[:4]


def iou_tlwh_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N,4) / (M,4) stacks of x,y,w,h boxes."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ax1, ay1 = a[:, 0], a[:, 1]
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.maximum(
        0.0, np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    )
    ih = np.maximum(
        0.0, np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    )
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _tlwh_to_z(tlwh) -> np.ndarray:
    x, y, w, h = tlwh
    return np.array([x + w / 2.0, y + h / 2.0, w * h, w / h])


def _z_to_tlwh(z) -> np.ndarray:
    cx, cy, area, aspect = z[:4]
    w = float(np.sqrt(max(area * aspect, 0.0)))
    h = area / w if w > 0 else 0.0
    return np.array([cx - w / 2.0, cy - h / 2.0, w, h])


class KalmanBoxFilter:
    """Constant-velocity filter on (cx, cy, area, aspect); aspect has no velocity."""

    F = np.eye(7)
    F[0, 4] = F[1, 5] = F[2, 6] = 1.0
    H = np.eye(4, 7)
    Q = np.diag([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4])
    R = np.diag([1.0, 1.0, 10.0, 10.0])

    def __init__(self, tlwh):
        self.x = np.zeros(7)
        self.x[:4] = _tlwh_to_z(tlwh)
        self.P = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4])

    def predict(self) -> np.ndarray:
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0  # never shrink the area below zero
        self.x = self.F @ self.x
        self.P = self.F @ self.P @ self.F.T + self.Q
        self.P = (self.P + self.P.T) / 2.0
        return self.tlwh

    def update(self, tlwh) -> None:
        z = _tlwh_to_z(tlwh)
        y = z - self.H @ self.x
        S = self.H @ self.P @ self.H.T + self.R
        K = self.P @ self.H.T @ np.linalg.inv(S)
        self.x = self.x + K @ y
        ikh = np.eye(7) - K @ self.H
        # Joseph form keeps the covariance symmetric positive semi-definite.
        self.P = ikh @ self.P @ ikh.T + K @ self.R @ K.T
        self.P = (self.P + self.P.T) / 2.0

    @property
    def tlwh(self) -> np.ndarray:
        return _z_to_tlwh(self.x)


class KalmanTrack:
    """SORT bookkeeping around one KalmanBoxFilter."""

    def __init__(self, track_id: int, tlwh, score: float = 1.0):
        self.id = track_id
        self.filter = KalmanBoxFilter(tlwh)
        self.score = float(score)
        self.state = TENTATIVE
        self.hits = 1
        self.hit_streak = 1
        self.time_since_update = 0

    def predict(self) -> np.ndarray:
        if self.time_since_update > 0:
            self.hit_streak = 0
        self.time_since_update += 1
        return self.filter.predict()

    def update(self, tlwh, score: float = 1.0) -> None:
        self.time_since_update = 0
        self.hits += 1
        self.hit_streak += 1
        self.score = float(score)
        self.filter.update(tlwh)

    @property
    def tlwh(self) -> np.ndarray:
        return self.filter.tlwh


def associate(iou: np.ndarray, gate: float):
    """Hungarian assignment on an IoU matrix, discarding pairs below the gate.

    Returns (matches [(row, col)...], unmatched_rows, unmatched_cols).
    """
    n, m = iou.shape
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    rows, cols = linear_sum_assignment(-iou)
    matches = [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] >= gate]
    matched_r = {r for r, _ in matches}
    matched_c = {c for _, c in matches}
    return (
        matches,
        [r for r in range(n) if r not in matched_r],
        [c for c in range(m) if c not in matched_c],
    )


def sort_step(
    tracks: list,
    detections,
    iou_gate: float = 0.3,
    max_age: int = 1,
    min_hits: int = 3,
):
    """Advance the SORT track list by one frame of detections.

    Detections may be RotatedBox instances or (x, y, w, h[, score]) rows. Live
    tracks are predicted forward, associated by Hungarian assignment on IoU,
    updated on match; unmatched detections open tentative tracks and tracks
    unseen for more than max_age frames are marked dead (and kept in the list
    so identifiers are never reused).
    """
    det_rows = []
    for d in detections:
        tlwh = to_tlwh(d)
        score = d.score if isinstance(d, RotatedBox) else (float(d[4]) if len(d) > 4 else 1.0)
        det_rows.append((tlwh, score))
    live = [t for t in tracks if t.state != DEAD]
    predicted = np.array([t.predict() for t in live]).reshape(len(live), 4)
    dets = np.array([r[0] for r in det_rows]).reshape(len(det_rows), 4)
    iou = iou_tlwh_matrix(predicted, dets)
    matches, unmatched_tracks, unmatched_dets = associate(iou, iou_gate)
    for ti, di in matches:
        live[ti].update(det_rows[di][0], det_rows[di][1])
    for ti in unmatched_tracks:
        if live[ti].time_since_update > max_age:
            live[ti].state = DEAD
    next_id = max((t.id for t in tracks), default=0) + 1
    for di in unmatched_dets:
        tracks.append(KalmanTrack(next_id, det_rows[di][0], det_rows[di][1]))
        next_id += 1
    for t in tracks:
        if t.state == TENTATIVE and t.hit_streak >= min_hits:
            t.state = CONFIRMED
    return tracks


class SortTracker:
    """Frame-by-frame SORT driver that also decides what gets reported."""

    def __init__(self, iou_gate: float = 0.3, max_age: int = 1, min_hits: int = 3):
        self.iou_gate = iou_gate
        self.max_age = max_age
        self.min_hits = min_hits
        self.tracks: list[KalmanTrack] = []
        self.frame_count = 0

    def step(self, detections):
        """Returns [(id, tlwh, score)] for tracks reported at this frame."""
        self.frame_count += 1
        sort_step(self.tracks, detections, self.iou_gate, self.max_age, self.min_hits)
        out = []
        for t in self.tracks:
            if t.state == DEAD or t.time_since_update >= 1:
                continue
            if t.hit_streak >= self.min_hits or self.frame_count <= self.min_hits:
                out.append((t.id, t.tlwh.copy(), t.score))
        return out


def run_sort(
    frames,
    iou_gate: float = 0.3,
    max_age: int = 1,
    min_hits: int = 3,
    start_frame: int = 1,
) -> list:
    """Run the online tracker over a whole sequence and collect Track objects."""
    tracker = SortTracker(iou_gate, max_age, min_hits)
    collected: dict[int, Track] = {}
    for offset, dets in enumerate(frames):
        frame = start_frame + offset
        for tid, tlwh, score in tracker.step(dets):
            track = collected.setdefault(tid, Track(tid))
            track.add(frame, tlwh, score)
    by_id = {t.id: t for t in tracker.tracks}
    for tid, track in collected.items():
        track.state = by_id[tid].state
    return [collected[tid] for tid in sorted(collected)]


def iou_track(
    all_frames,
    sigma_iou: float = 0.5,
    min_track_len: int = 2,
    start_frame: int = 1,
) -> list:
    """Offline IoU linker: extend each active track with its best-overlapping detection.

    A track whose best remaining detection falls below sigma_iou terminates;
    leftover detections start new tracks; tracks shorter than min_track_len are
    dropped at the end.
    """
    active: list[dict] = []
    finished: list[dict] = []
    next_id = 1
    for offset, dets in enumerate(all_frames):
        frame = start_frame + offset
        pool = [(to_tlwh(d), d.score if isinstance(d, RotatedBox) else (float(d[4]) if len(d) > 4 else 1.0)) for d in dets]
        still_active = []
        for tr in active:
            best_i = -1
            best_iou = 0.0
            for i, (tlwh, _s) in enumerate(pool):
                v = float(iou_tlwh_matrix(tr["last"][None], tlwh[None])[0, 0])
                if v > best_iou:
                    best_iou = v
                    best_i = i
            if best_i >= 0 and best_iou >= sigma_iou:
                tlwh, score = pool.pop(best_i)
                tr["boxes"][frame] = tlwh
                tr["scores"][frame] = score
                tr["last"] = tlwh
                still_active.append(tr)
            else:
                finished.append(tr)
        active = still_active
        for tlwh, score in pool:
            active.append({"id": next_id, "boxes": {frame: tlwh}, "scores": {frame: score}, "last": tlwh})
            next_id += 1
    finished.extend(active)
    out = []
    for tr in finished:
        if len(tr["boxes"]) < min_track_len:
            continue
        track = Track(tr["id"], state=CONFIRMED)
        for frame in sorted(tr["boxes"]):
            track.add(frame, tr["boxes"][frame], tr["scores"][frame])
        out.append(track)
    out.sort(key=lambda t: t.id)
    return out


@dataclass(frozen=True)
class MotReport:
    """CLEAR-MOT summary. mt/ml are fractions of ground-truth trajectories."""

    mota: float
    motp: float
    recall: float
    precision: float
    mt: float
    ml: float
    ids: int
    frag: int
    gt_count: int
    fp: int
    fn: int
    matches: int
    per_frame: tuple = ()


def _tracks_by_frame(tracks) -> dict:
    frames: dict[int, list] = {}
    for t in tracks:
        for frame, tlwh in t.boxes.items():
            frames.setdefault(frame, []).append((t.id, np.asarray(tlwh, dtype=np.float64)))
    return frames


_GATED_COST = 1e6


def mot_metrics(tracks, ground_truth_tracks, iou_match: float = 0.5) -> MotReport:
    """CLEAR-MOT accounting with per-frame Hungarian matching at IoU >= iou_match.

    Correspondences persist across frames: a pair that still overlaps keeps its
    match before the assignment runs on the remainder. An identity switch is
    counted when a ground-truth trajectory's matched tracker id differs from
    its last known one; a fragmentation when its matched status resumes after a
    gap.
    """
    gt_frames = _tracks_by_frame(ground_truth_tracks)
    gt_total = sum(len(v) for v in gt_frames.values())
    if gt_total == 0:
        raise EvaluationError("empty ground truth; CLEAR-MOT metrics are undefined")
    hyp_frames = _tracks_by_frame(tracks)
    all_frames = sorted(set(gt_frames) | set(hyp_frames))

    fp = fn = ids = 0
    match_overlap_sum = 0.0
    n_matches = 0
    corr: dict[int, int] = {}  # gt id -> hyp id carried from the previous frame
    last_match: dict[int, int] = {}  # gt id -> last hyp id ever matched
    gt_presence: dict[int, int] = {}
    gt_matched_frames: dict[int, int] = {}
    was_matched_before: dict[int, bool] = {}
    in_gap: dict[int, bool] = {}
    frag = 0
    per_frame = []

    for frame in all_frames:
        gts = gt_frames.get(frame, [])
        hyps = hyp_frames.get(frame, [])
        gt_ids = [g[0] for g in gts]
        hyp_ids = [h[0] for h in hyps]
        gt_boxes = np.array([g[1] for g in gts]).reshape(len(gts), 4)
        hyp_boxes = np.array([h[1] for h in hyps]).reshape(len(hyps), 4)
        iou = iou_tlwh_matrix(gt_boxes, hyp_boxes)

        matched_g = {}
        used_h = set()
        # Keep surviving correspondences from the previous frame first.
        for gi, gid in enumerate(gt_ids):
            hid = corr.get(gid)
            if hid is None or hid not in hyp_ids:
                continue
            hi = hyp_ids.index(hid)
            if iou[gi, hi] >= iou_match:
                matched_g[gi] = hi
                used_h.add(hi)
        # Hungarian on what remains, with gated pairs priced out.
        free_g = [gi for gi in range(len(gts)) if gi not in matched_g]
        free_h = [hi for hi in range(len(hyps)) if hi not in used_h]
        if free_g and free_h:
            cost = np.full((len(free_g), len(free_h)), _GATED_COST)
            for a, gi in enumerate(free_g):
                for b, hi in enumerate(free_h):
                    if iou[gi, hi] >= iou_match:
                        cost[a, b] = 1.0 - iou[gi, hi]
            rows, cols = linear_sum_assignment(cost)
            for a, b in zip(rows, cols):
                gi, hi = free_g[a], free_h[b]
                if iou[gi, hi] >= iou_match:
                    matched_g[gi] = hi
                    used_h.add(hi)

        corr = {}
        for gi, hi in matched_g.items():
            gid, hid = gt_ids[gi], hyp_ids[hi]
            prev = last_match.get(gid)
            if prev is not None and prev != hid:
                ids += 1
            last_match[gid] = hid
            corr[gid] = hid
            match_overlap_sum += float(iou[gi, hi])
            n_matches += 1

        frame_fn = len(gts) - len(matched_g)
        frame_fp = len(hyps) - len(matched_g)
        fn += frame_fn
        fp += frame_fp
        per_frame.append((frame, len(matched_g), frame_fp, frame_fn))

        for gi, gid in enumerate(gt_ids):
            gt_presence[gid] = gt_presence.get(gid, 0) + 1
            hit = gi in matched_g
            if hit:
                gt_matched_frames[gid] = gt_matched_frames.get(gid, 0) + 1
                if was_matched_before.get(gid) and in_gap.get(gid):
                    frag += 1
                was_matched_before[gid] = True
                in_gap[gid] = False
            elif was_matched_before.get(gid):
                in_gap[gid] = True

    coverages = [gt_matched_frames.get(gid, 0) / cnt for gid, cnt in gt_presence.items()]
    n_traj = len(coverages)
    mt = sum(1 for c in coverages if c > 0.8) / n_traj
    ml = sum(1 for c in coverages if c < 0.2) / n_traj
    mota = 1.0 - (fn + fp + ids) / gt_total
    motp = match_overlap_sum / n_matches if n_matches else 0.0
    recall = n_matches / gt_total
    precision = n_matches / (n_matches + fp) if (n_matches + fp) else 0.0
    return MotReport(
        mota, motp, recall, precision, mt, ml, ids, frag,
        gt_total, fp, fn, n_matches, tuple(per_frame),
    )


def save_mot(tracks, path) -> None:
    """Comma-separated lines: frame,id,bb_left,bb_top,bb_width,bb_height,score."""
    rows = []
    for t in tracks:
        for frame in t.frames():
            x, y, w, h = t.boxes[frame]
            rows.append((frame, t.id, x, y, w, h, t.scores.get(frame, 1.0)))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as f:
        for frame, tid, x, y, w, h, score in rows:
            f.write(
                f"{frame},{tid},{repr(float(x))},{repr(float(y))},"
                f"{repr(float(w))},{repr(float(h))},{repr(float(score))}\n"
            )


def load_mot(path) -> list:
    tracks: dict[int, Track] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ParseError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                frame = int(parts[0])
                tid = int(parts[1])
                x, y, w, h, score = (float(p) for p in parts[2:])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            track = tracks.setdefault(tid, Track(tid, state=CONFIRMED))
            track.add(frame, (x, y, w, h), score)
    return [tracks[tid] for tid in sorted(tracks)]
