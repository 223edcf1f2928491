"""Detection-quality metrics: PR curves, average precision, average recall.

Matching is the usual greedy protocol: detections in descending score order
each claim the not-yet-claimed annotation with the highest overlap at or above
the threshold. Annotations filtered out by a size level stay in the scene as
ignore regions; detections landing on them count neither way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EvaluationError
from .geometry import iou_one_vs_many

FPPI_GRID = np.logspace(-2.0, 0.0, 9)

# Minimum axis-aligned pixel height per difficulty level; "all" keeps everything.
LEVEL_MIN_HEIGHT = {"1": 70.0, "2": 25.0}


def _axis_height(box) -> float:
    ys = box.vertices[:, 1]
    return float(ys.max() - ys.min())


def level_filter(truths, level) -> list:
    """Subset of annotations tall enough for the given difficulty level."""
    level = str(level)
    if level == "all":
        return list(truths)
    if level not in LEVEL_MIN_HEIGHT:
        raise ConfigError(f"unknown difficulty level {level!r}; expected 'all', '1' or '2'")
    cutoff = LEVEL_MIN_HEIGHT[level]
    return [b for b in truths if _axis_height(b) >= cutoff]


def split_by_level(truths, level):
    """Indices of annotations kept at the level and of those demoted to ignore regions."""
    level = str(level)
    if level == "all":
        return list(range(len(truths))), []
    if level not in LEVEL_MIN_HEIGHT:
        raise ConfigError(f"unknown difficulty level {level!r}; expected 'all', '1' or '2'")
    cutoff = LEVEL_MIN_HEIGHT[level]
    kept = [i for i, b in enumerate(truths) if _axis_height(b) >= cutoff]
    ignored = [i for i in range(len(truths)) if i not in kept]
    return kept, ignored


def match_detections(detections, truths, iou_thresh: float = 0.5, ignored=()) -> list:
    """Label each detection "tp", "fp" or "ignored", in input order.

    Detections are processed in descending score order (ties broken by input
    position). Each claims the unclaimed non-ignored annotation of highest
    overlap at or above iou_thresh; failing that, a detection overlapping an
    ignore-region annotation at or above the threshold is excused entirely.
    """
    ignored = set(int(i) for i in ignored)
    labels = [""] * len(detections)
    if not detections:
        return labels
    truth_verts = (
        np.stack([t.vertices for t in truths]) if truths else np.zeros((0, 4, 2))
    )
    scores = np.array([d.score for d in detections])
    order = np.lexsort((np.arange(len(detections)), -scores))
    claimed = set()
    for di in order:
        ious = iou_one_vs_many(detections[di].vertices, truth_verts) if len(truths) else np.zeros(0)
        best_ti = -1
        best_iou = 0.0
        for ti in range(len(truths)):
            if ti in ignored or ti in claimed:
                continue
            if ious[ti] >= iou_thresh and ious[ti] > best_iou:
                best_iou = float(ious[ti])
                best_ti = ti
        if best_ti >= 0:
            claimed.add(best_ti)
            labels[di] = "tp"
            continue
        hit_ignore = any(ious[ti] >= iou_thresh for ti in ignored)
        labels[di] = "ignored" if hit_ignore else "fp"
    return labels


def _sorted_flags(labeled):
    """(scores desc, tp flags, fp flags) for non-ignored detections."""
    rows = [(float(s), lab) for s, lab in labeled if lab != "ignored"]
    scores = np.array([r[0] for r in rows])
    order = np.lexsort((np.arange(len(rows)), -scores))
    scores = scores[order]
    tp = np.array([rows[i][1] == "tp" for i in order], dtype=np.float64)
    return scores, tp, 1.0 - tp if len(rows) else np.zeros(0)


def average_precision(labeled, n_truths: int) -> float:
    """Area under the precision envelope over recall, all points interpolated.

    labeled is an iterable of (score, label) pairs as produced by
    match_detections; ignored entries contribute nothing.
    """
    if n_truths <= 0:
        raise EvaluationError("average precision is undefined without annotations")
    scores, tp, fp = _sorted_flags(labeled)
    if scores.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_truths
    precision = tp_cum / (tp_cum + fp_cum)
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_recall(labeled, n_truths: int, n_images: int):
    """Mean recall over a log-spaced grid of false-positives-per-image budgets.

    For each budget the longest score-ordered prefix whose false-positive count
    stays within budget * n_images is taken; its recall enters the mean.
    Returns (ar, [(budget, recall)] * 9).
    """
    if n_truths <= 0:
        raise EvaluationError("average recall is undefined without annotations")
    if n_images <= 0:
        raise EvaluationError("average recall is undefined without images")
    scores, tp, fp = _sorted_flags(labeled)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    points = []
    for budget in FPPI_GRID:
        allowed = budget * n_images
        if scores.size == 0:
            points.append((float(budget), 0.0))
            continue
        ok = np.nonzero(fp_cum <= allowed)[0]
        recall = float(tp_cum[ok[-1]] / n_truths) if ok.size else 0.0
        points.append((float(budget), recall))
    ar = float(np.mean([r for _, r in points])) if points else 0.0
    return ar, points


def pr_points(labeled, n_truths: int) -> list:
    """(cutoff, recall, precision) at every distinct score, descending."""
    scores, tp, fp = _sorted_flags(labeled)
    if scores.size == 0 or n_truths <= 0:
        return []
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    out = []
    for i in range(scores.size):
        if i + 1 < scores.size and scores[i + 1] == scores[i]:
            continue  # report the point after all ties at this cutoff
        out.append(
            (
                float(scores[i]),
                float(tp_cum[i] / n_truths),
                float(tp_cum[i] / (tp_cum[i] + fp_cum[i])),
            )
        )
    return out


@dataclass(frozen=True)
class EvalReport:
    """Detection metrics over a set of images at one difficulty level."""

    level: str
    n_images: int
    n_truths: int
    n_detections: int
    ap: float
    ar: float
    pr: tuple
    fppi: tuple


def evaluate_detections(
    detections_per_image,
    truths_per_image,
    iou_thresh: float = 0.5,
    level="all",
) -> EvalReport:
    """Match every image, then aggregate AP, AR and the PR curve."""
    if len(detections_per_image) != len(truths_per_image):
        raise ConfigError(
            f"{len(detections_per_image)} detection lists vs "
            f"{len(truths_per_image)} annotation lists"
        )
    labeled = []
    n_truths = 0
    n_dets = 0
    for dets, truths in zip(detections_per_image, truths_per_image):
        kept, ignored = split_by_level(truths, level)
        n_truths += len(kept)
        n_dets += len(dets)
        labels = match_detections(dets, truths, iou_thresh, ignored)
        labeled.extend((d.score, lab) for d, lab in zip(dets, labels))
    ap = average_precision(labeled, n_truths)
    ar, fppi = average_recall(labeled, n_truths, len(truths_per_image))
    return EvalReport(
        level=str(level),
        n_images=len(truths_per_image),
        n_truths=n_truths,
        n_detections=n_dets,
        ap=ap,
        ar=ar,
        pr=tuple(pr_points(labeled, n_truths)),
        fppi=tuple(fppi),
    )
