"""Map decoding (maps -> boxes) and the synthetic scenes that stand in for real data."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParseError
from .geometry import (
    GeometryMaps,
    RotatedBox,
    box_from_center,
    encode_ground_truth,
    intersection_areas,
    iou_one_vs_many,
    nms_indices,
    restore_vertices,
    save_boxes,
)
from .tensor import Tensor, load_records, write_record

_MIN_SIDE = 1e-6


def threshold_pixels(maps: GeometryMaps, score_thresh: float):
    """Pixels with score strictly above the threshold, in raster order.

    Returns (xs, ys, scores, dists (N,4), thetas).
    """
    score = maps.score.data[0]
    ys, xs = np.nonzero(score > score_thresh)
    scores = score[ys, xs]
    dists = maps.distance.data[:, ys, xs].T
    thetas = maps.rotation.data[0, ys, xs]
    return xs.astype(np.float64), ys.astype(np.float64), scores, dists, thetas


def decode(
    maps: GeometryMaps,
    score_thresh: float = 0.8,
    nms_thresh: float = 0.2,
    max_candidates: int = 20000,
) -> list[RotatedBox]:
    """Restore a box from every sufficiently confident pixel, then suppress duplicates.

    The box score is the generating pixel's score. Candidates are capped at
    `max_candidates` (highest scores first) to bound NMS cost; pixels whose
    distances imply a vanishing box are skipped rather than raised, since an
    empty result is a valid decode.
    """
    xs, ys, scores, dists, thetas = threshold_pixels(maps, score_thresh)
    if xs.size == 0:
        return []
    widths = dists[:, 1] + dists[:, 3]
    heights = dists[:, 0] + dists[:, 2]
    ok = (widths >= _MIN_SIDE) & (heights >= _MIN_SIDE)
    xs, ys, scores, dists, thetas = xs[ok], ys[ok], scores[ok], dists[ok], thetas[ok]
    if xs.size == 0:
        return []
    if xs.size > max_candidates:
        order = np.lexsort((np.arange(xs.size), -scores))[:max_candidates]
        order.sort()
        xs, ys, scores, dists, thetas = xs[order], ys[order], scores[order], dists[order], thetas[order]
    verts = restore_vertices(xs, ys, dists, thetas)
    kept = nms_indices(verts, scores, nms_thresh)
    return [RotatedBox(verts[i], float(scores[i])) for i in kept]


def _inside_fraction(box: RotatedBox, height: int, width: int) -> float:
    frame = np.array([(0.0, 0.0), (float(width), 0.0), (float(width), float(height)), (0.0, float(height))])
    inter = float(intersection_areas(box.vertices[None], frame)[0])
    return inter / box.area


def _draw_box(rng, height, width, theta_range, size_range) -> RotatedBox:
    w = rng.uniform(*size_range)
    h = rng.uniform(*size_range)
    theta = rng.uniform(*theta_range)
    cx = rng.uniform(0.0, width)
    cy = rng.uniform(0.0, height)
    return box_from_center(cx, cy, w, h, theta)


def generate_scene(
    seed,
    image_h: int = 256,
    image_w: int = 256,
    n_boxes: int = 3,
    theta_range=(-math.pi / 3, math.pi / 3),
    size_range=(20.0, 60.0),
    shrink: float = 0.1,
    max_pair_iou: float = 0.3,
    min_inside: float = 0.6,
    max_rejections: int = 10_000,
):
    """Random rotated boxes plus their encoded maps, deterministic under seed.

    A candidate box is rejected when less than `min_inside` of its area lies in
    the frame or it overlaps an accepted box with IoU above `max_pair_iou`.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    boxes: list[RotatedBox] = []
    rejections = 0
    while len(boxes) < n_boxes:
        if rejections >= max_rejections:
            raise GenerationError(
                f"gave up after {rejections} rejected candidates ({len(boxes)}/{n_boxes} placed)"
            )
        box = _draw_box(rng, image_h, image_w, theta_range, size_range)
        if _inside_fraction(box, image_h, image_w) < min_inside:
            rejections += 1
            continue
        if boxes and iou_one_vs_many(box.vertices, np.stack([b.vertices for b in boxes])).max() > max_pair_iou:
            rejections += 1
            continue
        boxes.append(box)
    return boxes, encode_ground_truth(boxes, image_h, image_w, shrink)


def generate_sequence(
    seed,
    n_frames: int,
    image_h: int = 256,
    image_w: int = 256,
    n_boxes: int = 3,
    theta_range=(-math.pi / 3, math.pi / 3),
    size_range=(30.0, 60.0),
    max_pair_iou: float = 0.3,
    min_inside: float = 0.6,
    max_speed: float = 1.5,
    max_attempts: int = 200,
):
    """Boxes drifting with constant velocity over `n_frames`; identity is list position.

    Returns a list of per-frame box lists. The whole sequence is rejected and
    redrawn whenever any frame violates the placement constraints, so every
    frame satisfies the same separation guarantees as a single scene.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        try:
            base, _maps_unused = generate_scene(
                rng, image_h, image_w, n_boxes, theta_range, size_range,
                max_pair_iou=max_pair_iou, min_inside=min_inside,
                max_rejections=2000,
            )
        except GenerationError:
            continue
        vel = rng.uniform(-max_speed, max_speed, size=(n_boxes, 2))
        frames = []
        ok = True
        for t in range(n_frames):
            frame = []
            for i, b in enumerate(base):
                c = b.center + vel[i] * t
                moved = box_from_center(c[0], c[1], b.width, b.height, b.theta)
                if _inside_fraction(moved, image_h, image_w) < min_inside:
                    ok = False
                    break
                frame.append(moved)
            if not ok:
                break
            for i in range(len(frame)):
                others = [frame[j].vertices for j in range(len(frame)) if j != i]
                if others and iou_one_vs_many(frame[i].vertices, np.stack(others)).max() > max_pair_iou:
                    ok = False
                    break
            if not ok:
                break
            frames.append(frame)
        if ok:
            return frames
    raise GenerationError(f"no valid {n_frames}-frame sequence after {max_attempts} attempts")


def save_maps(maps: GeometryMaps, path) -> None:
    """Three binary records in fixed order: score, rotation, distance."""
    with open(path, "wb") as f:
        write_record(f, maps.score.data)
        write_record(f, maps.rotation.data)
        write_record(f, maps.distance.data)


def load_maps(path) -> GeometryMaps:
    records = load_records(path)
    if len(records) != 3:
        raise ParseError(f"{path}: expected 3 map records, found {len(records)}")
    for i, rec in enumerate(records):
        if rec.ndim != 3:
            raise ParseError(f"{path}: record {i} has rank {rec.ndim}, expected 3")
    return GeometryMaps(Tensor(records[0]), Tensor(records[1]), Tensor(records[2]))


def save_scene(stem, boxes, maps: GeometryMaps) -> None:
    """Write `<stem>.txt` (box list) and `<stem>.maps` (binary maps)."""
    stem = Path(stem)
    save_boxes(boxes, stem.with_suffix(".txt"))
    save_maps(maps, stem.with_suffix(".maps"))


def load_scene(stem):
    from .geometry import load_boxes

    stem = Path(stem)
    return load_boxes(stem.with_suffix(".txt")), load_maps(stem.with_suffix(".maps"))
