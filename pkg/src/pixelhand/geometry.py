"""Rotated rectangles and the per-pixel geometry codec.

A box is stored as four vertices p0..p3 in image pixel coordinates (x right,
y down). In the derotated frame the rectangle is axis-aligned with p0 top-left,
p1 top-right, p2 bottom-right and p3 bottom-left; the frame is anchored at p3.
Angles are measured counter-clockwise positive. Each pixel inside a box is
described by its perpendicular distances (d_t, d_r, d_b, d_l) to the four sides
plus the box angle, which is exactly the information the per-pixel maps carry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateGeometryError, ParseError
from .tensor import Tensor

_MIN_SIDE = 1e-6


@dataclass(eq=False)
class RotatedBox:
    """Rectangle given by vertices (4,2) in p0..p3 order, with a detection score."""

    vertices: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        if v.shape != (4, 2):
            raise ConfigError(f"vertices must have shape (4,2), got {v.shape}")
        sides = np.roll(v, -1, axis=0) - v
        lengths = np.hypot(sides[:, 0], sides[:, 1])
        if np.any(lengths < _MIN_SIDE):
            raise DegenerateGeometryError(f"side below {_MIN_SIDE} px: {lengths.min()}")
        if abs(lengths[0] - lengths[2]) > 1e-6 or abs(lengths[1] - lengths[3]) > 1e-6:
            raise ConfigError("opposite sides differ; not a rectangle")
        for i in range(4):
            a = sides[i] / lengths[i]
            b = sides[(i + 1) % 4] / lengths[(i + 1) % 4]
            if abs(float(np.dot(a, b))) > 1e-6:
                raise ConfigError("adjacent sides not perpendicular; not a rectangle")
        if not (0.0 <= self.score <= 1.0):
            raise ConfigError(f"score {self.score} outside [0,1]")
        v.setflags(write=False)
        self.vertices = v

    @property
    def width(self) -> float:
        return float(np.hypot(*(self.vertices[1] - self.vertices[0])))

    @property
    def height(self) -> float:
        return float(np.hypot(*(self.vertices[2] - self.vertices[1])))

    @property
    def theta(self) -> float:
        """Angle of the bottom edge p3->p2, counter-clockwise positive, y down."""
        dx, dy = self.vertices[2] - self.vertices[3]
        return -math.atan2(dy, dx)

    @property
    def center(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class PixelGeometry:
    """Per-pixel regression target: side distances (t, r, b, l) and box angle."""

    d_t: float
    d_r: float
    d_b: float
    d_l: float
    theta: float

    def __post_init__(self):
        for name in ("d_t", "d_r", "d_b", "d_l"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.d_t + self.d_b <= 0 or self.d_l + self.d_r <= 0:
            raise DegenerateGeometryError("side distances sum to zero")
        if not (-math.pi / 2 < self.theta < math.pi / 2):
            raise ConfigError(f"theta {self.theta} outside (-pi/2, pi/2)")

    @property
    def distances(self) -> tuple:
        return (self.d_t, self.d_r, self.d_b, self.d_l)


@dataclass(eq=False)
class GeometryMaps:
    """Per-pixel prediction targets/outputs: score (1ch), rotation (1ch), distance (4ch: t,r,b,l)."""

    score: Tensor
    rotation: Tensor
    distance: Tensor

    def __post_init__(self):
        if self.score.channels != 1 or self.rotation.channels != 1 or self.distance.channels != 4:
            raise ConfigError(
                f"map channels must be (1,1,4), got "
                f"({self.score.channels},{self.rotation.channels},{self.distance.channels})"
            )
        hw = (self.score.height, self.score.width)
        if (self.rotation.height, self.rotation.width) != hw or (
            self.distance.height,
            self.distance.width,
        ) != hw:
            raise ConfigError("score/rotation/distance spatial sizes differ")
        s = self.score.data
        if s.min() < 0.0 or s.max() > 1.0:
            raise ConfigError("score map outside [0,1]")
        r = self.rotation.data
        if abs(r).max() >= math.pi / 2:
            raise ConfigError("rotation map outside (-pi/2, pi/2)")
        positive = s[0] > 0
        if positive.any() and self.distance.data[:, positive].min() < 0:
            raise ConfigError("negative distance at a positive pixel")

    @property
    def height(self) -> int:
        return self.score.height

    @property
    def width(self) -> int:
        return self.score.width


def restore_vertices(xs, ys, dists, thetas) -> np.ndarray:
    """Vectorized box restoration.

    xs, ys: pixel coordinates (N,); dists: (N,4) in (t,r,b,l) order; thetas: (N,).
    Returns vertices (N,4,2). In the derotated frame anchored at p3 the pixel
    sits at (d_l, -d_b) and the rectangle spans [0,w] x [-h,0]; the actual
    vertices are those corner offsets rotated back by -theta and translated so
    the pixel lands where it was observed.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    dists = np.asarray(dists, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    d_t, d_r, d_b, d_l = dists[:, 0], dists[:, 1], dists[:, 2], dists[:, 3]
    w = d_l + d_r
    h = d_t + d_b
    c = np.cos(thetas)
    s = np.sin(thetas)

    def rot_back(qx, qy):
        # apply M(-theta) = [[c, s], [-s, c]]
        return c * qx + s * qy, -s * qx + c * qy

    px, py = rot_back(d_l, -d_b)
    x3 = xs - px
    y3 = ys - py
    corners_q = [(np.zeros_like(w), -h), (w, -h), (w, np.zeros_like(h)), (np.zeros_like(w), np.zeros_like(h))]
    verts = np.empty((xs.shape[0], 4, 2))
    for i, (qx, qy) in enumerate(corners_q):
        vx, vy = rot_back(qx, qy)
        verts[:, i, 0] = vx + x3
        verts[:, i, 1] = vy + y3
    return verts


def restore_box(pixel, geom: PixelGeometry, score: float = 1.0) -> RotatedBox:
    """Rebuild the rectangle containing `pixel` from its per-pixel geometry."""
    w = geom.d_l + geom.d_r
    h = geom.d_t + geom.d_b
    if w < _MIN_SIDE or h < _MIN_SIDE:
        raise DegenerateGeometryError(f"restored box would be {w} x {h}")
    verts = restore_vertices(
        np.array([float(pixel[0])]),
        np.array([float(pixel[1])]),
        np.array([[geom.d_t, geom.d_r, geom.d_b, geom.d_l]]),
        np.array([geom.theta]),
    )
    return RotatedBox(verts[0], score)


def box_from_center(cx, cy, width, height, theta, score: float = 1.0) -> RotatedBox:
    """Construct a rotated rectangle from center, size and angle."""
    if width < _MIN_SIDE or height < _MIN_SIDE:
        raise DegenerateGeometryError(f"box size {width} x {height}")
    c, s = math.cos(theta), math.sin(theta)
    half = [(-width / 2, -height / 2), (width / 2, -height / 2), (width / 2, height / 2), (-width / 2, height / 2)]
    verts = np.array(
        [(cx + c * qx + s * qy, cy - s * qx + c * qy) for qx, qy in half]
    )
    return RotatedBox(verts, score)


def encode_ground_truth(boxes, height: int, width: int, shrink: float = 0.1) -> GeometryMaps:
    """Rasterize boxes into score/rotation/distance maps.

    Pixels land in the score foreground when they fall inside the box shrunk by
    `shrink` per side; their distance channels always measure to the original
    (unshrunk) sides. Where boxes overlap the smallest-area box owns the pixel.
    """
    if not (0.0 <= shrink < 0.5):
        raise ConfigError(f"shrink {shrink} outside [0, 0.5)")
    score = np.zeros((height, width))
    rotation = np.zeros((height, width))
    distance = np.zeros((4, height, width))
    # Painter's order: big boxes first so the smallest box ends up owning contested pixels.
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].area)
    for i in order:
        box = boxes[i]
        theta = box.theta
        c, s = math.cos(theta), math.sin(theta)
        x3, y3 = box.vertices[3]
        w = box.width
        h = box.height
        xmin = max(int(math.floor(box.vertices[:, 0].min())), 0)
        xmax = min(int(math.ceil(box.vertices[:, 0].max())), width - 1)
        ymin = max(int(math.floor(box.vertices[:, 1].min())), 0)
        ymax = min(int(math.ceil(box.vertices[:, 1].max())), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        ys_g, xs_g = np.mgrid[ymin : ymax + 1, xmin : xmax + 1]
        dx = xs_g - x3
        dy = ys_g - y3
        # derotate offsets: apply M(theta) = [[c, -s], [s, c]]
        qx = c * dx - s * dy
        qy = s * dx + c * dy
        inside = (
            (qx >= shrink * w)
            & (qx <= (1.0 - shrink) * w)
            & (-qy >= shrink * h)
            & (-qy <= (1.0 - shrink) * h)
        )
        if not inside.any():
            continue
        sel_y = ys_g[inside]
        sel_x = xs_g[inside]
        score[sel_y, sel_x] = 1.0
        rotation[sel_y, sel_x] = theta
        distance[0, sel_y, sel_x] = np.maximum(h + qy[inside], 0.0)  # top
        distance[1, sel_y, sel_x] = np.maximum(w - qx[inside], 0.0)  # right
        distance[2, sel_y, sel_x] = np.maximum(-qy[inside], 0.0)  # bottom
        distance[3, sel_y, sel_x] = np.maximum(qx[inside], 0.0)  # left
    return GeometryMaps(Tensor(score[None]), Tensor(rotation[None]), Tensor(distance))


def _ccw(poly: np.ndarray) -> np.ndarray:
    """Reorder polygon vertices counter-clockwise (positive shoelace sum)."""
    x, y = poly[:, 0], poly[:, 1]
    twice_area = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return poly if twice_area >= 0 else poly[::-1]


def _clip_batch(pts, cnt, a, b):
    """One Sutherland-Hodgman pass: clip N polygons by the half-plane left of edge a->b.

    pts: (N, M, 2); cnt: (N,) vertex counts. Returns compacted (pts, cnt).
    """
    n, m, _ = pts.shape
    ex, ey = b[0] - a[0], b[1] - a[1]
    cross = ex * (pts[:, :, 1] - a[1]) - ey * (pts[:, :, 0] - a[0])
    idx = np.arange(m)[None, :]
    valid = idx < cnt[:, None]
    nxt = np.where(valid, (idx + 1) % np.maximum(cnt, 1)[:, None], 0)
    cross_n = np.take_along_axis(cross, nxt, axis=1)
    pts_n = np.take_along_axis(pts, nxt[:, :, None], axis=1)
    inside = cross >= 0
    inside_n = cross_n >= 0
    emit_vertex = inside & valid
    crossing = (inside != inside_n) & valid
    denom = cross - cross_n
    t = np.where(crossing, cross / np.where(denom == 0.0, 1.0, denom), 0.0)
    inter = pts + t[:, :, None] * (pts_n - pts)
    # Interleave: kept vertex at slot 2i, edge intersection at slot 2i+1, then compact.
    out = np.empty((n, 2 * m, 2))
    emit = np.zeros((n, 2 * m), dtype=bool)
    out[:, 0::2] = pts
    out[:, 1::2] = inter
    emit[:, 0::2] = emit_vertex
    emit[:, 1::2] = crossing
    order = np.argsort(~emit, axis=1, kind="stable")
    new_cnt = emit.sum(axis=1)
    out = np.take_along_axis(out, order[:, :, None], axis=1)
    keep = max(int(new_cnt.max(initial=0)), 1)
    return np.ascontiguousarray(out[:, :keep]), new_cnt


def _shoelace_batch(pts, cnt) -> np.ndarray:
    n, m, _ = pts.shape
    idx = np.arange(m)[None, :]
    valid = idx < cnt[:, None]
    nxt = np.where(valid, (idx + 1) % np.maximum(cnt, 1)[:, None], 0)
    x, y = pts[:, :, 0], pts[:, :, 1]
    xn = np.take_along_axis(x, nxt, axis=1)
    yn = np.take_along_axis(y, nxt, axis=1)
    terms = (x * yn - xn * y) * valid
    area = 0.5 * np.abs(terms.sum(axis=1))
    area[cnt < 3] = 0.0
    return area


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of one simple polygon (K,2)."""
    p = np.asarray(poly, dtype=np.float64)
    return float(_shoelace_batch(p[None], np.array([p.shape[0]]))[0])


def intersection_areas(subjects: np.ndarray, clip_poly: np.ndarray) -> np.ndarray:
    """Areas of subject-polygon intersections with one convex clip polygon.

    subjects: (N, K, 2) convex polygons; clip_poly: (K2, 2) convex.
    """
    clip = _ccw(np.asarray(clip_poly, dtype=np.float64))
    pts = np.ascontiguousarray(subjects, dtype=np.float64)
    cnt = np.full(pts.shape[0], pts.shape[1], dtype=np.intp)
    for i in range(clip.shape[0]):
        pts, cnt = _clip_batch(pts, cnt, clip[i], clip[(i + 1) % clip.shape[0]])
        if not cnt.any():
            break
    return _shoelace_batch(pts, cnt)


def iou_one_vs_many(vertices: np.ndarray, many: np.ndarray) -> np.ndarray:
    """IoU of one rectangle (4,2) against a stack (N,4,2)."""
    many = np.asarray(many, dtype=np.float64)
    inter = intersection_areas(many, vertices)
    area_one = polygon_area(vertices)
    areas = _shoelace_batch(many, np.full(many.shape[0], 4, dtype=np.intp))
    union = area_one + areas - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    """Intersection-over-union via convex polygon clipping and shoelace areas."""
    return float(iou_one_vs_many(a.vertices, b.vertices[None])[0])


def nms_indices(vertices: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression on raw arrays; returns kept indices in descending-score order."""
    n = scores.shape[0]
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), -scores))
    alive = np.ones(n, dtype=bool)
    kept: list[int] = []
    for pos in range(n):
        i = order[pos]
        if not alive[i]:
            continue
        kept.append(int(i))
        rest = order[pos + 1 :]
        rest = rest[alive[rest]]
        if rest.size == 0:
            break
        ious = iou_one_vs_many(vertices[i], vertices[rest])
        alive[rest[ious > iou_threshold]] = False
    return kept


def nms(boxes, iou_threshold: float):
    """Greedy descending-score NMS over RotatedBox lists; ties break by input index."""
    if not boxes:
        return []
    vertices = np.stack([b.vertices for b in boxes])
    scores = np.array([b.score for b in boxes])
    return [boxes[i] for i in nms_indices(vertices, scores, iou_threshold)]


def save_boxes(boxes, path) -> None:
    """One box per line: x0 y0 x1 y1 x2 y2 x3 y3 score."""
    with open(path, "w") as f:
        for b in boxes:
            coords = " ".join(repr(float(v)) for v in b.vertices.reshape(-1))
            f.write(f"{coords} {repr(float(b.score))}\n")


def load_boxes(path) -> list[RotatedBox]:
    boxes = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ParseError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            boxes.append(RotatedBox(np.array(values[:8]).reshape(4, 2), values[8]))
    return boxes


def load_axis_aligned(path) -> list[RotatedBox]:
    """Import axis-aligned annotations given as `x y w h` per line (theta = 0, score 1)."""
    boxes = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                x, y, w, h = (float(p) for p in parts)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            verts = np.array([(x, y), (x + w, y), (x + w, y + h), (x, y + h)])
            boxes.append(RotatedBox(verts, 1.0))
    return boxes
