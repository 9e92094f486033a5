"""Polygon primitives: orientation, canonical form, rasterized IoU, corruption operators.

Coordinate convention is image-style: x grows right, y grows down. A positive
signed shoelace area therefore means the ring is clockwise as drawn on screen.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Point = tuple[int, int]


class GeometryError(ValueError):
    """Geometry failure carrying a stable machine-readable code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class Polygon:
    """Open vertex ring in integer pixel coordinates (closing vertex not stored)."""

    vertices: tuple[Point, ...]

    def __post_init__(self):
        n = len(self.vertices)
        if n < 3:
            raise GeometryError("too-few-vertices", f"polygon needs >= 3 vertices, got {n}")
        for i, (x, y) in enumerate(self.vertices):
            if x < 0 or y < 0:
                raise GeometryError("negative-coordinate", f"vertex {i} = ({x}, {y})")
            if self.vertices[i] == self.vertices[(i + 1) % n]:
                raise GeometryError("duplicate-vertex", f"vertices {i} and {(i + 1) % n} coincide")

    @classmethod
    def from_points(cls, pts) -> "Polygon":
        return cls(tuple((int(x), int(y)) for x, y in pts))

    @classmethod
    def from_json(cls, obj: dict) -> "Polygon":
        return cls.from_points(obj["vertices"])

    def to_json(self) -> dict:
        return {"vertices": [[x, y] for x, y in self.vertices]}

    def __len__(self) -> int:
        return len(self.vertices)

    def reversed(self) -> "Polygon":
        return Polygon(tuple(reversed(self.vertices)))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; max edges are exclusive pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError("empty-bbox", f"degenerate bbox {self}")

    def to_json(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_json(cls, obj) -> "BBox":
        return cls(*(int(v) for v in obj))

    def contains(self, other: "BBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)


def polygon_bbox(p: Polygon) -> BBox:
    xs = [v[0] for v in p.vertices]
    ys = [v[1] for v in p.vertices]
    return BBox(min(xs), min(ys), max(xs) + 1, max(ys) + 1)


def shoelace_signed_area(p: Polygon) -> float:
    """Signed area in pixels^2; positive iff screen-clockwise under y-down."""
    v = np.asarray(p.vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x, -1), np.roll(y, -1)
    return float(0.5 * np.sum(x * y2 - x2 * y))


def canonicalize(p: Polygon) -> Polygon:
    """Clockwise-on-screen ring starting at the vertex nearest the image origin.

    Ties on distance break by smaller y, then smaller x. Collinear rings
    (zero signed area) are rejected.
    """
    area = shoelace_signed_area(p)
    if area == 0:
        raise GeometryError("zero-area", "collinear ring cannot be canonicalized")
    verts = list(p.vertices)
    if area < 0:
        verts.reverse()
    start = min(range(len(verts)),
                key=lambda i: (verts[i][0] ** 2 + verts[i][1] ** 2, verts[i][1], verts[i][0]))
    return Polygon(tuple(verts[start:] + verts[:start]))


def rotate_start(p: Polygon, offset: int) -> Polygon:
    if not 0 <= offset < len(p):
        raise GeometryError("offset-out-of-range", f"offset {offset} for {len(p)} vertices")
    v = p.vertices
    return Polygon(v[offset:] + v[:offset])


def rasterize_mask(p: Polygon, width: int, height: int, supersample: int = 1,
                   origin: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Even-odd fill over a supersampled grid of cell centers.

    Returns a boolean array of shape (height*supersample, width*supersample).
    Sample points sit at half-cell offsets, so integer vertices never land
    exactly on a sample.
    """
    if supersample < 1:
        raise GeometryError("bad-supersample", "supersample must be >= 1")
    s = supersample
    ox, oy = origin
    px = ox + (np.arange(width * s) + 0.5) / s
    py = (oy + (np.arange(height * s) + 0.5) / s)[:, None]
    inside = np.zeros((height * s, width * s), dtype=bool)
    verts = p.vertices
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 <= py) != (y2 <= py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def polygon_iou(a: Polygon, b: Polygon, supersample: int = 4) -> float:
    """Intersection-over-union of the even-odd filled regions on a supersampled grid."""
    xs = [v[0] for v in a.vertices] + [v[0] for v in b.vertices]
    ys = [v[1] for v in a.vertices] + [v[1] for v in b.vertices]
    x0, y0 = min(xs), min(ys)
    w = max(xs) - x0 + 1
    h = max(ys) - y0 + 1
    ma = rasterize_mask(a, w, h, supersample, origin=(x0, y0))
    mb = rasterize_mask(b, w, h, supersample, origin=(x0, y0))
    union = int(np.count_nonzero(ma | mb))
    if union == 0:
        raise GeometryError("empty-union", "both polygons rasterize to zero area")
    inter = int(np.count_nonzero(ma & mb))
    return inter / union


def corrupt_delete(p: Polygon, k: int, rng: np.random.Generator) -> Polygon:
    """Remove k distinct randomly chosen vertices, preserving order."""
    n = len(p)
    if k < 1 or n - k < 3:
        raise GeometryError("k-too-large", f"cannot delete {k} of {n} vertices")
    for _ in range(100):
        drop = set(rng.choice(n, size=k, replace=False).tolist())
        kept = [p.vertices[i] for i in range(n) if i not in drop]
        try:
            return Polygon(tuple(kept))
        except GeometryError:
            continue
    raise GeometryError("corrupt-failed", "could not delete without degenerating the ring")


def corrupt_insert(p: Polygon, k: int, delta: int, rng: np.random.Generator,
                   width: int = 128, height: int = 128) -> Polygon:
    """Insert k vertices at displaced edge midpoints, clamped to image bounds."""
    if k < 1 or delta < 0:
        raise GeometryError("bad-corruption-params", f"k={k}, delta={delta}")
    verts = list(p.vertices)
    for _ in range(k):
        for _attempt in range(100):
            i = int(rng.integers(len(verts)))
            ax, ay = verts[i]
            bx, by = verts[(i + 1) % len(verts)]
            nx = (ax + bx) // 2 + int(rng.integers(-delta, delta + 1))
            ny = (ay + by) // 2 + int(rng.integers(-delta, delta + 1))
            nx = min(max(nx, 0), width - 1)
            ny = min(max(ny, 0), height - 1)
            if (nx, ny) != (ax, ay) and (nx, ny) != (bx, by):
                verts.insert(i + 1, (nx, ny))
                break
        else:
            raise GeometryError("corrupt-failed", "could not place a distinct inserted vertex")
    return Polygon(tuple(verts))


def enlarge_bbox(b: BBox, factor: float, image_w: int, image_h: int) -> BBox:
    """Scale width/height by factor about the center, then clamp to the image."""
    if factor < 1.0:
        raise GeometryError("bad-factor", f"factor must be >= 1.0, got {factor}")
    cx = (b.x_min + b.x_max) / 2.0
    cy = (b.y_min + b.y_max) / 2.0
    hw = (b.x_max - b.x_min) * factor / 2.0
    hh = (b.y_max - b.y_min) * factor / 2.0
    x0 = max(0, int(np.floor(cx - hw)))
    y0 = max(0, int(np.floor(cy - hh)))
    x1 = min(image_w, int(np.ceil(cx + hw)))
    y1 = min(image_h, int(np.ceil(cy + hh)))
    return BBox(x0, y0, x1, y1)


def _orient(a: Point, b: Point, c: Point) -> int:
    v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return (v > 0) - (v < 0)


def _on_segment(a: Point, b: Point, c: Point) -> bool:
    return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))


def segments_intersect(p1: Point, p2: Point, p3: Point, p4: Point) -> bool:
    """Closed-segment intersection test, including collinear overlap."""
    d1 = _orient(p3, p4, p1)
    d2 = _orient(p3, p4, p2)
    d3 = _orient(p1, p2, p3)
    d4 = _orient(p1, p2, p4)
    if d1 != d2 and d3 != d4:
        return True
    if d1 == 0 and _on_segment(p3, p4, p1):
        return True
    if d2 == 0 and _on_segment(p3, p4, p2):
        return True
    if d3 == 0 and _on_segment(p1, p2, p3):
        return True
    if d4 == 0 and _on_segment(p1, p2, p4):
        return True
    return False


def self_intersects(p: Polygon) -> bool:
    """True when any two non-adjacent edges of the ring touch or cross."""
    verts = p.vertices
    n = len(verts)
    edges = [(verts[i], verts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if segments_intersect(edges[i][0], edges[i][1], edges[j][0], edges[j][1]):
                return True
    return False


def is_simple(p: Polygon) -> bool:
    return not self_intersects(p)
