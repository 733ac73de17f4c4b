"""Pure geometry over image-patch frames.

All public operations work on patch-normalized coordinates where (0, 0) is
the bottom-left corner of the patch and (1, 1) the top-right. Inputs in
frame (projected metre) coordinates are normalized by ``clip_and_normalize``
before anything else touches them. Everything here is stateless and safe to
call from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Sequence

Point = tuple[float, float]

#: Default Douglas-Peucker tolerance in normalized units (~2.7 m at 0.6 m GSD).
DEFAULT_SIMPLIFY_EPSILON = 0.01

# Small slack for points that sit numerically on the frame boundary.
_EDGE_TOL = 1e-9


class EmptyAfterClip(Exception):
    """Geometry does not intersect the patch frame."""


class DegeneratePath(Exception):
    """Path has zero total length."""


@dataclass(frozen=True)
class PatchFrame:
    """Georeferenced extent of one image patch, in projected metres.

    The metre extent must agree with the pixel grid: ``max_x - min_x`` equals
    ``width_px * gsd_m`` (and likewise for y) within 1e-6 relative tolerance.
    """

    min_x: float
    min_y: float
    max_x: float
    max_y: float
    width_px: int
    height_px: int
    gsd_m: float
    capture_time: datetime

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0 or self.gsd_m <= 0:
            raise ValueError("pixel dimensions and gsd must be positive")
        for span, expected, axis in (
            (self.max_x - self.min_x, self.width_px * self.gsd_m, "x"),
            (self.max_y - self.min_y, self.height_px * self.gsd_m, "y"),
        ):
            if span <= 0:
                raise ValueError(f"frame has non-positive {axis} extent")
            if not math.isclose(span, expected, rel_tol=1e-6):
                raise ValueError(
                    f"{axis} extent {span} disagrees with pixel grid {expected}"
                )

    @property
    def width_m(self) -> float:
        return self.max_x - self.min_x

    @property
    def height_m(self) -> float:
        return self.max_y - self.min_y

    @property
    def ground_area_m2(self) -> float:
        # gsd_m ** 2 first: keeps 448 * 448 * 0.6**2 == 72253.44 bit-exact.
        return self.width_px * self.height_px * self.gsd_m ** 2

    @classmethod
    def from_pixels(
        cls, width_px: int, height_px: int, gsd_m: float, capture_time: datetime
    ) -> "PatchFrame":
        """Frame anchored at the origin, sized by the pixel grid."""
        return cls(
            min_x=0.0,
            min_y=0.0,
            max_x=width_px * gsd_m,
            max_y=height_px * gsd_m,
            width_px=width_px,
            height_px=height_px,
            gsd_m=gsd_m,
            capture_time=capture_time,
        )


@dataclass(frozen=True)
class RingSet:
    """Closed rings of an area element; holes run opposite to their outer ring."""

    rings: tuple[tuple[Point, ...], ...]

    def __post_init__(self) -> None:
        if not self.rings:
            raise ValueError("RingSet needs at least one ring")
        for ring in self.rings:
            if len(ring) < 4:
                raise ValueError("ring needs >= 4 points including closure")
            if ring[0] != ring[-1]:
                raise ValueError("ring must be closed (first == last)")
            if signed_area(ring) == 0.0:
                raise ValueError("ring has zero signed area")

    def all_points(self) -> Iterable[Point]:
        for ring in self.rings:
            yield from ring


@dataclass(frozen=True)
class Path:
    """Polyline geometry, possibly broken into several parts."""

    parts: tuple[tuple[Point, ...], ...]

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValueError("Path needs at least one part")
        for part in self.parts:
            if len(part) < 2:
                raise ValueError("path part needs >= 2 points")
            for a, b in zip(part, part[1:]):
                if a == b:
                    raise ValueError("consecutive path points must be distinct")

    def all_points(self) -> Iterable[Point]:
        for part in self.parts:
            yield from part


Geometry = RingSet | Path


@dataclass(frozen=True)
class AreaAttributes:
    """Interpreted description bundle for an area element."""

    coarse_location: str
    shape: str
    normalized_size: float
    simplified_geometry: str
    is_cropped: bool


@dataclass(frozen=True)
class NonAreaAttributes:
    """Interpreted description bundle for a linear element."""

    endpoint_locations: tuple[str, str]
    sinuosity: str
    normalized_length: float
    length_m: int
    orientation: str
    simplified_geometry: str
    is_cropped: bool


@dataclass(frozen=True)
class PathMetrics:
    length_m: int
    endpoint_locations: tuple[str, str]
    sinuosity: str
    orientation: str
    normalized_length: float


# ---------------------------------------------------------------------------
# Elementary measures


def signed_area(ring: Sequence[Point]) -> float:
    """Shoelace signed area of a closed ring (positive = counter-clockwise)."""
    total = 0.0
    for (x0, y0), (x1, y1) in zip(ring, ring[1:]):
        total += x0 * y1 - x1 * y0
    return total / 2.0


def perimeter(ring: Sequence[Point]) -> float:
    return sum(math.dist(a, b) for a, b in zip(ring, ring[1:]))


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    """Euclidean distance from ``p`` to the segment ``a``-``b``."""
    if a == b:
        return math.dist(p, a)
    ax, ay = a
    bx, by = b
    px, py = p
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = max(0.0, min(1.0, t))
    return math.dist(p, (ax + t * dx, ay + t * dy))


# ---------------------------------------------------------------------------
# Clipping and normalization


def _normalize_point(p: Point, frame: PatchFrame) -> Point:
    return (
        (p[0] - frame.min_x) / frame.width_m,
        (p[1] - frame.min_y) / frame.height_m,
    )


def _outside_unit(p: Point) -> bool:
    x, y = p
    return (
        x < -_EDGE_TOL or x > 1.0 + _EDGE_TOL or y < -_EDGE_TOL or y > 1.0 + _EDGE_TOL
    )


def _clamp01(v: float) -> float:
    return 0.0 if v < 0.0 else 1.0 if v > 1.0 else v + 0.0


def _clip_ring_half_plane(points: list[Point], axis: int, bound: float, keep_low: bool) -> list[Point]:
    """One Sutherland-Hodgman pass: keep the side of ``axis = bound`` given by
    ``keep_low`` (coordinate <= bound when True, >= bound when False)."""

    def inside(p: Point) -> bool:
        return p[axis] <= bound if keep_low else p[axis] >= bound

    def intersect(a: Point, b: Point) -> Point:
        t = (bound - a[axis]) / (b[axis] - a[axis])
        x = a[0] + t * (b[0] - a[0])
        y = a[1] + t * (b[1] - a[1])
        if axis == 0:
            return (bound, y)
        return (x, bound)

    out: list[Point] = []
    for i, cur in enumerate(points):
        prev = points[i - 1]
        if inside(cur):
            if not inside(prev):
                out.append(intersect(prev, cur))
            out.append(cur)
        elif inside(prev):
            out.append(intersect(prev, cur))
    return out


def _clip_ring_unit_square(ring: Sequence[Point]) -> tuple[Point, ...] | None:
    """Clip one closed ring against [0,1]^2; None when nothing remains."""
    pts = list(ring[:-1])  # open form
    for axis, bound, keep_low in (
        (0, 0.0, False),
        (0, 1.0, True),
        (1, 0.0, False),
        (1, 1.0, True),
    ):
        pts = _clip_ring_half_plane(pts, axis, bound, keep_low)
        if not pts:
            return None
    pts = [(_clamp01(x), _clamp01(y)) for x, y in pts]
    # drop consecutive duplicates introduced by corner intersections
    dedup: list[Point] = []
    for p in pts:
        if not dedup or p != dedup[-1]:
            dedup.append(p)
    if len(dedup) > 1 and dedup[0] == dedup[-1]:
        dedup.pop()
    if len(dedup) < 3:
        return None
    closed = tuple(dedup) + (dedup[0],)
    if signed_area(closed) == 0.0:
        return None
    return closed


def _clip_segment_unit_square(a: Point, b: Point) -> tuple[Point, Point] | None:
    """Liang-Barsky clip of segment ``a``-``b`` to [0,1]^2."""
    x0, y0 = a
    x1, y1 = b
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-dx, x0 - 0.0),
        (dx, 1.0 - x0),
        (-dy, y0 - 0.0),
        (dy, 1.0 - y0),
    ):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    if t0 > t1:
        return None
    pa = (_clamp01(x0 + t0 * dx), _clamp01(y0 + t0 * dy))
    pb = (_clamp01(x0 + t1 * dx), _clamp01(y0 + t1 * dy))
    if pa == pb:
        return None
    return pa, pb


def _clip_path_parts(parts: Sequence[Sequence[Point]]) -> tuple[tuple[Point, ...], ...]:
    clipped: list[tuple[Point, ...]] = []
    for part in parts:
        current: list[Point] = []
        for a, b in zip(part, part[1:]):
            seg = _clip_segment_unit_square(a, b)
            if seg is None:
                if len(current) >= 2:
                    clipped.append(tuple(current))
                current = []
                continue
            pa, pb = seg
            if current and current[-1] == pa:
                current.append(pb)
            else:
                if len(current) >= 2:
                    clipped.append(tuple(current))
                current = [pa, pb]
        if len(current) >= 2:
            clipped.append(tuple(current))
    return tuple(clipped)


def clip_and_normalize(
    geometry: Geometry, frame: PatchFrame | None = None
) -> tuple[Geometry, bool]:
    """Clip ``geometry`` to the patch and normalize coordinates into [0,1]^2.

    With a ``frame`` the input is taken in that frame's metre coordinates and
    scaled into the unit square first; with ``frame=None`` the input is
    already normalized and only clipping applies (re-clipping clipped output
    is the identity). Returns the clipped geometry and whether any part of
    the input extended beyond the patch.

    Raises EmptyAfterClip when nothing of the geometry lies inside the patch.
    """
    if isinstance(geometry, RingSet):
        raw_parts: Sequence[Sequence[Point]] = geometry.rings
    else:
        raw_parts = geometry.parts

    if frame is not None:
        raw_parts = [
            [_normalize_point(p, frame) for p in part] for part in raw_parts
        ]

    cropped = any(_outside_unit(p) for part in raw_parts for p in part)

    if isinstance(geometry, RingSet):
        rings = []
        for ring in raw_parts:
            kept = _clip_ring_unit_square(ring)
            if kept is not None:
                rings.append(kept)
        if not rings:
            raise EmptyAfterClip("no ring intersects the patch frame")
        return RingSet(tuple(rings)), cropped

    parts = _clip_path_parts(raw_parts)
    if not parts:
        raise EmptyAfterClip("no path segment intersects the patch frame")
    return Path(parts), cropped


# ---------------------------------------------------------------------------
# Area attributes


def area_fraction(g: RingSet) -> float:
    """Net area of the ring set as a fraction of the patch.

    Rings are summed with their shoelace sign, so holes wound opposite to
    their outer ring subtract; the net magnitude is returned.
    """
    total = sum(signed_area(r) for r in g.rings)
    return min(1.0, abs(total))


def centroid(g: RingSet) -> Point:
    """Area-weighted centroid of the ring set (holes pull their sign)."""
    area_sum = 0.0
    cx = 0.0
    cy = 0.0
    for ring in g.rings:
        for (x0, y0), (x1, y1) in zip(ring, ring[1:]):
            cross = x0 * y1 - x1 * y0
            cx += (x0 + x1) * cross
            cy += (y0 + y1) * cross
        area_sum += signed_area(ring)
    if abs(area_sum) < 1e-12:
        pts = [p for ring in g.rings for p in ring[:-1]]
        return (
            sum(p[0] for p in pts) / len(pts),
            sum(p[1] for p in pts) / len(pts),
        )
    return cx / (6.0 * area_sum), cy / (6.0 * area_sum)


_COLS = ("left", "center", "right")
_ROWS = ("bottom", "center", "top")


def grid_label(p: Point) -> str:
    """3x3 grid cell of a normalized point, e.g. ``left-top`` or ``center``.

    Bins are half-open and low-inclusive: x = 1/3 lands in the middle column.
    """
    col = min(2, max(0, int(math.floor(p[0] * 3.0))))
    row = min(2, max(0, int(math.floor(p[1] * 3.0))))
    if col == 1 and row == 1:
        return "center"
    return f"{_COLS[col]}-{_ROWS[row]}"


def coarse_location(g: RingSet) -> str:
    return grid_label(centroid(g))


def classify_shape(
    g: RingSet,
    *,
    circular_min_q: float = 0.85,
    boxy_min_fill: float = 0.85,
    square_aspect: tuple[float, float] = (0.8, 1.25),
) -> str:
    """Bucket a ring set into square / rectangular / circular / irregular.

    Uses the isoperimetric quotient Q = 4*pi*A/P^2 against ``circular_min_q``
    and the bounding-box fill F = A/(w*h) against ``boxy_min_fill``; the
    square/rectangular split is by bounding-box aspect ratio.
    """
    area = area_fraction(g)
    per = sum(perimeter(r) for r in g.rings)
    xs = [p[0] for p in g.all_points()]
    ys = [p[1] for p in g.all_points()]
    bbox_w = max(xs) - min(xs)
    bbox_h = max(ys) - min(ys)
    if per <= 0.0 or bbox_w <= 0.0 or bbox_h <= 0.0 or area <= 0.0:
        return "irregular"
    q = 4.0 * math.pi * area / (per * per)
    fill = area / (bbox_w * bbox_h)
    if q >= circular_min_q:
        return "circular"
    if fill >= boxy_min_fill:
        aspect = bbox_w / bbox_h
        if square_aspect[0] <= aspect <= square_aspect[1]:
            return "square"
        return "rectangular"
    return "irregular"


# ---------------------------------------------------------------------------
# Douglas-Peucker simplification


def simplify_dp(points: Sequence[Point], epsilon: float) -> list[Point]:
    """Classic Douglas-Peucker simplification of one point chain.

    Endpoints are always retained and every removed point lies within
    ``epsilon`` of the simplified chain (distances are to segments, so the
    bound holds at chain ends too). ``epsilon = 0`` returns the input
    untouched.
    """
    if len(points) < 2:
        raise ValueError("need at least 2 points")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if epsilon == 0:
        return list(points)

    keep = [False] * len(points)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        first, last = stack.pop()
        max_dist = 0.0
        max_idx = -1
        for i in range(first + 1, last):
            d = point_segment_distance(points[i], points[first], points[last])
            if d > max_dist:
                max_dist = d
                max_idx = i
        if max_dist > epsilon:
            keep[max_idx] = True
            stack.append((first, max_idx))
            stack.append((max_idx, last))
    return [p for p, k in zip(points, keep) if k]


def simplify_geometry(g: Geometry, epsilon: float = DEFAULT_SIMPLIFY_EPSILON) -> Geometry:
    """Douglas-Peucker applied part-wise; degenerate results fall back to the
    original part so rings stay valid."""
    if isinstance(g, RingSet):
        rings = []
        for ring in g.rings:
            simple = simplify_dp(ring, epsilon)
            if len(simple) < 4 or signed_area(simple) == 0.0:
                simple = list(ring)
            rings.append(tuple(simple))
        return RingSet(tuple(rings))
    parts = []
    for part in g.parts:
        simple = simplify_dp(part, epsilon)
        parts.append(tuple(simple if len(simple) >= 2 else part))
    return Path(tuple(parts))


# ---------------------------------------------------------------------------
# Rendering


def _fmt_coord(v: float) -> str:
    # + 0.0 folds -0.0 into 0.0 before rendering
    return format(v + 0.0, ".3f")


def format_geometry(g: Geometry) -> str:
    """Render geometry as brace-wrapped part lists of 3-decimal pairs,
    e.g. ``{[(0.000, 0.500), (0.120, 0.400)]}``."""
    parts = g.rings if isinstance(g, RingSet) else g.parts
    rendered = []
    for part in parts:
        pairs = ", ".join(f"({_fmt_coord(x)}, {_fmt_coord(y)})" for x, y in part)
        rendered.append(f"[{pairs}]")
    return "{" + ", ".join(rendered) + "}"


# ---------------------------------------------------------------------------
# Path attributes


def _part_length_m(part: Sequence[Point], frame: PatchFrame) -> float:
    total = 0.0
    for (x0, y0), (x1, y1) in zip(part, part[1:]):
        total += math.hypot((x1 - x0) * frame.width_m, (y1 - y0) * frame.height_m)
    return total


def path_length_m(p: Path, frame: PatchFrame) -> float:
    """Exact metre length of a normalized path within its frame."""
    return sum(_part_length_m(part, frame) for part in p.parts)


def orientation_label(dx_m: float, dy_m: float) -> str:
    """Endpoint-to-endpoint bearing binned into four 45-degree sectors that
    are symmetric under reversal: W_E, SW_NE, S_N, NW_SE."""
    theta = math.degrees(math.atan2(dy_m, dx_m)) % 180.0
    if theta < 22.5 or theta >= 157.5:
        return "W_E"
    if theta < 67.5:
        return "SW_NE"
    if theta < 112.5:
        return "S_N"
    return "NW_SE"


def path_metrics(
    p: Path,
    frame: PatchFrame,
    *,
    straight_max_ratio: float = 1.05,
    twisted_min_ratio: float = 1.5,
    closed_tolerance: float = 1e-6,
) -> PathMetrics:
    """Length, endpoint grid cells, sinuosity class, orientation and
    patch-normalized length of a normalized path.

    Sinuosity precedence: multi-part paths are ``broken``; paths whose
    endpoints coincide (within ``closed_tolerance``, normalized units) are
    ``closed``; otherwise the length / endpoint-distance ratio picks
    ``straight`` / ``curved`` / ``twisted``.
    """
    length = path_length_m(p, frame)
    if length <= 0.0:
        raise DegeneratePath("path has zero length")
    length_m = max(1, round(length))
    normalized_length = round(length_m / math.sqrt(frame.ground_area_m2), 3)

    start = p.parts[0][0]
    end = p.parts[-1][-1]
    endpoints = (grid_label(start), grid_label(end))

    if len(p.parts) > 1:
        sinuosity = "broken"
    elif math.dist(start, end) <= closed_tolerance:
        sinuosity = "closed"
    else:
        chord = math.hypot(
            (end[0] - start[0]) * frame.width_m, (end[1] - start[1]) * frame.height_m
        )
        ratio = length / chord
        if ratio < straight_max_ratio:
            sinuosity = "straight"
        elif ratio < twisted_min_ratio:
            sinuosity = "curved"
        else:
            sinuosity = "twisted"

    orientation = orientation_label(
        (end[0] - start[0]) * frame.width_m, (end[1] - start[1]) * frame.height_m
    )
    return PathMetrics(length_m, endpoints, sinuosity, orientation, normalized_length)


# ---------------------------------------------------------------------------
# Attribute bundles


def outer_rings(g: RingSet) -> RingSet:
    """Ring set reduced to its positively wound (outer) rings; if none are
    positive the original set is returned unchanged."""
    outers = tuple(r for r in g.rings if signed_area(r) > 0.0)
    if not outers:
        return g
    return RingSet(outers)


def area_attributes(
    g: RingSet,
    is_cropped: bool,
    *,
    epsilon: float = DEFAULT_SIMPLIFY_EPSILON,
    shape_params: dict | None = None,
) -> AreaAttributes:
    """Full Task-1 style attribute bundle for a clipped, normalized area."""
    simplified = simplify_geometry(outer_rings(g), epsilon)
    return AreaAttributes(
        coarse_location=coarse_location(g),
        shape=classify_shape(g, **(shape_params or {})),
        normalized_size=round(area_fraction(g), 3),
        simplified_geometry=format_geometry(simplified),
        is_cropped=is_cropped,
    )


def nonarea_attributes(
    p: Path,
    frame: PatchFrame,
    is_cropped: bool,
    *,
    epsilon: float = DEFAULT_SIMPLIFY_EPSILON,
    sinuosity_params: dict | None = None,
) -> NonAreaAttributes:
    """Full Task-2 style attribute bundle for a clipped, normalized path."""
    metrics = path_metrics(p, frame, **(sinuosity_params or {}))
    simplified = simplify_geometry(p, epsilon)
    return NonAreaAttributes(
        endpoint_locations=metrics.endpoint_locations,
        sinuosity=metrics.sinuosity,
        normalized_length=metrics.normalized_length,
        length_m=metrics.length_m,
        orientation=metrics.orientation,
        simplified_geometry=format_geometry(simplified),
        is_cropped=is_cropped,
    )


def rings_to_path(g: RingSet) -> Path:
    """View closed rings as closed path parts (for ring-shaped linear
    features such as circular roads)."""
    return Path(tuple(tuple(r) for r in g.rings))
