"""Overpass queries, response parsing, and element classification/selection.

Patch context is gathered in two steps: step 1 selects every way and
relation whose geometry intersects the patch bbox, step 2 adds features
that enclose the patch center without crossing the bbox (large lakes,
forests). The merged element list feeds area / non-area selection for the
two captioning tasks.
"""

from __future__ import annotations

import calendar
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone

import requests

from .geometry import (
    EmptyAfterClip,
    Geometry,
    PatchFrame,
    Path,
    RingSet,
    area_fraction,
    clip_and_normalize,
    path_length_m,
    rings_to_path,
    signed_area,
)

log = logging.getLogger(__name__)

#: Keys whose presence on a closed ring marks the element as an area.
AREA_KEYS = frozenset(
    {
        "landuse",
        "natural",
        "building",
        "leisure",
        "amenity",
        "water",
        "landcover",
        "place",
        "aeroway",
        "man_made",
    }
)

#: Clipped-area threshold below which Task 1 skips the patch.
AREA_FRACTION_THRESHOLD = 0.1

#: Task 2 minimum clipped length, as a fraction of sqrt(patch ground area).
MIN_LENGTH_FACTOR = 0.1

_KIND_ORDER = {"way": 0, "relation": 1}


class InvalidBBox(Exception):
    """Degenerate or inverted geographic bbox."""


class ParseError(Exception):
    """Malformed Overpass response; carries the byte offset when known."""

    def __init__(self, message: str, offset: int = 0):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


class BackendUnavailable(Exception):
    """Overpass endpoint kept failing after retries."""


class BadRequest(Exception):
    """Overpass rejected the query itself."""


@dataclass(frozen=True)
class GeoBBox:
    """Geodetic patch extent, degrees, lon/lat axis order."""

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self) -> None:
        if not (self.min_lon < self.max_lon and self.min_lat < self.max_lat):
            raise InvalidBBox(
                f"bbox must have positive extent, got {self}"
            )

    @property
    def center(self) -> tuple[float, float]:
        return (
            (self.min_lon + self.max_lon) / 2.0,
            (self.min_lat + self.max_lat) / 2.0,
        )


@dataclass(frozen=True, eq=False)
class OsmElement:
    """One way or relation with resolved geometry.

    ``geometry`` coordinates are (lon, lat) straight off the wire until
    ``project_element`` maps them into a patch frame's metre grid.
    """

    id: int
    kind: str
    tags: dict[str, str]
    geometry: Geometry
    fetched_at: datetime

    def __post_init__(self) -> None:
        if self.kind not in _KIND_ORDER:
            raise ValueError(f"kind must be way or relation, got {self.kind!r}")

    @property
    def ref(self) -> tuple[int, int]:
        """Deterministic sort key: way before relation, then id ascending."""
        return (_KIND_ORDER[self.kind], self.id)


# ---------------------------------------------------------------------------
# Snapshot date and query building


def snapshot_date(capture_time: datetime) -> datetime:
    """Map data snapshot: one calendar month after capture, day clamped to
    the target month's end (Jan 31 -> Feb 28/29)."""
    year = capture_time.year + (capture_time.month // 12)
    month = capture_time.month % 12 + 1
    day = min(capture_time.day, calendar.monthrange(year, month)[1])
    return capture_time.replace(year=year, month=month, day=day)


def _date_clause(as_of: datetime) -> str:
    return as_of.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def build_query_step1(bbox: GeoBBox, as_of: datetime, timeout_s: int = 180) -> str:
    """OverpassQL selecting all ways and relations intersecting ``bbox`` as
    of the snapshot date, with inline geometry output."""
    b = f"{bbox.min_lat},{bbox.min_lon},{bbox.max_lat},{bbox.max_lon}"
    return (
        f'[out:json][timeout:{timeout_s}][date:"{_date_clause(as_of)}"];\n'
        f"(\n  way({b});\n  relation({b});\n);\n"
        f"out tags geom;\n"
    )


def build_query_step2(
    center_lonlat: tuple[float, float], as_of: datetime, timeout_s: int = 180
) -> str:
    """OverpassQL selecting features that enclose the patch center point."""
    lon, lat = center_lonlat
    return (
        f'[out:json][timeout:{timeout_s}][date:"{_date_clause(as_of)}"];\n'
        f"is_in({lat},{lon})->.a;\n"
        f"(\n  way(pivot.a);\n  relation(pivot.a);\n);\n"
        f"out tags geom;\n"
    )


# ---------------------------------------------------------------------------
# Response parsing


def _points_of(raw_geometry: list) -> list[tuple[float, float]]:
    return [(float(p["lon"]), float(p["lat"])) for p in raw_geometry]


def _way_geometry(points: list[tuple[float, float]]) -> Geometry | None:
    if len(points) < 2:
        return None
    if len(points) >= 4 and points[0] == points[-1]:
        ring = tuple(points)
        if signed_area(ring) != 0.0:
            return RingSet((ring,))
        return None
    # drop consecutive duplicates that would invalidate a Path
    dedup = [points[0]]
    for p in points[1:]:
        if p != dedup[-1]:
            dedup.append(p)
    if len(dedup) < 2:
        return None
    return Path((tuple(dedup),))


def _assemble_rings(
    segments: list[list[tuple[float, float]]],
) -> tuple[list[tuple[tuple[float, float], ...]], int]:
    """Stitch way segments into closed rings by matching endpoints.

    Returns (rings, skipped_count). Segments that cannot be closed are
    counted and dropped.
    """
    pool = [list(s) for s in segments if len(s) >= 2]
    skipped = len(segments) - len(pool)
    rings: list[tuple[tuple[float, float], ...]] = []
    while pool:
        chain = pool.pop(0)
        progress = True
        while chain[0] != chain[-1] and progress:
            progress = False
            for i, seg in enumerate(pool):
                if seg[0] == chain[-1]:
                    chain.extend(seg[1:])
                elif seg[-1] == chain[-1]:
                    chain.extend(reversed(seg[:-1]))
                elif seg[-1] == chain[0]:
                    chain[0:0] = seg[:-1]
                elif seg[0] == chain[0]:
                    chain[0:0] = list(reversed(seg[1:]))
                else:
                    continue
                pool.pop(i)
                progress = True
                break
        if chain[0] == chain[-1] and len(chain) >= 4 and signed_area(chain) != 0.0:
            rings.append(tuple(chain))
        else:
            skipped += 1
    return rings, skipped


def _orient_ring(
    ring: tuple[tuple[float, float], ...], outer: bool
) -> tuple[tuple[float, float], ...]:
    positive = signed_area(ring) > 0
    if positive != outer:
        return tuple(reversed(ring))
    return ring


def _relation_geometry(raw: dict) -> tuple[Geometry | None, int]:
    """Resolve relation member geometry; returns (geometry, skipped_members)."""
    members = raw.get("members", [])
    tags = raw.get("tags", {})
    outers: list[list[tuple[float, float]]] = []
    inners: list[list[tuple[float, float]]] = []
    lines: list[tuple[tuple[float, float], ...]] = []
    skipped = 0
    for m in members:
        if m.get("type") != "way" or "geometry" not in m:
            continue  # node/relation members carry no usable outline
        pts = _points_of(m["geometry"])
        if len(pts) < 2:
            skipped += 1
            continue
        role = m.get("role", "")
        if role == "outer":
            outers.append(pts)
        elif role == "inner":
            inners.append(pts)
        else:
            lines.append(tuple(pts))

    if tags.get("type") == "multipolygon" or outers:
        outer_rings, s1 = _assemble_rings(outers)
        inner_rings, s2 = _assemble_rings(inners)
        skipped += s1 + s2
        rings = [_orient_ring(r, outer=True) for r in outer_rings]
        rings += [_orient_ring(r, outer=False) for r in inner_rings]
        if rings:
            return RingSet(tuple(rings)), skipped

    parts = []
    for pts in lines:
        g = _way_geometry(list(pts))
        if isinstance(g, Path):
            parts.extend(g.parts)
        elif isinstance(g, RingSet):
            parts.extend(tuple(r) for r in g.rings)
        else:
            skipped += 1
    if parts:
        return Path(tuple(parts)), skipped
    return None, skipped


def parse_response(
    body: bytes | str, fetched_at: datetime | None = None
) -> list[OsmElement]:
    """Parse an Overpass JSON response with inline geometry into elements.

    Nodes are dropped by design (too small to be seen at patch scale).
    Malformed elements and relation members are skipped; the skip count is
    logged as a warning. Raises ParseError with a byte offset on documents
    that are not valid Overpass JSON.
    """
    if isinstance(body, bytes):
        body = body.decode("utf-8", errors="replace")
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", offset=e.pos) from e
    if not isinstance(doc, dict) or not isinstance(doc.get("elements"), list):
        raise ParseError("missing 'elements' array")

    when = fetched_at or datetime.now(timezone.utc)
    out: list[OsmElement] = []
    skipped = 0
    for raw in doc["elements"]:
        kind = raw.get("type")
        if kind == "node":
            continue
        if kind not in _KIND_ORDER or "id" not in raw:
            skipped += 1
            continue
        tags = {str(k): str(v) for k, v in raw.get("tags", {}).items()}
        if kind == "way":
            geom = _way_geometry(_points_of(raw.get("geometry", [])))
            if geom is None:
                skipped += 1
                continue
        else:
            geom, member_skips = _relation_geometry(raw)
            skipped += member_skips
            if geom is None:
                skipped += 1
                continue
        out.append(
            OsmElement(
                id=int(raw["id"]), kind=kind, tags=tags, geometry=geom, fetched_at=when
            )
        )
    if skipped:
        log.warning("parse_response skipped %d malformed element(s)/member(s)", skipped)
    return out


def merge_dedupe(a: list[OsmElement], b: list[OsmElement]) -> list[OsmElement]:
    """Union of two fetch steps keyed by (kind, id); the first list wins on
    conflicts and its order is preserved, novel elements of ``b`` follow."""
    seen = {(e.kind, e.id) for e in a}
    merged = list(a)
    for e in b:
        if (e.kind, e.id) not in seen:
            seen.add((e.kind, e.id))
            merged.append(e)
    return merged


def element_to_dict(e: OsmElement) -> dict:
    if isinstance(e.geometry, RingSet):
        geom = {
            "type": "rings",
            "parts": [[list(p) for p in ring] for ring in e.geometry.rings],
        }
    else:
        geom = {
            "type": "path",
            "parts": [[list(p) for p in part] for part in e.geometry.parts],
        }
    return {
        "id": e.id,
        "kind": e.kind,
        "tags": dict(e.tags),
        "geometry": geom,
        "fetched_at": e.fetched_at.isoformat(),
    }


def element_from_dict(d: dict) -> OsmElement:
    parts = tuple(tuple((x, y) for x, y in part) for part in d["geometry"]["parts"])
    geometry: Geometry
    if d["geometry"]["type"] == "rings":
        geometry = RingSet(parts)
    else:
        geometry = Path(parts)
    return OsmElement(
        id=d["id"],
        kind=d["kind"],
        tags=dict(d["tags"]),
        geometry=geometry,
        fetched_at=datetime.fromisoformat(d["fetched_at"]),
    )


def elements_to_json(elements: list[OsmElement]) -> str:
    return json.dumps([element_to_dict(e) for e in elements], sort_keys=True)


def elements_from_json(raw: str) -> list[OsmElement]:
    return [element_from_dict(d) for d in json.loads(raw)]


# ---------------------------------------------------------------------------
# Projection into a patch frame


def project_element(e: OsmElement, bbox: GeoBBox, frame: PatchFrame) -> OsmElement:
    """Affine-map wire (lon, lat) geometry onto the frame's metre grid.

    The patch bbox corners map onto the frame corners; this is the single
    configured frame transform, not a general reprojection.
    """
    lon_span = bbox.max_lon - bbox.min_lon
    lat_span = bbox.max_lat - bbox.min_lat

    def conv(p: tuple[float, float]) -> tuple[float, float]:
        return (
            frame.min_x + (p[0] - bbox.min_lon) / lon_span * frame.width_m,
            frame.min_y + (p[1] - bbox.min_lat) / lat_span * frame.height_m,
        )

    g = e.geometry
    if isinstance(g, RingSet):
        projected: Geometry = RingSet(
            tuple(tuple(conv(p) for p in ring) for ring in g.rings)
        )
    else:
        projected = Path(tuple(tuple(conv(p) for p in part) for part in g.parts))
    return replace(e, geometry=projected)


# ---------------------------------------------------------------------------
# Classification and selection


def classify_element(e: OsmElement) -> str:
    """'area', 'non_area', or 'ignored' (administrative borders)."""
    tags = e.tags
    if tags.get("boundary") == "administrative" or tags.get("type") == "boundary":
        return "ignored"
    if e.kind == "relation" and tags.get("type") == "multipolygon":
        return "area"
    if isinstance(e.geometry, RingSet):
        if tags.get("area") == "yes" or any(k in AREA_KEYS for k in tags):
            return "area"
    return "non_area"


def _as_path(g: Geometry) -> Path:
    return g if isinstance(g, Path) else rings_to_path(g)


def clipped_area_fraction(e: OsmElement, frame: PatchFrame) -> float:
    """Fraction of the patch covered by the element after clipping; 0 when
    the geometry misses the patch entirely."""
    if not isinstance(e.geometry, RingSet):
        return 0.0
    try:
        clipped, _ = clip_and_normalize(e.geometry, frame)
    except EmptyAfterClip:
        return 0.0
    assert isinstance(clipped, RingSet)
    return area_fraction(clipped)


def clipped_length_m(e: OsmElement, frame: PatchFrame) -> float:
    """Metre length of the element's outline inside the patch."""
    try:
        clipped, _ = clip_and_normalize(_as_path(e.geometry), frame)
    except EmptyAfterClip:
        return 0.0
    assert isinstance(clipped, Path)
    return path_length_m(clipped, frame)


def select_area_element(
    elements: list[OsmElement],
    frame: PatchFrame,
    threshold: float = AREA_FRACTION_THRESHOLD,
) -> OsmElement | None:
    """Largest-area element for Task 1, or None when even the largest covers
    less than ``threshold`` of the patch. Ties break by (way first, id asc)."""
    best: tuple[float, tuple[int, int]] | None = None
    best_element = None
    for e in elements:
        if classify_element(e) != "area":
            continue
        fraction = clipped_area_fraction(e, frame)
        key = (-fraction, e.ref)
        if best is None or key < best:
            best = key
            best_element = e
    if best is None or -best[0] < threshold:
        return None
    return best_element


def select_nonarea_element(
    elements: list[OsmElement],
    frame: PatchFrame,
    min_length_factor: float = MIN_LENGTH_FACTOR,
) -> OsmElement | None:
    """Task 2 pick: among the three longest non-area elements, the one with
    the most tags (ties: longer, then way first / id asc). None when nothing
    qualifies or the winner is shorter than ``min_length_factor`` times the
    patch edge scale."""
    candidates = []
    for e in elements:
        if classify_element(e) != "non_area":
            continue
        length = clipped_length_m(e, frame)
        if length <= 0.0:
            continue
        candidates.append((length, e))
    if not candidates:
        return None
    candidates.sort(key=lambda pair: (-pair[0], pair[1].ref))
    top = candidates[:3]
    top.sort(key=lambda pair: (-len(pair[1].tags), -pair[0], pair[1].ref))
    length, winner = top[0]
    if length < min_length_factor * math.sqrt(frame.ground_area_m2):
        return None
    return winner


def usability_check(elements: list[OsmElement], frame: PatchFrame) -> bool:
    """True when the patch supports at least one captioning task."""
    return (
        select_area_element(elements, frame) is not None
        or select_nonarea_element(elements, frame) is not None
    )


# ---------------------------------------------------------------------------
# HTTP client


class OverpassClient:
    """Minimal Overpass endpoint client: rate-limited, bounded concurrency,
    retry with exponential backoff on transient failures."""

    def __init__(
        self,
        url: str,
        *,
        min_interval_s: float = 1.0,
        max_concurrency: int = 2,
        max_retries: int = 4,
        backoff_base_s: float = 1.0,
        timeout_s: float = 300.0,
        session: requests.Session | None = None,
    ) -> None:
        self.url = url
        self.min_interval_s = min_interval_s
        self.max_retries = max_retries
        self.backoff_base_s = backoff_base_s
        self.timeout_s = timeout_s
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(max_concurrency)
        self._rate_lock = threading.Lock()
        self._next_slot = 0.0

    def _wait_for_slot(self) -> None:
        with self._rate_lock:
            now = time.monotonic()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + self.min_interval_s
        if wait > 0:
            time.sleep(wait)

    def query(self, text: str) -> bytes:
        """POST one OverpassQL program, returning the raw response body.

        Raises BadRequest on 4xx (except 429) and BackendUnavailable once
        retries on 429/5xx/connection errors are exhausted.
        """
        last_error: Exception | None = None
        with self._gate:
            for attempt in range(self.max_retries + 1):
                self._wait_for_slot()
                try:
                    resp = self._session.post(
                        self.url, data={"data": text}, timeout=self.timeout_s
                    )
                except requests.RequestException as e:
                    last_error = e
                else:
                    if resp.status_code == 200:
                        return resp.content
                    if 400 <= resp.status_code < 500 and resp.status_code != 429:
                        raise BadRequest(
                            f"endpoint rejected query: HTTP {resp.status_code}"
                        )
                    last_error = BackendUnavailable(f"HTTP {resp.status_code}")
                if attempt < self.max_retries:
                    time.sleep(self.backoff_base_s * (2 ** attempt))
        raise BackendUnavailable(f"giving up after retries: {last_error}")


class FixtureOverpassClient:
    """Test double: serves canned bodies keyed by substring of the query."""

    def __init__(self, responses: dict[str, bytes | str]):
        self.responses = dict(responses)
        self.queries: list[str] = []

    def query(self, text: str) -> bytes:
        self.queries.append(text)
        for needle, body in self.responses.items():
            if needle in text:
                return body if isinstance(body, bytes) else body.encode("utf-8")
        return b'{"elements": []}'
