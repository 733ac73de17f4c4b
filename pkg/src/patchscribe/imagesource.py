"""Local patch-image source.

A source directory holds one image file per patch named
``<patch_id>.<ext>`` plus an ``index.jsonl`` metadata file with one record
per line: patch_id, geodetic bbox, ground sampling distance, capture time,
and optional pixel dimensions / extension. Image bytes are treated as
opaque; nothing here decodes pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .geometry import PatchFrame
from .osm import GeoBBox

INDEX_NAME = "index.jsonl"
DEFAULT_SIZE_PX = 448
DEFAULT_EXT = "jpg"


class IndexFormatError(Exception):
    """Bad record in index.jsonl; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"{INDEX_NAME} line {line_number}: {message}")


class MissingImage(Exception):
    """Referenced image file does not exist."""


def _parse_time(value: str) -> datetime:
    t = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t


@dataclass(frozen=True)
class PatchEntry:
    patch_id: str
    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float
    gsd_m: float
    capture_time: datetime
    width_px: int = DEFAULT_SIZE_PX
    height_px: int = DEFAULT_SIZE_PX
    ext: str = DEFAULT_EXT

    @property
    def image_ref(self) -> str:
        return f"{self.patch_id}.{self.ext}"

    def frame(self) -> PatchFrame:
        return PatchFrame.from_pixels(
            self.width_px, self.height_px, self.gsd_m, self.capture_time
        )

    def geo_bbox(self) -> GeoBBox:
        return GeoBBox(self.min_lon, self.min_lat, self.max_lon, self.max_lat)


class LocalImageSource:
    """Directory-backed image source with a JSONL metadata index."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"image source directory not found: {self.root}")

    def entries(self) -> list[PatchEntry]:
        index = self.root / INDEX_NAME
        if not index.is_file():
            raise FileNotFoundError(f"missing {index}")
        out: list[PatchEntry] = []
        seen: set[str] = set()
        for number, line in enumerate(
            index.read_text("utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise IndexFormatError(number, f"invalid JSON: {e.msg}") from e
            try:
                entry = PatchEntry(
                    patch_id=str(rec["patch_id"]),
                    min_lon=float(rec["min_lon"]),
                    min_lat=float(rec["min_lat"]),
                    max_lon=float(rec["max_lon"]),
                    max_lat=float(rec["max_lat"]),
                    gsd_m=float(rec["gsd_m"]),
                    capture_time=_parse_time(rec["capture_time"]),
                    width_px=int(rec.get("width_px", DEFAULT_SIZE_PX)),
                    height_px=int(rec.get("height_px", DEFAULT_SIZE_PX)),
                    ext=str(rec.get("ext", DEFAULT_EXT)),
                )
            except (KeyError, ValueError, TypeError) as e:
                raise IndexFormatError(number, f"bad record: {e}") from e
            if entry.patch_id in seen:
                raise IndexFormatError(number, f"duplicate patch_id {entry.patch_id!r}")
            seen.add(entry.patch_id)
            # frame/bbox constructors validate extents; surface bad rows here
            try:
                entry.frame()
                entry.geo_bbox()
            except Exception as e:
                raise IndexFormatError(number, f"inconsistent record: {e}") from e
            out.append(entry)
        return out

    def load_bytes(self, image_ref: str) -> bytes:
        path = self.root / image_ref
        if not path.is_file():
            raise MissingImage(f"no such image: {path}")
        return path.read_bytes()
