"""Shared fixtures: synthetic patch worlds with canned map responses."""

from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

AREA = "area"
ROAD = "road"
BOTH = "both"
EMPTY = "empty"


def kind_for(i: int) -> str:
    """Deterministic patch mix: mostly area and road patches, every fifth
    has both (area wins), every tenth has no map data at all."""
    if i % 10 == 9:
        return EMPTY
    r = i % 5
    if r < 2:
        return AREA
    if r < 4:
        return ROAD
    return BOTH


def _forest_way(way_id: int, name: str, lons: tuple[float, float], lats: tuple[float, float], inset: float) -> dict:
    lo_x, hi_x = lons[0] + inset, lons[1] - inset
    lo_y, hi_y = lats[0] + inset, lats[1] - inset
    ring = [
        {"lon": lo_x, "lat": lo_y},
        {"lon": hi_x, "lat": lo_y},
        {"lon": hi_x, "lat": hi_y},
        {"lon": lo_x, "lat": hi_y},
        {"lon": lo_x, "lat": lo_y},
    ]
    return {
        "type": "way",
        "id": way_id,
        "tags": {"landuse": "forest", "name": name},
        "geometry": ring,
    }


def _road_way(way_id: int, name: str, lons: tuple[float, float], lats: tuple[float, float]) -> dict:
    overhang = (lons[1] - lons[0]) * 0.25
    return {
        "type": "way",
        "id": way_id,
        "tags": {"highway": "residential", "name": name, "surface": "asphalt"},
        "geometry": [
            {"lon": lons[0] - overhang, "lat": lats[0] - overhang},
            {"lon": (lons[0] + lons[1]) / 2, "lat": (lats[0] + lats[1]) / 2},
            {"lon": lons[1] + overhang, "lat": lats[1] + overhang},
        ],
    }


def build_world(root: Path, count: int, *, seed: int = 11, config_extra: str = "") -> dict:
    """Create an image directory, canned fetch responses, and a config file.

    Returns the important paths. Deterministic for a given (count, seed).
    """
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    index_lines = []
    fixture: dict = {}
    for i in range(count):
        pid = f"p{i:03d}"
        min_lon = 10.0 + (i % 25) * 0.01
        min_lat = 50.0 + (i // 25) * 0.01
        max_lon, max_lat = min_lon + 0.004, min_lat + 0.004
        index_lines.append(
            json.dumps(
                {
                    "patch_id": pid,
                    "min_lon": min_lon,
                    "min_lat": min_lat,
                    "max_lon": max_lon,
                    "max_lat": max_lat,
                    "gsd_m": 0.6,
                    "capture_time": "2021-08-03T10:00:00+00:00",
                }
            )
        )
        payload = bytes([rng.randrange(256) for _ in range(128)])
        (images / f"{pid}.jpg").write_bytes(b"\xff\xd8\xff\xe0" + pid.encode() + payload)

        kind = kind_for(i)
        elements = []
        lons, lats = (min_lon, max_lon), (min_lat, max_lat)
        if kind in (AREA, BOTH):
            elements.append(_forest_way(1000 + i, f"Wood {i}", lons, lats, 0.0005))
        if kind in (ROAD, BOTH):
            elements.append(_road_way(2000 + i, f"Elm Street {i}", lons, lats))
        fixture[pid] = {"step1": {"elements": elements}, "step2": {"elements": []}}

    (images / "index.jsonl").write_text("\n".join(index_lines) + "\n", "utf-8")
    fixture_path = root / "osm_fixture.json"
    fixture_path.write_text(json.dumps(fixture, sort_keys=True), "utf-8")

    config_path = root / "config.yaml"
    config_path.write_text(
        f"""\
store_path: {root}/run/pipeline.db
images_dir: {images}
out_dir: {root}/shards
reports_dir: {root}/reports
overpass_url: fixture:{fixture_path}
mock_llm: true
seed: 7
{config_extra}""",
        "utf-8",
    )
    return {
        "root": root,
        "images": images,
        "fixture": fixture_path,
        "config": config_path,
        "store": root / "run" / "pipeline.db",
        "shards": root / "shards",
        "reports": root / "reports",
    }


@pytest.fixture
def small_world(tmp_path: Path) -> dict:
    return build_world(tmp_path / "world", 6)


def corpus_snapshot(store) -> list[tuple]:
    """Stable digest of all durable pipeline state (no leases, no errors)."""
    rows: list[tuple] = []
    for pid in store.all_patch_ids():
        p = store.get_patch(pid)
        rows.append(
            (
                pid,
                p.status,
                p.task,
                p.selected_kind,
                p.selected_id,
                p.target_count,
            )
        )
        for c in store.captions_for(pid):
            rows.append(
                (c.caption_id, c.task, c.revision_of, c.state, c.text, c.reason)
            )
    return rows
