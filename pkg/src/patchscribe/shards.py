"""Compile finished patches into WebDataset-style tar shards.

Each DONE patch becomes one sample: an image member and a JSON annotation
member sharing the same key (``<key>.jpg`` + ``<key>.json``), adjacent in
the archive. Shards are named ``shard-%06d.tar`` and described by a
line-delimited ``manifest.jsonl`` sidecar. Archives are written with
zeroed timestamps and ownership so identical corpora produce identical
bytes.
"""

from __future__ import annotations

import io
import json
import logging
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

from .imagesource import LocalImageSource
from .store import PipelineStore

log = logging.getLogger(__name__)

DEFAULT_SAMPLES_PER_SHARD = 10_000
MANIFEST_NAME = "manifest.jsonl"
_SHARD_PATTERN = "shard-%06d.tar"


class CorruptShard(Exception):
    """Structural problem in a shard or its manifest; names the offending
    archive member when one is known."""

    def __init__(self, message: str, member: Optional[str] = None):
        self.member = member
        super().__init__(message if member is None else f"{member}: {message}")


@dataclass(frozen=True)
class ShardEntry:
    shard: str
    samples: int
    bytes: int
    first_key: str
    last_key: str


@dataclass(frozen=True)
class ShardManifest:
    entries: tuple[ShardEntry, ...]
    total_samples: int


def _annotation_for(store: PipelineStore, patch_id: str) -> dict:
    patch = store.get_patch(patch_id)
    assert patch is not None
    captions = [
        {
            "caption_id": c.caption_id,
            "task": c.task,
            "revision_of": c.revision_of,
            "text": c.text,
        }
        for c in store.captions_for(patch_id)
        if c.state == "refined"
    ]
    return {
        "patch_id": patch_id,
        "task": patch.task,
        "geo_bbox": [
            patch.geo_bbox.min_lon,
            patch.geo_bbox.min_lat,
            patch.geo_bbox.max_lon,
            patch.geo_bbox.max_lat,
        ],
        "width_px": patch.frame.width_px,
        "height_px": patch.frame.height_px,
        "gsd_m": patch.frame.gsd_m,
        "capture_time": patch.frame.capture_time.isoformat(),
        "captions": captions,
    }


def _member(name: str, payload: bytes) -> tarfile.TarInfo:
    info = tarfile.TarInfo(name=name)
    info.size = len(payload)
    info.mtime = 0
    info.mode = 0o644
    info.uid = 0
    info.gid = 0
    info.uname = ""
    info.gname = ""
    return info


def write_shards(
    store: PipelineStore,
    image_source: LocalImageSource,
    out_dir: str | Path,
    samples_per_shard: int = DEFAULT_SAMPLES_PER_SHARD,
) -> ShardManifest:
    """Pack every DONE patch into tar shards under ``out_dir``.

    Samples keep the sorted patch-id order, so keys are sorted within and
    across shards. A failure mid-shard removes the partial archive before
    the error propagates.
    """
    if samples_per_shard < 1:
        raise ValueError("samples_per_shard must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = store.done_patch_ids()

    entries: list[ShardEntry] = []
    for shard_index in range(0, (len(keys) + samples_per_shard - 1) // samples_per_shard):
        chunk = keys[
            shard_index * samples_per_shard : (shard_index + 1) * samples_per_shard
        ]
        shard_name = _SHARD_PATTERN % shard_index
        shard_path = out / shard_name
        try:
            with tarfile.open(shard_path, "w", format=tarfile.USTAR_FORMAT) as tar:
                for key in chunk:
                    patch = store.get_patch(key)
                    assert patch is not None
                    image = image_source.load_bytes(patch.image_ref)
                    ext = Path(patch.image_ref).suffix.lstrip(".") or "jpg"
                    annotation = json.dumps(
                        _annotation_for(store, key),
                        sort_keys=True,
                        ensure_ascii=False,
                    ).encode("utf-8")
                    tar.addfile(_member(f"{key}.{ext}", image), io.BytesIO(image))
                    tar.addfile(_member(f"{key}.json", annotation), io.BytesIO(annotation))
        except BaseException:
            shard_path.unlink(missing_ok=True)
            raise
        entries.append(
            ShardEntry(
                shard=shard_name,
                samples=len(chunk),
                bytes=shard_path.stat().st_size,
                first_key=chunk[0],
                last_key=chunk[-1],
            )
        )

    manifest = ShardManifest(entries=tuple(entries), total_samples=len(keys))
    lines = [
        json.dumps(
            {
                "record": "shard",
                "shard": e.shard,
                "samples": e.samples,
                "bytes": e.bytes,
                "first_key": e.first_key,
                "last_key": e.last_key,
            },
            sort_keys=True,
        )
        for e in entries
    ]
    lines.append(
        json.dumps(
            {
                "record": "summary",
                "shards": len(entries),
                "total_samples": len(keys),
            },
            sort_keys=True,
        )
    )
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", "utf-8")
    log.info(
        '{"record": "compile_report", "shards": %d, "total_samples": %d}',
        len(entries),
        len(keys),
    )
    return manifest


def read_manifest(out_dir: str | Path) -> ShardManifest:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.is_file():
        raise CorruptShard(f"missing manifest: {path}")
    entries: list[ShardEntry] = []
    summary: Optional[dict] = None
    for number, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorruptShard(f"manifest line {number}: invalid JSON: {e.msg}")
        if rec.get("record") == "shard":
            entries.append(
                ShardEntry(
                    shard=rec["shard"],
                    samples=rec["samples"],
                    bytes=rec["bytes"],
                    first_key=rec["first_key"],
                    last_key=rec["last_key"],
                )
            )
        elif rec.get("record") == "summary":
            summary = rec
    if summary is None:
        raise CorruptShard("manifest has no summary record")
    if summary["shards"] != len(entries):
        raise CorruptShard(
            f"manifest lists {len(entries)} shards but summary says {summary['shards']}"
        )
    total = sum(e.samples for e in entries)
    if summary["total_samples"] != total:
        raise CorruptShard(
            f"shard records sum to {total} samples but summary says"
            f" {summary['total_samples']}"
        )
    return ShardManifest(entries=tuple(entries), total_samples=total)


def read_shards(out_dir: str | Path) -> Iterator[tuple[str, bytes, dict]]:
    """Stream (key, image bytes, annotation) over every shard in order.

    Validates pairing, member order, key ordering and uniqueness, and
    per-shard sample counts against the manifest; any structural problem
    raises CorruptShard naming the offending member.
    """
    out = Path(out_dir)
    manifest = read_manifest(out)
    seen_keys: set[str] = set()
    for entry in manifest.entries:
        shard_path = out / entry.shard
        if not shard_path.is_file():
            raise CorruptShard("shard file missing", member=entry.shard)
        count = 0
        previous_key: Optional[str] = None
        with tarfile.open(shard_path, "r") as tar:
            members = tar.getmembers()
            if len(members) % 2 != 0:
                raise CorruptShard(
                    "odd member count; samples must be image+json pairs",
                    member=entry.shard,
                )
            for image_member, json_member in zip(members[0::2], members[1::2]):
                key = Path(image_member.name).stem
                if image_member.name.endswith(".json"):
                    raise CorruptShard(
                        "expected an image member", member=image_member.name
                    )
                if json_member.name != f"{key}.json":
                    raise CorruptShard(
                        f"expected {key}.json next to {image_member.name}",
                        member=json_member.name,
                    )
                if key in seen_keys:
                    raise CorruptShard("duplicate key", member=image_member.name)
                if previous_key is not None and not (previous_key < key):
                    raise CorruptShard(
                        "keys out of order", member=image_member.name
                    )
                seen_keys.add(key)
                previous_key = key
                image_fh = tar.extractfile(image_member)
                json_fh = tar.extractfile(json_member)
                if image_fh is None or json_fh is None:
                    raise CorruptShard(
                        "member is not a regular file", member=image_member.name
                    )
                try:
                    annotation = json.loads(json_fh.read().decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as e:
                    raise CorruptShard(
                        f"bad annotation: {e}", member=json_member.name
                    )
                if annotation.get("patch_id") != key:
                    raise CorruptShard(
                        "annotation patch_id does not match key",
                        member=json_member.name,
                    )
                count += 1
                yield key, image_fh.read(), annotation
        if count != entry.samples:
            raise CorruptShard(
                f"manifest says {entry.samples} samples, found {count}",
                member=entry.shard,
            )
    if len(seen_keys) != manifest.total_samples:
        raise CorruptShard(
            f"manifest total {manifest.total_samples} but read {len(seen_keys)}"
        )
